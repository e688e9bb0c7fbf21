"""Synthetic token-level tasks with exact checkers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .decoding import DecodeSchedule, decode_batch
from .model import DenoiserParams, Vocabulary

DIGITS = tuple(str(i) for i in range(10))
SYMBOLS = DIGITS + ("+", "mod", "copy", "rev", "sort", "<eos>")


def default_vocab() -> Vocabulary:
    return Vocabulary(SYMBOLS, eos="<eos>")


@dataclass(frozen=True)
class TaskSpec:
    """A prompt generator plus its deterministic answer and exact-match checker.

    Prompts and answers are symbol lists; answers exclude the EOS padding,
    which :func:`encode_pair` appends up to the response length.
    """

    task_id: str
    sample: Callable[[np.random.Generator], list[str]]
    answer: Callable[[Sequence[str]], list[str]]
    space: int

    def check(self, prompt: Sequence[str], candidate: Sequence[str]) -> bool:
        """Candidate up to its first EOS must equal the true answer."""
        try:
            cut = list(candidate).index("<eos>")
        except ValueError:
            return False
        return list(candidate[:cut]) == self.answer(prompt)


def _listy(tag: str, fn, lo: int, hi: int) -> TaskSpec:
    def sample(rng):
        k = int(rng.integers(lo, hi + 1))
        return [tag] + [DIGITS[int(d)] for d in rng.integers(0, 10, size=k)]

    def answer(prompt):
        if not prompt or prompt[0] != tag:
            raise ValueError(f"not a {tag} prompt: {prompt}")
        return fn(list(prompt[1:]))

    return TaskSpec(tag if tag != "rev" else "reverse", sample, answer,
                    space=sum(10 ** k for k in range(lo, hi + 1)))


def _mod_task(terms: int = 2) -> TaskSpec:
    def sample(rng):
        out = []
        for i in range(terms):
            if i:
                out.append("+")
            out.append(DIGITS[int(rng.integers(0, 10))])
        return out + ["mod", DIGITS[int(rng.integers(2, 10))]]

    def answer(prompt):
        if len(prompt) != 2 * terms + 1 or prompt[-2] != "mod":
            raise ValueError(f"not a modular-sum prompt: {prompt}")
        total = sum(int(prompt[i]) for i in range(0, 2 * terms, 2))
        return [str(total % int(prompt[-1]))]

    return TaskSpec("mod", sample, answer, space=10 ** terms * 8)


def builtin_tasks(min_len: int = 3, max_len: int = 6) -> dict[str, TaskSpec]:
    return {
        "copy": _listy("copy", lambda xs: xs, min_len, max_len),
        "reverse": _listy("rev", lambda xs: xs[::-1], min_len, max_len),
        "sort": _listy("sort", lambda xs: sorted(xs, key=int), min_len, max_len),
        "mod": _mod_task(),
    }


def get_task(task_id: str, **kw) -> TaskSpec:
    tasks = builtin_tasks(**kw)
    if task_id not in tasks:
        raise ValueError(f"unknown task {task_id!r}; known: {', '.join(sorted(tasks))}")
    return tasks[task_id]


def generate_corpus(spec: TaskSpec, n: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """``n`` unique (prompt, answer) pairs, deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > spec.space:
        raise ValueError(f"task {spec.task_id} has only {spec.space} distinct prompts, asked for {n}")
    rng = np.random.default_rng(seed)
    seen, out = set(), []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 10_000:
            raise ValueError(f"task {spec.task_id}: could only draw {len(out)} distinct prompts")
        prompt = spec.sample(rng)
        key = tuple(prompt)
        if key in seen:
            continue
        seen.add(key)
        out.append((prompt, spec.answer(prompt)))
    return out


def encode_pair(vocab: Vocabulary, prompt: Sequence[str], answer: Sequence[str], n: int):
    """Token ids for the prompt and the EOS-padded length-``n`` answer."""
    if len(answer) >= n:
        raise ValueError(f"answer of length {len(answer)} does not fit response length {n} with EOS")
    ans = vocab.encode(list(answer)) + [vocab.eos_id] * (n - len(answer))
    return vocab.encode(list(prompt)), ans


@dataclass(frozen=True)
class EvalResult:
    task_id: str
    rate: float
    samples: int
    matches: int
    version_tag: str
    schedule: str


def evaluate(params: DenoiserParams, spec: TaskSpec, schedule: DecodeSchedule, n: int, seed: int,
             rng: np.random.Generator | None = None) -> EvalResult:
    corpus = generate_corpus(spec, n, seed)
    vocab = params.vocab
    prompts = [vocab.encode(p) for p, _ in corpus]
    trajs = decode_batch(params, prompts, schedule, rng=rng)
    matches = 0
    for (prompt, _), traj in zip(corpus, trajs):
        candidate = [vocab.symbols[i] for i in traj.answer]
        matches += bool(spec.check(prompt, candidate))
    per = set(schedule.batch_sizes)
    label = f"per_step={per.pop()}" if len(per) == 1 else "custom"
    return EvalResult(spec.task_id, matches / n, n, matches, params.version_tag, label)
