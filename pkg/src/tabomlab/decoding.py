"""Entropy-guided reverse decoding with trajectory recording."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import DenoiserParams, entropies, predict_batch


@dataclass
class MaskedState:
    tokens: np.ndarray
    mask_id: int
    timestep: int

    @property
    def unmasked(self) -> set[int]:
        return set(np.flatnonzero(self.tokens != self.mask_id).tolist())

    @property
    def masked(self) -> set[int]:
        return set(np.flatnonzero(self.tokens == self.mask_id).tolist())

    @classmethod
    def fully_masked(cls, n: int, mask_id: int, timestep: int) -> "MaskedState":
        return cls(np.full(n, mask_id, dtype=np.int64), mask_id, timestep)


@dataclass(frozen=True)
class DecodeSchedule:
    """Per-step unmask counts plus sampling knobs (temperature 0 means argmax)."""

    batch_sizes: tuple[int, ...]
    temperature: float = 0.0
    top_p: float = 1.0

    def __post_init__(self):
        if any(b < 1 for b in self.batch_sizes):
            raise ValueError("every per-step batch size must be positive")
        if self.temperature < 0 or not (0 < self.top_p <= 1):
            raise ValueError("temperature must be >= 0 and top_p in (0, 1]")

    @classmethod
    def uniform(cls, n: int, per_step: int = 1, temperature: float = 0.0, top_p: float = 1.0):
        sizes = [per_step] * (n // per_step)
        if n % per_step:
            sizes.append(n % per_step)
        return cls(tuple(sizes), temperature, top_p)

    @property
    def length(self) -> int:
        return sum(self.batch_sizes)

    @property
    def steps(self) -> int:
        return len(self.batch_sizes)


@dataclass(frozen=True)
class DecodeEvent:
    position: int
    token: int
    step: int
    entropy: float
    tie_rank: int


@dataclass
class Trajectory:
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    events: list[DecodeEvent]
    generator_tag: str = ""
    valid: bool = False
    task_id: str = ""

    def validate(self, max_entropy: float | None = None) -> None:
        """Raise ``ValueError`` if coverage, step order or tie ranks are inconsistent."""
        seen = set()
        prev = None
        for ev in self.events:
            if ev.position in seen:
                raise ValueError(f"position {ev.position} decoded twice")
            if not 0 <= ev.position < len(self.answer):
                raise ValueError(f"position {ev.position} outside answer of length {len(self.answer)}")
            if self.answer[ev.position] != ev.token:
                raise ValueError(f"event token at {ev.position} disagrees with answer")
            seen.add(ev.position)
            if ev.entropy < -1e-12 or (max_entropy is not None and ev.entropy > max_entropy + 1e-9):
                raise ValueError(f"entropy {ev.entropy} out of range")
            if prev is not None:
                if ev.step > prev.step:
                    raise ValueError("steps must be non-increasing along the event list")
                if ev.step == prev.step:
                    if ev.tie_rank != prev.tie_rank + 1:
                        raise ValueError("tie ranks must count up within a step")
                    if ev.entropy < prev.entropy:
                        raise ValueError("within a step events must ascend in entropy")
                elif ev.tie_rank != 0:
                    raise ValueError("first event of a step must have tie rank 0")
            elif ev.tie_rank != 0:
                raise ValueError("first event must have tie rank 0")
            prev = ev


def select_unmask(entropies_: Mapping[int, float] | Sequence[float], masked, b: int) -> list[int]:
    """The ``b`` masked positions of lowest entropy, ordered by (entropy, position).

    ``entropies_`` is either a position -> entropy mapping or a full-length
    array indexed by position. Since the selection objective is a sum of
    per-position terms, the bottom-b set is the exact subset minimizer.
    """
    masked = sorted(masked)
    if b > len(masked):
        raise ValueError(f"cannot unmask {b} of {len(masked)} masked positions")
    if b < 0:
        raise ValueError("b must be non-negative")
    keyed = sorted(masked, key=lambda r: (float(entropies_[r]), r))
    return keyed[:b]


def _transform(row: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    if temperature != 1.0:
        logp = np.log(np.maximum(row, 1e-300)) / temperature
        logp -= logp.max()
        row = np.exp(logp)
        row /= row.sum()
    if top_p < 1.0:
        order = np.argsort(-row, kind="stable")
        csum = np.cumsum(row[order])
        keep = order[: int(np.searchsorted(csum, top_p) + 1)]
        trimmed = np.zeros_like(row)
        trimmed[keep] = row[keep]
        row = trimmed / trimmed.sum()
    return row


def _commit(row: np.ndarray, schedule: DecodeSchedule, rng) -> int:
    if schedule.temperature == 0:
        return int(np.argmax(row))
    if rng is None:
        raise ValueError("sampling with temperature > 0 needs an rng")
    row = _transform(row, schedule.temperature, schedule.top_p)
    return int(rng.choice(len(row), p=row))


StepHook = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def decode_batch(params: DenoiserParams, prompts: Sequence[Sequence[int]], schedule: DecodeSchedule,
                 rng: np.random.Generator | None = None, on_step: StepHook | None = None,
                 generator_tag: str | None = None) -> list[Trajectory]:
    """Decode every prompt in lockstep; returns one trajectory per prompt.

    ``on_step(t, tokens, masked, ent)`` sees the batch state before step ``t``
    commits anything, with raw-model entropies for every position.
    """
    n = schedule.length
    if n > params.config.max_response_len:
        raise ValueError(f"schedule covers {n} positions but max_response_len is {params.config.max_response_len}")
    mask_id = params.vocab.mask_id
    B = len(prompts)
    tokens = np.full((B, n), mask_id, dtype=np.int64)
    events: list[list[DecodeEvent]] = [[] for _ in range(B)]
    T = schedule.steps
    for i, b in enumerate(schedule.batch_sizes):
        t = T - i
        probs = predict_batch(params, prompts, tokens)
        ent = entropies(probs)
        masked = tokens == mask_id
        if on_step is not None:
            on_step(t, tokens.copy(), masked.copy(), ent)
        for k in range(B):
            chosen = select_unmask(ent[k], np.flatnonzero(masked[k]), b)
            for rank, r in enumerate(chosen):
                tok = _commit(probs[k, r], schedule, rng)
                tokens[k, r] = tok
                events[k].append(DecodeEvent(int(r), tok, t, float(ent[k, r]), rank))
    tag = generator_tag if generator_tag is not None else params.version_tag
    return [Trajectory(tuple(int(x) for x in prompts[k]), tuple(int(x) for x in tokens[k]), events[k], tag)
            for k in range(B)]


def decode(params: DenoiserParams, prompt: Sequence[int], schedule: DecodeSchedule,
           record: bool = True, rng: np.random.Generator | None = None):
    """Decode one prompt; returns ``(x0, trajectory)`` (trajectory is None if not recorded)."""
    traj = decode_batch(params, [prompt], schedule, rng=rng)[0]
    return np.asarray(traj.answer), (traj if record else None)


def truncate_at_eos(x0: Sequence[int], eos_id: int):
    """Effective length and eligible-position mask.

    The first EOS itself stays eligible; everything strictly after it is
    dropped. Without an EOS the whole sequence is eligible.
    """
    x0 = np.asarray(x0)
    hits = np.flatnonzero(x0 == eos_id)
    eff = int(hits[0]) + 1 if hits.size else len(x0)
    return eff, np.arange(len(x0)) < eff


def max_entropy(params: DenoiserParams) -> float:
    return math.log(params.vocab.base_size)
