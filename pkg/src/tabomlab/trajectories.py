"""Self-distilled trajectory corpora: generation from a frozen base and JSONL persistence."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .decoding import DecodeEvent, DecodeSchedule, Trajectory, decode_batch
from .model import DenoiserParams
from .tasks import TaskSpec

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    """A corpus line failed to parse; carries the 1-based line number."""

    def __init__(self, path, line: int, field: str, reason: str, records: list | None = None):
        super().__init__(f"{path}:{line}: field {field!r}: {reason}")
        self.line = line
        self.field = field
        self.records = records or []


@dataclass(frozen=True)
class DistillConfig:
    max_new_tokens: int
    schedule: DecodeSchedule
    keep_invalid: bool = False
    batch_size: int = 256

    def __post_init__(self):
        if self.schedule.length != self.max_new_tokens:
            raise ValueError("schedule length must equal max_new_tokens")


@dataclass
class DistillSummary:
    generated: int
    valid: int

    @property
    def yield_ratio(self) -> float:
        return self.valid / self.generated if self.generated else 0.0


def distill(base: DenoiserParams, prompts: Sequence[Sequence[str]], task: TaskSpec, cfg: DistillConfig,
            rng: np.random.Generator | None = None) -> tuple[list[Trajectory], DistillSummary]:
    """Decode every prompt with the frozen base and mark answers that pass the checker."""
    if cfg.max_new_tokens > base.config.max_response_len:
        raise ValueError("max_new_tokens exceeds the model's response length")
    vocab = base.vocab
    out: list[Trajectory] = []
    valid = 0
    for start in range(0, len(prompts), cfg.batch_size):
        chunk = prompts[start:start + cfg.batch_size]
        trajs = decode_batch(base, [vocab.encode(p) for p in chunk], cfg.schedule, rng=rng)
        for prompt, traj in zip(chunk, trajs):
            try:
                ok = bool(task.check(prompt, [vocab.symbols[i] for i in traj.answer]))
            except Exception:  # malformed output never aborts the run
                ok = False
            traj.valid = ok
            traj.task_id = task.task_id
            valid += ok
            if ok or cfg.keep_invalid:
                out.append(traj)
    summary = DistillSummary(len(prompts), valid)
    log.info("distilled %s: %d/%d valid (yield %.3f)", task.task_id, valid, len(prompts), summary.yield_ratio)
    return out, summary


def to_record(traj: Trajectory) -> dict:
    return {
        "task_id": traj.task_id,
        "prompt": list(traj.prompt),
        "answer": list(traj.answer),
        "generator_tag": traj.generator_tag,
        "valid": traj.valid,
        "events": [[e.position, e.token, e.step, e.entropy, e.tie_rank] for e in traj.events],
    }


def from_record(rec: dict) -> Trajectory:
    events = []
    for e in rec["events"]:
        if len(e) != 5:
            raise KeyError("events")
        events.append(DecodeEvent(int(e[0]), int(e[1]), int(e[2]), float(e[3]), int(e[4])))
    return Trajectory(tuple(int(x) for x in rec["prompt"]), tuple(int(x) for x in rec["answer"]),
                      events, str(rec["generator_tag"]), bool(rec["valid"]), str(rec["task_id"]))


def save_corpus(corpus: Iterable[Trajectory], path) -> None:
    """One JSON object per line; floats use Python's shortest exact repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for traj in corpus:
            fh.write(json.dumps(to_record(traj), sort_keys=True) + "\n")


_FIELDS = ("task_id", "prompt", "answer", "generator_tag", "valid", "events")


def load_corpus(path, max_entropy: float | None = None) -> list[Trajectory]:
    """Parse and validate a corpus; raises :class:`CorpusError` naming the bad line.

    Records read before the bad line are attached to the error as ``records``.
    """
    out: list[Trajectory] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(path, lineno, "<json>", str(exc), out) from None
            for f in _FIELDS:
                if f not in rec:
                    raise CorpusError(path, lineno, f, "missing", out)
            try:
                traj = from_record(rec)
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(path, lineno, "events", f"malformed ({exc})", out) from None
            try:
                traj.validate(max_entropy)
            except ValueError as exc:
                raise CorpusError(path, lineno, "events", str(exc), out) from None
            out.append(traj)
    return out


def pairs_to_trajectories(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], task_id: str) -> list[Trajectory]:
    """Ground-truth corpora share the container, with empty event lists."""
    return [Trajectory(tuple(p), tuple(a), [], "ground-truth", True, task_id) for p, a in pairs]
