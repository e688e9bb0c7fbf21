"""Trajectory discrimination score and the cross-entropy vs mask-ratio comparison."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .decoding import DecodeSchedule, decode_batch
from .model import DenoiserParams, forward

VARIANCE_CONVENTION = "population variance (divide by count)"


@dataclass
class TdsReport:
    series: list[tuple[int, float]]
    aggregate: float
    trajectories: int
    task_id: str = ""
    version_tag: str = ""
    convention: str = VARIANCE_CONVENTION
    contributing: dict[int, int] = field(default_factory=dict)


def step_variance(ent: np.ndarray, tokens: np.ndarray, masked: np.ndarray, eos_id: int) -> float | None:
    """Population variance of entropies over eligible masked positions of one sequence.

    Positions after the first committed EOS are excluded; returns None when
    fewer than two positions remain.
    """
    eligible = masked.copy()
    hits = np.flatnonzero(tokens == eos_id)
    if hits.size:
        eligible[hits[0] + 1:] = False
    vals = ent[eligible]
    if vals.size < 2:
        return None
    return float(np.mean((vals - vals.mean()) ** 2))


def tds(params: DenoiserParams, prompts: Sequence[Sequence[int]], schedule: DecodeSchedule,
        sample_count: int, rng: np.random.Generator | None = None, task_id: str = "") -> TdsReport:
    """Decode ``sample_count`` trajectories (cycling through ``prompts``) and average step variances.

    Each step's value divides by the total trajectory count, so a trajectory
    with fewer than two eligible positions adds zero at that step. The
    aggregate averages over steps where at least one trajectory contributed.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    if not prompts:
        raise ValueError("no prompts")
    chosen = [list(prompts[i % len(prompts)]) for i in range(sample_count)]
    eos = params.vocab.eos_id
    sums: dict[int, float] = defaultdict(float)
    counts: dict[int, int] = defaultdict(int)

    def hook(t, tokens, masked, ent):
        for k in range(tokens.shape[0]):
            v = step_variance(ent[k], tokens[k], masked[k], eos)
            if v is not None:
                sums[t] += v
                counts[t] += 1

    decode_batch(params, chosen, schedule, rng=rng, on_step=hook)
    steps = sorted(range(1, schedule.steps + 1), reverse=True)
    series = [(t, sums[t] / sample_count) for t in steps]
    live = [v for t, v in series if counts[t] > 0]
    agg = float(np.mean(live)) if live else 0.0
    return TdsReport(series, agg, sample_count, task_id, params.version_tag, contributing=dict(counts))


@dataclass
class MaskRatioCurve:
    ratios: list[float]
    ce_gt: list[float]
    ce_sd: list[float]


def masked_ce(params: DenoiserParams, prompts, answers, masks: np.ndarray) -> float:
    """Mean per-token cross-entropy over all masked positions (no gradient)."""
    x0 = np.asarray(answers, dtype=np.int64)
    states = np.where(masks, params.vocab.mask_id, x0)
    with ad.no_grad():
        logp = ad.log_softmax(forward(params, prompts, states)).data
    bi, pi = np.nonzero(masks)
    return float(-logp[bi, pi, x0[bi, pi]].mean())


def ce_vs_mask_ratio(params: DenoiserParams, gt: Sequence[tuple], sd: Sequence[tuple],
                     ratios: Sequence[float], seed: int = 0) -> MaskRatioCurve:
    """Per ratio, mask the same positions in GT and SD answers and compare CE.

    ``gt`` and ``sd`` are aligned ``(prompt_ids, answer_ids)`` lists over the
    same prompts. Each answer gets ``max(1, round(ratio * n))`` masked
    positions drawn uniformly with a per-ratio seed.
    """
    if not gt or not sd:
        raise ValueError("empty corpus")
    if len(gt) != len(sd) or any(list(a[0]) != list(b[0]) for a, b in zip(gt, sd)):
        raise ValueError("GT and SD corpora must share prompts in the same order")
    prompts = [list(p) for p, _ in gt]
    n = len(gt[0][1])
    ce_gt, ce_sd = [], []
    for i, rho in enumerate(ratios):
        if not 0 < rho < 1:
            raise ValueError(f"ratio {rho} outside (0, 1)")
        rng = np.random.default_rng([seed, i])
        k = max(1, int(round(rho * n)))
        masks = np.zeros((len(prompts), n), dtype=bool)
        for row in masks:
            row[rng.choice(n, size=k, replace=False)] = True
        ce_gt.append(masked_ce(params, prompts, [a for _, a in gt], masks))
        ce_sd.append(masked_ce(params, prompts, [a for _, a in sd], masks))
    return MaskRatioCurve(list(ratios), ce_gt, ce_sd)
