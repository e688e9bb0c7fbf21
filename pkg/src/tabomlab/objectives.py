"""Training objectives: uniform-mask NELBO, trajectory windows, pairwise ranking, TABOM."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoding import DecodeEvent, Trajectory, truncate_at_eos
from .model import DenoiserParams, forward
from .optim import AdamW, OptimConfig

OBJECTIVES = ("sft-gt", "sft-sd", "traj-mask", "dinfer", "tabom")
TELEMETRY_FIELDS = ("step", "objective", "loss", "reconstruction", "ranking", "violated_fraction")


@dataclass(frozen=True)
class TabomConfig:
    window: int = 4
    margin: float = 0.2
    weight: float = 1.0
    context_mode: str = "exact"
    window_mode: str = "local"

    def __post_init__(self):
        if self.context_mode not in ("exact", "shared"):
            raise ValueError(f"context_mode must be exact or shared, got {self.context_mode!r}")
        if self.window_mode not in ("local", "global"):
            raise ValueError(f"window_mode must be local or global, got {self.window_mode!r}")
        if self.weight < 0:
            raise ValueError("ranking weight must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.weight > 0 and self.window < 2:
            raise ValueError("window must be >= 2 when the ranking weight is positive")


@dataclass
class WindowSegment:
    """A slice of one trajectory: context ``U_t``, the next decoded positions, and ordered pairs.

    ``delta`` lists positions in decode order, so ``pairs`` holds index pairs
    ``(i, j)`` into ``delta`` with ``i`` decoded before ``j``.
    """

    traj: Trajectory
    context: frozenset[int]
    delta: list[int]
    delta_contexts: list[frozenset[int]]
    pairs: list[tuple[int, int]] = field(default_factory=list)
    t: int = 0
    t_prime: int = 0

    @property
    def width(self) -> int:
        return len(self.delta)


def _eligible_order(traj: Trajectory, eos_id: int) -> tuple[list[DecodeEvent], list[int]]:
    """Events in decode order plus the indices of those inside the pre-EOS region."""
    eff, _ = truncate_at_eos(traj.answer, eos_id)
    events = list(traj.events)
    keep = [i for i, ev in enumerate(events) if ev.position < eff]
    return events, keep


def _segment(traj: Trajectory, events: list[DecodeEvent], keep: list[int], start: int, stop: int) -> WindowSegment:
    chosen = [events[keep[j]] for j in range(start, stop)]
    first = keep[start]
    context = frozenset(ev.position for ev in events[:first])
    contexts = [frozenset(e.position for e in events if e.step > ev.step) for ev in chosen]
    pairs = [(i, j) for i in range(len(chosen)) for j in range(i + 1, len(chosen))]
    last = chosen[-1].step
    return WindowSegment(traj, context, [ev.position for ev in chosen], contexts, pairs,
                         t=chosen[0].step, t_prime=last - 1)


def sample_window(traj: Trajectory, W: int, rng: np.random.Generator, eos_id: int,
                  mode: str = "local") -> WindowSegment | None:
    """Pick a random event boundary; returns None when the trajectory is too short.

    ``local`` takes the next ``W`` decoded positions after the boundary;
    ``global`` takes every remaining position up to the effective end.
    Events are totally ordered by (step desc, tie rank), so pairs cover all
    ``W(W-1)/2`` ordered index pairs of the window.
    """
    events, keep = _eligible_order(traj, eos_id)
    E = len(keep)
    if mode == "local":
        if W < 1 or E < W:
            return None
        start = int(rng.integers(0, E - W + 1))
        return _segment(traj, events, keep, start, start + W)
    if mode == "global":
        if E < 2:
            return None
        start = int(rng.integers(0, E - 1))
        return _segment(traj, events, keep, start, E)
    raise ValueError(f"unknown window mode {mode!r}")


def window_at(traj: Trajectory, start: int, stop: int, eos_id: int) -> WindowSegment:
    """Deterministic segment over eligible events ``start:stop`` (for tests and tools)."""
    events, keep = _eligible_order(traj, eos_id)
    if not 0 <= start < stop <= len(keep):
        raise ValueError(f"window {start}:{stop} outside {len(keep)} eligible events")
    return _segment(traj, events, keep, start, stop)


def sample_transition(traj: Trajectory, rng: np.random.Generator, eos_id: int) -> WindowSegment | None:
    """Two distinct event boundaries drawn uniformly; the span between them is the target."""
    events, keep = _eligible_order(traj, eos_id)
    E = len(keep)
    if E < 2:
        return None
    a, b = sorted(rng.choice(E + 1, size=2, replace=False).tolist())
    seg = _segment(traj, events, keep, a, b)
    seg.pairs = []
    return seg


# ---------------------------------------------------------------- arithmetic core


def hinge_terms(h: Tensor, pairs: Sequence[tuple[int, int]], margin: float) -> Tensor:
    """``max(0, h[r] - h[s] + margin)`` for each ordered pair (r easier than s)."""
    r = np.array([p[0] for p in pairs], dtype=np.int64)
    s = np.array([p[1] for p in pairs], dtype=np.int64)
    return ad.maximum(ad.index(h, r) - ad.index(h, s) + margin, 0.0)


def ranking_from_entropies(h: Tensor, pairs: Sequence[tuple[int, int]], margin: float) -> Tensor:
    if not pairs:
        raise ValueError("ranking needs at least one ordered pair")
    return ad.mean(hinge_terms(h, pairs, margin))


def window_objective(nll: Tensor, h: Tensor | None, pairs, weight: float, margin: float):
    """``mean(nll) + weight * mean_pairs(hinge)``; returns (total, recon, rank)."""
    recon = ad.mean(nll)
    if weight == 0 or h is None or not pairs:
        return recon, recon, None
    rank = ranking_from_entropies(h, pairs, margin)
    return recon + ad.scale(rank, weight), recon, rank


# ---------------------------------------------------------------- model-backed losses


def _state(x0: Sequence[int], context, n: int, mask_id: int) -> np.ndarray:
    row = np.full(n, mask_id, dtype=np.int64)
    idx = np.fromiter(context, dtype=np.int64, count=len(context))
    row[idx] = np.asarray(x0, dtype=np.int64)[idx]
    return row


def nelbo_loss(params: DenoiserParams, prompts: Sequence[Sequence[int]], answers: Sequence[Sequence[int]],
               rng: np.random.Generator) -> Tensor:
    """Uniform-mask reconstruction averaged over masked positions, then over the batch.

    Each sequence draws a mask probability from U(0, 1) and masks positions
    independently; draws with nothing masked are repeated.
    """
    if not len(answers) or any(len(a) == 0 for a in answers):
        raise ValueError("answers must be non-empty")
    mask_id = params.vocab.mask_id
    x0 = np.asarray(answers, dtype=np.int64)
    B, n = x0.shape
    masks = np.zeros((B, n), dtype=bool)
    for i in range(B):
        while not masks[i].any():
            masks[i] = rng.random(n) < rng.random()
    states = np.where(masks, mask_id, x0)
    logp = ad.log_softmax(forward(params, prompts, states))
    bi, pi = np.nonzero(masks)
    picked = ad.index(logp, (bi, pi, x0[bi, pi]))
    weights = 1.0 / (masks.sum(axis=1)[bi] * B)
    return ad.neg(ad.sum(ad.mul(picked, weights)))


@dataclass
class LossParts:
    total: Tensor
    reconstruction: float
    ranking: float
    violated: float
    pairs: int


def segment_losses(params: DenoiserParams, segments: Sequence[WindowSegment], cfg: TabomConfig,
                   with_ranking: bool | None = None) -> LossParts:
    """Batched TABOM objective over window segments.

    Reconstruction predicts every ``delta`` position from context ``U_t``.
    Ranking entropies use each position's own decode-time context in
    ``exact`` mode and the shared ``U_t`` context in ``shared`` mode.
    """
    if not segments:
        raise ValueError("no segments")
    if with_ranking is None:
        with_ranking = cfg.weight > 0
    vocab = params.vocab
    n = len(segments[0].traj.answer)
    keys: dict[tuple[int, frozenset], int] = {}
    prompts, states = [], []

    def state_id(i, ctx):
        key = (i, ctx)
        if key not in keys:
            keys[key] = len(states)
            prompts.append(segments[i].traj.prompt)
            states.append(_state(segments[i].traj.answer, ctx, n, vocab.mask_id))
        return keys[key]

    rec_s, rec_p, rec_t, rec_w = [], [], [], []
    ent_s, ent_p = [], []
    seg_h: list[tuple[int, int]] = []
    B = len(segments)
    for i, seg in enumerate(segments):
        if with_ranking and len(seg.delta) < 2:
            raise ValueError("ranking needs a window of at least 2 positions")
        sid = state_id(i, seg.context)
        for r in seg.delta:
            rec_s.append(sid)
            rec_p.append(r)
            rec_t.append(seg.traj.answer[r])
            rec_w.append(1.0 / (len(seg.delta) * B))
        if with_ranking:
            start = len(ent_s)
            for r, ctx in zip(seg.delta, seg.delta_contexts):
                ent_s.append(state_id(i, ctx) if cfg.context_mode == "exact" else sid)
                ent_p.append(r)
            seg_h.append((start, len(ent_s)))

    logits = forward(params, prompts, np.stack(states))
    logp = ad.log_softmax(logits)
    picked = ad.index(logp, (np.array(rec_s), np.array(rec_p), np.array(rec_t)))
    recon = ad.neg(ad.sum(ad.mul(picked, np.array(rec_w))))
    if not with_ranking:
        return LossParts(recon, recon.item(), 0.0, 0.0, 0)

    rows = ad.index(logits, (np.array(ent_s), np.array(ent_p)))
    h = ad.entropy(rows)
    r_idx, s_idx, w = [], [], []
    for (start, _), seg in zip(seg_h, segments):
        for a, b in seg.pairs:
            r_idx.append(start + a)
            s_idx.append(start + b)
            w.append(1.0 / (len(seg.pairs) * B))
    diff = ad.index(h, np.array(r_idx)) - ad.index(h, np.array(s_idx)) + cfg.margin
    hinge = ad.maximum(diff, 0.0)
    rank = ad.sum(ad.mul(hinge, np.array(w)))
    total = recon + ad.scale(rank, cfg.weight)
    return LossParts(total, recon.item(), rank.item(), float((diff.data > 0).mean()), len(r_idx))


def _context_logits(params: DenoiserParams, segment: WindowSegment, context_mode: str):
    """Logits rows for each ``delta`` position under its ranking context."""
    n = len(segment.traj.answer)
    ctxs = segment.delta_contexts if context_mode == "exact" else [segment.context] * segment.width
    uniq: dict[frozenset, int] = {}
    for c in ctxs:
        uniq.setdefault(c, len(uniq))
    states = np.stack([_state(segment.traj.answer, c, n, params.vocab.mask_id) for c in uniq])
    logits = forward(params, [segment.traj.prompt] * len(uniq), states)
    return ad.index(logits, (np.array([uniq[c] for c in ctxs]), np.array(segment.delta)))


def segment_entropies(params: DenoiserParams, segment: WindowSegment, context_mode: str = "exact") -> np.ndarray:
    """Model entropies ``h`` for each position of ``segment.delta`` (no gradient)."""
    with ad.no_grad():
        return ad.entropy(_context_logits(params, segment, context_mode)).data


def ranking_loss(params: DenoiserParams, segment: WindowSegment, cfg: TabomConfig) -> Tensor:
    """Mean pairwise hinge over one segment (differentiable in params)."""
    if segment.width < 2:
        raise ValueError("ranking needs W >= 2")
    h = ad.entropy(_context_logits(params, segment, cfg.context_mode))
    return ranking_from_entropies(h, segment.pairs, cfg.margin)


def tabom_loss(params: DenoiserParams, segment: WindowSegment, cfg: TabomConfig) -> Tensor:
    return segment_losses(params, [segment], cfg).total


def dinfer_loss(params: DenoiserParams, traj: Trajectory, rng: np.random.Generator) -> Tensor:
    seg = sample_transition(traj, rng, params.vocab.eos_id)
    if seg is None:
        raise ValueError("trajectory needs an effective length of at least 2")
    return segment_losses(params, [seg], TabomConfig(weight=0.0), with_ranking=False).total


def ranking_probe(seed: int, n: int = 16, steps: int = 500, lr: float = 3e-3, margin: float = 0.2,
                  context_mode: str = "shared") -> dict:
    """Train a fresh model on the ranking term alone for one fixed ``n``-token window.

    The trajectory decodes a random permutation of positions one per step.
    The window covers all ``n`` events and never changes, so this isolates
    how well the hinge surrogate can impose a step ordering on entropies.
    Returns Kendall tau between entropies and decode order before and after
    training, and the first step at which it reached 0.9 (or None).
    """
    from .model import DenoiserConfig, init_params
    from .tasks import default_vocab

    vocab = default_vocab()
    rng = np.random.default_rng(seed)
    cfg = DenoiserConfig(layers=1, heads=2, model_dim=32, ffn_dim=32, max_prompt_len=4, max_response_len=n,
                         seed=seed)
    params = init_params(cfg, vocab)
    digits = [vocab.encode([str(d)])[0] for d in range(10)]
    answer = tuple(int(x) for x in rng.choice(digits, size=n))
    order = rng.permutation(n)
    events = [DecodeEvent(int(r), answer[r], n - k, 0.0, 0) for k, r in enumerate(order)]
    traj = Trajectory(tuple(int(x) for x in rng.choice(digits, size=3)), answer, events, "probe", True, "probe")
    seg = window_at(traj, 0, n, vocab.eos_id)
    tcfg = TabomConfig(window=n, margin=margin, weight=1.0, context_mode=context_mode)
    rank = list(range(n))

    def tau():
        return kendall_tau(segment_entropies(params, seg, context_mode), rank)

    opt = AdamW(params.parameters(), OptimConfig(lr=lr, warmup=10, weight_decay=0.0), steps)
    start, reached = tau(), None
    for step in range(steps):
        opt.zero_grad()
        ad.backward(ranking_loss(params, seg, tcfg))
        opt.step()
        if reached is None and (step + 1) % 10 == 0 and tau() >= 0.9:
            reached = step + 1
    return {"seed": seed, "tau_init": start, "tau_final": tau(), "reached_at": reached}


# ---------------------------------------------------------------- training loop


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Tau-a by explicit pair counting (ties contribute zero)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two items")
    s = 0.0
    for i in range(n):
        s += float(np.sum(np.sign(x[i + 1:] - x[i]) * np.sign(y[i + 1:] - y[i])))
    return s / (n * (n - 1) / 2)


@dataclass
class FinetuneResult:
    params: DenoiserParams
    telemetry: list[dict]
    steps: int
    skipped: int


def _batches(items: list, batch_size: int) -> list[list]:
    return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]


def finetune(params: DenoiserParams, corpus: Sequence, objective: str, optim: OptimConfig,
             tabom: TabomConfig | None = None, seed: int = 0,
             on_step: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Minibatch training with one of the supported objectives.

    ``corpus`` holds ``(prompt_ids, answer_ids)`` pairs for ``sft-gt`` and
    :class:`Trajectory` objects otherwise. ``traj-mask`` is the TABOM
    reconstruction term alone and shares its code path with ``tabom`` at
    zero ranking weight, so the two produce identical parameter updates.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; choose from {', '.join(OBJECTIVES)}")
    tabom = tabom or TabomConfig()
    if objective == "traj-mask":
        tabom = TabomConfig(tabom.window, tabom.margin, 0.0, tabom.context_mode, tabom.window_mode)
    eos = params.vocab.eos_id
    rng = np.random.default_rng(seed)
    model = params.copy()
    tensors = model.parameters()

    if objective == "sft-gt":
        items = [(list(p), list(a)) for p, a in corpus]
    elif objective == "sft-sd":
        items = [(list(t.prompt), list(t.answer)) for t in corpus]
    else:
        items = list(corpus)
        if objective == "dinfer":
            usable = [t for t in items if len(_eligible_order(t, eos)[1]) >= 2]
        elif tabom.window_mode == "local":
            usable = [t for t in items if len(_eligible_order(t, eos)[1]) >= tabom.window]
        else:
            usable = [t for t in items if len(_eligible_order(t, eos)[1]) >= 2]
        skipped = len(items) - len(usable)
        items = usable
    if not items:
        raise ValueError(f"corpus has no usable items for objective {objective}")
    skipped = 0 if objective in ("sft-gt", "sft-sd") else skipped

    per_epoch = math.ceil(len(items) / optim.batch_size)
    opt = AdamW(tensors, optim, per_epoch * optim.epochs)
    telemetry: list[dict] = []
    step = 0
    for epoch in range(optim.epochs):
        order = rng.permutation(len(items))
        for bidx, batch in enumerate(_batches([items[i] for i in order], optim.batch_size)):
            opt.zero_grad()
            if objective in ("sft-gt", "sft-sd"):
                loss = nelbo_loss(model, [p for p, _ in batch], [a for _, a in batch], rng)
                row = {"loss": loss.item(), "reconstruction": loss.item(), "ranking": 0.0, "violated_fraction": 0.0}
            else:
                if objective == "dinfer":
                    segs = [sample_transition(t, rng, eos) for t in batch]
                    parts = segment_losses(model, segs, tabom, with_ranking=False)
                else:
                    segs = [sample_window(t, tabom.window, rng, eos, tabom.window_mode) for t in batch]
                    parts = segment_losses(model, segs, tabom)
                loss = parts.total
                row = {"loss": loss.item(), "reconstruction": parts.reconstruction,
                       "ranking": parts.ranking, "violated_fraction": parts.violated}
            if not math.isfinite(row["loss"]):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} batch {bidx}")
            ad.backward(loss)
            opt.step()
            row = {"step": step, "objective": objective, **row}
            telemetry.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
    model.version_tag = f"ft-{model.digest()}"
    return FinetuneResult(model, telemetry, step, skipped)


def write_telemetry(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TELEMETRY_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
