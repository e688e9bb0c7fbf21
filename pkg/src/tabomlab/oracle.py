"""Exact enumeration of the Boltzmann distribution over unmasked subsets.

Subsets of ``{0..n-1}`` are encoded as bitmasks; a state's unnormalized
log-weight is ``-beta * sum(H[r] for r in U)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_N = 20


@dataclass(frozen=True)
class EntropyLandscape:
    H: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        object.__setattr__(self, "H", H)
        if H.ndim != 1:
            raise ValueError("entropies must be a vector")
        if len(H) > MAX_N:
            raise ValueError(f"n={len(H)} exceeds the enumeration cap of {MAX_N} (2^{MAX_N} states)")
        if np.any(H < 0):
            raise ValueError("entropies must be non-negative")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    @property
    def n(self) -> int:
        return len(self.H)


@dataclass(frozen=True)
class StateDistribution:
    probs: np.ndarray
    log_probs: np.ndarray
    log_z: float
    n: int

    @property
    def z(self) -> float:
        return math.exp(self.log_z)

    def prob(self, subset) -> float:
        return float(self.probs[subset_mask(subset)])


def subset_mask(subset) -> int:
    m = 0
    for r in subset:
        m |= 1 << int(r)
    return m


def membership(n: int) -> np.ndarray:
    """``[2^n, n]`` 0/1 matrix; row ``m`` lists the members of bitmask ``m``."""
    masks = np.arange(1 << n, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(np.float64)


def scores(land: EntropyLandscape) -> np.ndarray:
    """Energy score ``S(U) = -beta * sum_{r in U} H_r`` for every subset."""
    return -land.beta * (membership(land.n) @ land.H)


def boltzmann_exact(land: EntropyLandscape) -> StateDistribution:
    s = scores(land)
    top = s.max()
    log_z = float(top + np.log(np.exp(s - top).sum()))
    logp = s - log_z
    return StateDistribution(np.exp(logp), logp, log_z, land.n)


def kl_exact(target: StateDistribution, model: EntropyLandscape) -> float:
    """``KL(target || p_model)`` with ``p_model`` enumerated over the model entropies."""
    if model.n != target.n:
        raise ValueError(f"dimension mismatch: target n={target.n}, model n={model.n}")
    p = boltzmann_exact(model)
    return float(np.sum(target.probs * (target.log_probs - p.log_probs)))


def kl_divergence_uniform_gap(land: EntropyLandscape) -> float:
    """``KL(q* || uniform over all 2^n subsets)``."""
    q = boltzmann_exact(land)
    return float(np.sum(q.probs * q.log_probs) + land.n * math.log(2.0))


def uniform_gap_equal_entropies(n: int, h: float, beta: float) -> float:
    """Closed form of the uniform gap when all entropies equal ``h``.

    ``q(U)`` depends only on ``k = |U|``: ``w_k = exp(-beta h k) / (1 + exp(-beta h))^n``.
    """
    log_z = n * math.log1p(math.exp(-beta * h))
    ent = 0.0
    for k in range(n + 1):
        logw = -beta * h * k - log_z
        ent -= math.comb(n, k) * math.exp(logw) * logw
    return n * math.log(2.0) - ent


def verify_ranking_lemma(land: EntropyLandscape, pairs: int = 1000, seed: int = 0) -> dict:
    """Check that ordering by probability equals ordering by energy score.

    Draws random subset pairs ``(U_a, U_b)`` and compares
    ``q(U_b) > q(U_a)`` with ``S(U_b) > S(U_a)``; then checks the
    single-token reduction on ``base | {r}`` vs ``base | {s}`` pairs, where the
    state holding the lower-entropy token must be the more probable one.
    """
    rng = np.random.default_rng(seed)
    q = boltzmann_exact(land)
    s = scores(land)
    N = 1 << land.n
    a = rng.integers(0, N, size=pairs)
    b = rng.integers(0, N, size=pairs)
    order_agree = int(np.sum((q.probs[b] > q.probs[a]) == (s[b] > s[a])))
    # strict inequalities: equal-score pairs must also be equal-probability
    tie_agree = int(np.sum((q.probs[b] == q.probs[a]) == (s[b] == s[a])))

    single_ok = single_total = 0
    if land.n >= 2:
        for _ in range(pairs):
            r, t = rng.choice(land.n, size=2, replace=False)
            others = [i for i in range(land.n) if i not in (r, t)]
            base = [i for i in others if rng.random() < 0.5]
            if land.H[r] == land.H[t]:
                continue
            easy, hard = (r, t) if land.H[r] < land.H[t] else (t, r)
            qe = q.prob(base + [easy])
            qh = q.prob(base + [hard])
            se = s[subset_mask(base + [easy])]
            sh = s[subset_mask(base + [hard])]
            single_total += 1
            if land.beta > 0:
                single_ok += bool(qe > qh and se > sh)
            else:
                single_ok += bool(qe == qh)
    return {
        "pairs": pairs,
        "order_agreement": order_agree / pairs,
        "tie_agreement": tie_agree / pairs,
        "single_token_checks": single_total,
        "single_token_agreement": single_ok / single_total if single_total else 1.0,
        "ok": order_agree == pairs and tie_agree == pairs and single_ok == single_total,
    }


def exhaustive_order_isomorphism(land: EntropyLandscape) -> bool:
    """Ranking all subsets by probability equals ranking by score (full check)."""
    q = boltzmann_exact(land)
    s = scores(land)
    order = np.argsort(s, kind="stable")
    return bool(np.all(np.diff(q.probs[order]) >= 0) and np.all(np.diff(s[order]) >= 0))
