import itertools
import math

import numpy as np
import pytest

from tabomlab.oracle import (EntropyLandscape, boltzmann_exact, exhaustive_order_isomorphism, kl_divergence_uniform_gap,
                             kl_exact, membership, uniform_gap_equal_entropies, verify_ranking_lemma)


def brute(H, beta):
    """Independent enumeration with itertools over explicit subsets."""
    n = len(H)
    w = {}
    for k in range(n + 1):
        for sub in itertools.combinations(range(n), k):
            w[frozenset(sub)] = math.exp(-beta * sum(H[r] for r in sub))
    z = sum(w.values())
    return {s: v / z for s, v in w.items()}, z


def test_two_token_example():
    q = boltzmann_exact(EntropyLandscape([0.0, math.log(2)], 1.0))
    assert q.z == pytest.approx(3.0, abs=1e-12)
    assert q.prob([]) == pytest.approx(1 / 3)
    assert q.prob([0]) == pytest.approx(1 / 3)
    assert q.prob([1]) == pytest.approx(1 / 6)
    assert q.prob([0, 1]) == pytest.approx(1 / 6)


@pytest.mark.parametrize("seed", range(5))
def test_matches_itertools_enumeration(seed):
    rng = np.random.default_rng(seed)
    H = rng.uniform(0, 3, size=6)
    q = boltzmann_exact(EntropyLandscape(H, 1.7))
    ref, z = brute(H, 1.7)
    assert q.z == pytest.approx(z, rel=1e-12)
    for sub, p in ref.items():
        assert q.prob(sub) == pytest.approx(p, rel=1e-12)


def test_equal_entropies_depend_only_on_size():
    q = boltzmann_exact(EntropyLandscape([0.7] * 5, 1.0))
    sizes = membership(5).sum(axis=1)
    for k in range(6):
        vals = q.probs[sizes == k]
        assert np.ptp(vals) < 1e-15


def test_beta_zero_is_uniform():
    q = boltzmann_exact(EntropyLandscape([0.1, 2.0, 0.5], 0.0))
    np.testing.assert_allclose(q.probs, 1 / 8, atol=1e-15)
    assert kl_divergence_uniform_gap(EntropyLandscape([0.1, 2.0, 0.5], 0.0)) == pytest.approx(0.0, abs=1e-12)


def test_large_beta_does_not_overflow():
    q = boltzmann_exact(EntropyLandscape([5.0, 9.0, 12.0], 500.0))
    assert np.all(np.isfinite(q.log_probs)) and q.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert q.prob([]) == pytest.approx(1.0)


def test_cap_and_validation():
    with pytest.raises(ValueError, match="cap"):
        EntropyLandscape(np.zeros(21))
    with pytest.raises(ValueError):
        EntropyLandscape([-0.1, 0.2])
    with pytest.raises(ValueError, match="mismatch"):
        kl_exact(boltzmann_exact(EntropyLandscape([0.1, 0.2])), EntropyLandscape([0.1, 0.2, 0.3]))


@pytest.mark.parametrize("seed", range(10))
def test_kl_double_summation(seed):
    rng = np.random.default_rng(100 + seed)
    a = EntropyLandscape(rng.uniform(0, 2, size=3), 1.0)
    b = EntropyLandscape(rng.uniform(0, 2, size=3), 1.0)
    qa, _ = brute(a.H, 1.0)
    qb, _ = brute(b.H, 1.0)
    # second accumulation order: descending subset size
    total = 0.0
    for sub in sorted(qa, key=lambda s: (-len(s), sorted(s))):
        total += qa[sub] * (math.log(qa[sub]) - math.log(qb[sub]))
    assert kl_exact(boltzmann_exact(a), b) == pytest.approx(total, abs=1e-12)
    assert total > 0
    assert abs(kl_exact(boltzmann_exact(a), a)) < 1e-12


@pytest.mark.parametrize("n,h,beta", [(1, 0.3, 1.0), (4, 0.7, 2.0), (9, 1.2, 0.5), (12, 0.05, 3.0)])
def test_uniform_gap_closed_form(n, h, beta):
    enum = kl_divergence_uniform_gap(EntropyLandscape([h] * n, beta))
    assert uniform_gap_equal_entropies(n, h, beta) == pytest.approx(enum, abs=1e-10)


def test_uniform_gap_monotone_in_beta():
    H = np.random.default_rng(3).uniform(0.1, 2, size=7)
    gaps = [kl_divergence_uniform_gap(EntropyLandscape(H, b)) for b in np.linspace(0, 20, 41)]
    assert all(b >= a - 1e-12 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 7 * math.log(2) + 1e-9


def test_ranking_lemma_random_pairs():
    rep = verify_ranking_lemma(EntropyLandscape(np.random.default_rng(0).uniform(0, 3, 8), 1.0), pairs=1000)
    assert rep["ok"] and rep["order_agreement"] == 1.0 and rep["single_token_agreement"] == 1.0


def test_subset_with_fewer_costs_is_more_likely():
    land = EntropyLandscape([0.4, 1.1, 0.2, 0.9], 1.0)
    q = boltzmann_exact(land)
    assert q.prob([1]) > q.prob([1, 3]) > q.prob([0, 1, 3])


def test_order_isomorphism_exhaustive():
    for seed in range(5):
        land = EntropyLandscape(np.random.default_rng(seed).uniform(0, 3, 10), 0.8)
        assert exhaustive_order_isomorphism(land)
