import math

import numpy as np
import pytest
from scipy import integrate, stats

from vaebptf.engine import FactorState
from vaebptf.errors import DataError
from vaebptf.gibbs import allocate_all, allocate_counts, gibbs_fit, gibbs_update_mode
from vaebptf.tensor_store import SparseCountTensor

from conftest import random_tensor


def test_allocation_means():
    rng = np.random.default_rng(0)
    draws = np.array([allocate_counts(4, [1.0, 3.0], rng) for _ in range(100_000)])
    assert draws.mean(axis=0) == pytest.approx([1.0, 3.0], rel=0.02)
    assert np.all(draws.sum(axis=1) == 4)


def test_allocation_single_factor_and_errors():
    rng = np.random.default_rng(1)
    assert list(allocate_counts(7, [0.3], rng)) == [7]
    with pytest.raises(DataError):
        allocate_counts(2, [0.0, 0.0], rng)
    with pytest.raises(DataError):
        allocate_counts(2, [-1.0, 2.0], rng)


def test_allocation_marginal_is_binomial():
    rng = np.random.default_rng(2)
    first = np.array([allocate_counts(4, [1.0, 3.0], rng)[0] for _ in range(100_000)])
    observed = np.bincount(first, minlength=5)
    expected = stats.binom.pmf(np.arange(5), 4, 0.25) * first.size
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_allocate_all_sums_to_counts(rng):
    t = random_tensor(rng, (4, 3, 5), max_count=9)
    factors = [rng.uniform(0.1, 2.0, size=(n, 3)) for n in t.mode_sizes]
    alloc = allocate_all(t, factors, rng)
    assert np.array_equal(alloc.sum(axis=1), t.values)


def test_update_mode_posterior_parameters():
    t = SparseCountTensor((2, 5), [[0, j] for j in range(5)], [1, 1, 1, 1, 1])
    state = FactorState([np.ones((2, 1)), np.ones((5, 1))], [np.ones((2, 1))] * 2,
                        [np.ones((5, 1))] * 2)
    alloc = np.array([[1], [1], [1], [0], [0]])
    gibbs_update_mode(t, alloc, state, (1.0, 1.0), 0, np.random.default_rng(0))
    assert state.post_shape[0][0, 0] == 4.0
    assert state.post_rate[0][0, 0] == 6.0
    # entity 1 has no entries and keeps the prior
    assert state.post_shape[0][1, 0] == 1.0 and state.post_rate[0][1, 0] == 1.0


def test_no_samples_retained():
    t = SparseCountTensor((1, 1, 1), [[0, 0, 0]], [3])
    with pytest.raises(DataError, match="no samples retained"):
        gibbs_fit(t, 1, iters=10, burn_in=10)


def test_fixed_seed_gives_identical_traces(rng):
    t = random_tensor(rng, (3, 4, 3))
    a = gibbs_fit(t, 2, iters=20, rng=np.random.default_rng(9))
    b = gibbs_fit(t, 2, iters=20, rng=np.random.default_rng(9))
    assert a.log_prob_trace == b.log_prob_trace
    for x, y in zip(a.means, b.means):
        assert np.array_equal(x, y)


def one_entry_posterior_mean(y, prior_shape=1.0, prior_rate=1.0):
    """E[z1 z2 z3 | y] for one Poisson entry with three Gamma factors.

    The innermost factor integrates in closed form; the rest by quadrature.
    """
    a0, b0 = prior_shape, prior_rate

    def inner(n, a):
        # int z^(a0-1) e^(-b0 z) (a z)^n e^(-a z) dz, up to the prior normalizer
        return a ** n * math.exp(math.lgamma(a0 + n) - (a0 + n) * math.log(b0 + a))

    def moment(n):
        f = lambda z2, z1: (z1 * z2) ** (a0 - 1) * math.exp(-b0 * (z1 + z2)) * inner(n, z1 * z2)
        return integrate.dblquad(f, 0, np.inf, 0, np.inf, epsabs=1e-12, epsrel=1e-10)[0]

    return moment(y + 1) / moment(y)


@pytest.mark.slow
def test_one_entry_chain_matches_integrated_posterior():
    t = SparseCountTensor((1, 1, 1), [[0, 0, 0]], [3])
    oracle = one_entry_posterior_mean(3)
    assert 1.0 < oracle < 3.0
    res = gibbs_fit(t, 1, iters=40_000, burn_in=1000, rng=np.random.default_rng(4),
                    keep_samples=True)
    lam = np.mean([float(np.prod([z[0, 0] for z in s])) for s in res.samples])
    assert lam == pytest.approx(oracle, rel=0.05)


def test_joint_log_prob_running_mean_stabilizes():
    t = random_tensor(np.random.default_rng(6), (3, 3, 3), density=0.6)
    res = gibbs_fit(t, 2, iters=800, rng=np.random.default_rng(1))
    trace = np.asarray(res.log_prob_trace)
    running = np.cumsum(trace) / np.arange(1, trace.size + 1)
    tail = running[-trace.size // 4:]
    assert tail.std() < 0.05 * np.ptp(running)


def test_means_are_positive_and_finite(rng):
    t = random_tensor(rng, (4, 4, 4))
    res = gibbs_fit(t, 3, iters=30, rng=np.random.default_rng(0))
    for m in res.means:
        assert np.all(m > 0) and np.all(np.isfinite(m))
    with pytest.raises(DataError):
        gibbs_fit(SparseCountTensor((2, 2), np.zeros((0, 2)), []), 2)
