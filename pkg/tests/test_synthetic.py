import numpy as np
import pytest

from vaebptf.errors import DataError
from vaebptf.synthetic import (
    SyntheticTruth,
    compare_posteriors,
    dense_rates,
    generate,
    load_truth,
    match_factors,
    save_truth,
)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_density_near_ten_percent(seed):
    truth = generate((100, 100, 100), 10, 2.0, 0.25, np.random.default_rng(seed))
    density = truth.tensor.nnz / 1e6
    assert 0.05 <= density <= 0.20


def test_rejects_zero_factors():
    with pytest.raises(DataError):
        generate((3, 3), 0, 2.0, 0.25, np.random.default_rng(0))


def test_fixed_seed_is_identical():
    a = generate((5, 6, 7), 3, 2.0, 0.25, np.random.default_rng(11))
    b = generate((5, 6, 7), 3, 2.0, 0.25, np.random.default_rng(11))
    assert a.tensor.entry_dict() == b.tensor.entry_dict()
    for x, y in zip(a.factors, b.factors):
        assert np.array_equal(x, y)


def test_truth_invariants():
    truth = generate((8, 7, 6), 3, 2.0, 0.25, np.random.default_rng(3))
    assert all(np.all(z > 0) for z in truth.factors)
    assert np.all(truth.tensor.values >= 1)
    assert [z.shape for z in truth.factors] == [(8, 3), (7, 3), (6, 3)]


def test_counts_match_poisson_mean_over_replications():
    # 10^4 replications: the total rate is ~4 per replication, so 2% is ~4 sd
    observed, expected = 0.0, 0.0
    for r in range(10_000):
        truth = generate((5, 5, 5), 2, 2.0, 0.25, np.random.default_rng(r))
        observed += truth.tensor.values.sum()
        expected += dense_rates(truth.factors).sum()
    assert observed / expected == pytest.approx(1.0, rel=0.02)


def _truth_from(factors):
    sizes = tuple(z.shape[0] for z in factors)
    K = factors[0].shape[1]
    ones = [np.ones(n) for n in sizes]
    return SyntheticTruth(sizes, K, 2.0, 0.25, ones, ones, factors, None)


def test_compare_identity_and_permutation():
    rng = np.random.default_rng(5)
    factors = [rng.gamma(2.0, 1.0, size=(n, 4)) for n in (20, 15, 10)]
    truth = _truth_from(factors)
    for value in compare_posteriors(truth, factors).values():
        assert value == pytest.approx((1.0, 1.0), abs=1e-12)
    perm = rng.permutation(4)
    shuffled = [z[:, perm] for z in factors]
    assert list(perm[match_factors(factors, shuffled)]) == list(range(4))
    for value in compare_posteriors(truth, shuffled).values():
        assert value == pytest.approx((1.0, 1.0), abs=1e-12)


def test_compare_independent_draws_near_zero():
    rng = np.random.default_rng(6)
    sizes = (1000, 1000, 1500)
    truth = _truth_from([rng.gamma(2.0, 1.0, size=(n, 4)) for n in sizes])
    fitted = [rng.gamma(2.0, 1.0, size=(n, 4)) for n in sizes]
    pearson, spearman = compare_posteriors(truth, fitted)["all"]
    assert abs(pearson) < 0.1 and abs(spearman) < 0.1


def test_compare_rejects_k_mismatch():
    rng = np.random.default_rng(7)
    truth = _truth_from([rng.random((4, 3)) for _ in range(3)])
    with pytest.raises(DataError, match="K mismatch"):
        compare_posteriors(truth, [rng.random((4, 2)) for _ in range(3)])


def test_truth_file_round_trip(tmp_path):
    truth = generate((4, 3, 5), 2, 2.0, 0.25, np.random.default_rng(8))
    save_truth(truth, tmp_path / "truth.tsv")
    back = load_truth(tmp_path / "truth.tsv", truth.tensor)
    assert back.mode_sizes == truth.mode_sizes and back.K == 2
    for a, b in zip(back.factors, truth.factors):
        assert np.array_equal(a, b)
    for a, b in zip(back.entity_rate, truth.entity_rate):
        assert np.array_equal(a, b)
