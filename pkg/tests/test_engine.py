import math

import numpy as np
import pytest
from scipy import special

from vaebptf import math_kernel as mk
from vaebptf.encoders import backward_rows, forward_rows, init_bank
from vaebptf.engine import (
    Adam,
    FactorState,
    ModelConfig,
    clip_norm,
    elbo,
    encoder_inputs,
    fit,
    grad_elbo_mode,
    grad_elbo_params,
    grad_ll_z,
    init_state,
    mode_specific_inference,
    poisson_rate,
    poisson_term,
    posterior_mean_factors,
    predict,
    total_kl,
)
from vaebptf.errors import DataError
from vaebptf.rng import stream
from vaebptf.synthetic import generate
from vaebptf.tensor_store import SparseCountTensor

from conftest import random_state, random_tensor


# ---------------------------------------------------------------- rates and ELBO

def test_poisson_rate_examples():
    assert poisson_rate([np.ones(10)] * 3) == 10.0
    assert poisson_rate([np.array([2.0, 1e-300]), np.array([1.0, 3.0]),
                         np.array([1.0, 1.0])]) == pytest.approx(2.0)


def test_poisson_rate_permutation_invariant(rng):
    rows = [rng.random(6) for _ in range(3)]
    perm = rng.permutation(6)
    assert poisson_rate([r[perm] for r in rows]) == pytest.approx(poisson_rate(rows), rel=1e-14)


def test_elbo_single_entry_at_prior():
    t = SparseCountTensor((1, 1, 1), [[0, 0, 0]], [1])
    ones = [np.ones((1, 1)) for _ in range(3)]
    state = FactorState(ones, [o.copy() for o in ones], [o.copy() for o in ones])
    assert elbo(t, state, ModelConfig(K=1)) == pytest.approx(-1.0, abs=1e-12)


def brute_force_elbo(t, state, cfg):
    q = 0.0
    for idx, y in t.entry_dict().items():
        lam = sum(math.prod(state.factors[m][i, k] for m, i in enumerate(idx))
                  for k in range(state.K))
        q += y * math.log(lam) - lam
    for a_m, b_m in zip(state.post_shape, state.post_rate):
        for a, b in zip(a_m.ravel(), b_m.ravel()):
            a0, b0 = cfg.prior_shape, cfg.prior_rate
            q -= ((a - a0) * special.digamma(a) - math.lgamma(a) + math.lgamma(a0)
                  + a0 * (math.log(b) - math.log(b0)) + a * (b0 - b) / b)
    return q


def test_elbo_matches_brute_force(rng):
    t = random_tensor(rng, (5, 5, 5), density=0.4)
    state = random_state(rng, t.mode_sizes, 3)
    cfg = ModelConfig(K=3, prior_shape=1.3, prior_rate=0.7)
    assert abs(elbo(t, state, cfg) - brute_force_elbo(t, state, cfg)) < 1e-10


def test_elbo_decomposition_and_kl_additivity(rng):
    t = random_tensor(rng, (4, 4, 4))
    state = random_state(rng, t.mode_sizes, 2)
    cfg = ModelConfig(K=2)
    assert elbo(t, state, cfg) + total_kl(state, cfg) == pytest.approx(
        poisson_term(t, state.factors), abs=1e-10)
    kl_one = mk.kl_gamma(state.post_shape[0][1, 1], state.post_rate[0][1, 1], 1.0, 1.0)
    before = elbo(t, state, cfg)
    # a second copy of one factor's KL, with the Poisson term held fixed
    doubled = total_kl(state, cfg) + kl_one
    assert poisson_term(t, state.factors) - doubled == pytest.approx(before - kl_one, abs=1e-10)


# ---------------------------------------------------------------- likelihood gradient

def test_grad_ll_single_entry():
    t = SparseCountTensor((1, 1, 1), [[0, 0, 0]], [2])
    ones = [np.ones((1, 1)) for _ in range(3)]
    state = FactorState(ones, ones, ones)
    assert grad_ll_z(t, state, 0, 0, 0) == pytest.approx(1.0)


def test_grad_ll_empty_entity_is_zero():
    t = SparseCountTensor((2, 1, 1), [[0, 0, 0]], [2])
    state = FactorState([np.ones((2, 1)), np.ones((1, 1)), np.ones((1, 1))], None, None)
    assert grad_ll_z(t, state, 0, 1, 0) == 0.0


def test_grad_ll_matches_finite_difference(rng):
    t = random_tensor(rng, (4, 4, 4))
    state = random_state(rng, t.mode_sizes, 3)
    for m, s, k in [(0, 0, 0), (1, 2, 1), (2, 3, 2), (0, 3, 1)]:
        h = 1e-6
        z = state.factors[m]
        old = z[s, k]
        z[s, k] = old + h
        up = poisson_term(t, state.factors)
        z[s, k] = old - h
        down = poisson_term(t, state.factors)
        z[s, k] = old
        fd = (up - down) / (2 * h)
        got = grad_ll_z(t, state, m, s, k)
        assert got == pytest.approx(fd, rel=1e-6, abs=1e-8)


# ---------------------------------------------------------------- pathwise ELBO gradient

def test_grad_params_vanish_at_stationary_prior():
    t = SparseCountTensor((1, 1), [[0, 0]], [1])
    ones = [np.ones((1, 1)), np.ones((1, 1))]
    state = FactorState(ones, [np.ones((1, 1))] * 2, [np.ones((1, 1))] * 2)
    da, db = grad_elbo_params(t, state, ModelConfig(K=1), 0, 0, 0, 1.0)
    assert da == pytest.approx(0.0, abs=1e-12) and db == pytest.approx(0.0, abs=1e-12)


def test_grad_beta_with_stubbed_terms():
    state = FactorState([np.array([[0.5]])] * 3, [np.array([[1.0]])] * 3, [np.array([[2.0]])] * 3)
    dll = np.array([[3.0]])
    cfg = ModelConfig(K=1)
    a, b = 1.0, 2.0
    _, db = grad_elbo_mode(None, state, cfg, 0, np.array([[1.0]]), dll=dll, deps=np.zeros((1, 1)))
    kl_b = mk.kl_grad_beta(a, b, 1.0, 1.0)
    assert float(db[0, 0]) + kl_b == pytest.approx(-3.0 / 4.0)


def _q_at(t, state, cfg, mode, s, k, alpha, beta, u, eps_fixed=None):
    """ELBO with (alpha, beta) of one factor replaced, the noise held fixed."""
    st = state.copy()
    st.post_shape[mode][s, k] = alpha
    st.post_rate[mode][s, k] = beta
    eps = eps_fixed if eps_fixed is not None else special.gammaincinv(alpha, u)
    st.factors[mode][s, k] = eps / beta
    return elbo(t, st, cfg)


def test_pathwise_gradients_match_finite_difference():
    rng = np.random.default_rng(8)
    for _ in range(6):
        t = random_tensor(rng, (4, 4, 4), density=0.5)
        state = random_state(rng, t.mode_sizes, 2)
        cfg = ModelConfig(K=2, prior_shape=rng.uniform(0.5, 2), prior_rate=rng.uniform(0.5, 2))
        m, s, k = int(rng.integers(3)), int(rng.integers(4)), int(rng.integers(2))
        a, b = state.post_shape[m][s, k], state.post_rate[m][s, k]
        eps = state.factors[m][s, k] * b
        u = special.gammainc(a, eps)
        da, db = grad_elbo_params(t, state, cfg, m, s, k, eps)
        h = 1e-5
        fd_b = (_q_at(t, state, cfg, m, s, k, a, b + h, u, eps)
                - _q_at(t, state, cfg, m, s, k, a, b - h, u, eps)) / (2 * h)
        fd_a = (_q_at(t, state, cfg, m, s, k, a + h, b, u)
                - _q_at(t, state, cfg, m, s, k, a - h, b, u)) / (2 * h)
        assert db == pytest.approx(fd_b, rel=1e-3, abs=1e-6)
        assert da == pytest.approx(fd_a, rel=1e-3, abs=1e-6)


def test_end_to_end_encoder_weight_gradient():
    """d Q / d (one encoder weight) at fixed quantiles equals the assembled chain."""
    rng = np.random.default_rng(21)
    t = random_tensor(rng, (4, 4, 4), density=0.6)
    cfg = ModelConfig(K=2, layer_widths=(3,), reweight=False)
    bank = init_bank(3, 2, (3,), rng, sigma_sq=0.3)
    state = random_state(rng, t.mode_sizes, 2)
    mode, k = 1, 0
    segs = t.coords[:, mode]
    x = encoder_inputs(t, state.factors, mode, k)
    w = np.ones(t.nnz)
    shape_net, rate_net = bank.net(mode, k, "shape"), bank.net(mode, k, "rate")
    u = rng.uniform(0.2, 0.8, size=4)

    def q_of_nets():
        a, _ = forward_rows(shape_net, x, w, segs, 4)
        b, _ = forward_rows(rate_net, x, w, segs, 4)
        st = state.copy()
        st.post_shape[mode][:, k] = a
        st.post_rate[mode][:, k] = b
        st.factors[mode][:, k] = special.gammaincinv(a, u) / b
        return elbo(t, st, cfg), st

    _, st = q_of_nets()
    a, cache_a = forward_rows(shape_net, x, w, segs, 4)
    b, cache_b = forward_rows(rate_net, x, w, segs, 4)
    d_alpha, d_beta = grad_elbo_mode(t, st, cfg, mode, st.noise(mode))
    checks = [(shape_net, backward_rows(shape_net, cache_a, d_alpha[:, k])),
              (rate_net, backward_rows(rate_net, cache_b, d_beta[:, k]))]
    h = 1e-6
    for net, grad in checks:
        for p, g in zip(net.parameters(), grad.parameters()):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for i in range(min(flat.size, 3)):
                old = flat[i]
                flat[i] = old + h
                up, _ = q_of_nets()
                flat[i] = old - h
                down, _ = q_of_nets()
                flat[i] = old
                fd = (up - down) / (2 * h)
                assert gflat[i] == pytest.approx(fd, rel=1e-3, abs=1e-5)


# ---------------------------------------------------------------- optimizer helpers

def test_adam_first_step_moves_by_lr_along_gradient_sign():
    p = np.array([1.0, -2.0])
    Adam(lr=0.1).step("x", [p], [np.array([3.0, -0.5])])
    assert p == pytest.approx([1.1, -2.1])


def test_clip_norm():
    g = [np.array([3.0]), np.array([4.0])]
    out = clip_norm(g, 1.0)
    assert math.hypot(out[0][0], out[1][0]) == pytest.approx(1.0)
    assert clip_norm(g, 10.0) is g


# ---------------------------------------------------------------- inference loop

def _toy(seed=0):
    truth = generate((6, 5, 4), 2, 2.0, 0.25, np.random.default_rng(seed))
    return truth.tensor


def test_zero_learning_rate_only_resamples(small_cfg):
    t = random_tensor(np.random.default_rng(3), (5, 4, 3), density=0.6)
    cfg = small_cfg.replace(lr=0.0)
    rng = stream(1, "init")
    state = init_state(t.mode_sizes, cfg.K, 1.0, 1.0, rng)
    bank = init_bank(3, cfg.K, cfg.layer_widths, rng)
    before = bank.copy()
    old = state.factors[0].copy()
    mode_specific_inference(t, state, bank, cfg, 0, np.random.default_rng(4))
    for key in bank.keys():
        for p, q in zip(bank.nets[key].parameters(), before.nets[key].parameters()):
            assert np.array_equal(p, q)
    assert not np.array_equal(old, state.factors[0])
    for z in state.factors:
        assert np.all(np.isfinite(z)) and np.all(z >= mk.FLOOR)


def test_one_sweep_is_deterministic(small_cfg):
    t = random_tensor(np.random.default_rng(3), (5, 4, 3), density=0.6)
    outs = []
    for _ in range(2):
        rng = stream(1, "init")
        state = init_state(t.mode_sizes, small_cfg.K, 1.0, 1.0, rng)
        bank = init_bank(3, small_cfg.K, small_cfg.layer_widths, rng)
        mode_specific_inference(t, state, bank, small_cfg, 0, np.random.default_rng(4))
        outs.append(state)
    for a, b in zip(outs[0].factors, outs[1].factors):
        assert np.array_equal(a, b)


def test_fit_single_iteration_and_determinism(small_cfg):
    t = _toy()
    _, _, r1 = fit(t, small_cfg.replace(max_iters=1))
    assert len(r1.elbo_trace) == 1 and r1.iterations_run == 1 and not r1.converged
    s_a, _, r_a = fit(t, small_cfg)
    s_b, _, r_b = fit(t, small_cfg)
    assert r_a.elbo_trace == r_b.elbo_trace
    for a, b in zip(s_a.factors, s_b.factors):
        assert np.array_equal(a, b)


def test_fit_rejects_empty_tensor(small_cfg):
    with pytest.raises(DataError):
        fit(SparseCountTensor((2, 2, 2), np.zeros((0, 3)), []), small_cfg)


def test_factors_stay_in_range_through_sweeps(small_cfg):
    def check(it, state, bank, q):
        for z, a, b in zip(state.factors, state.post_shape, state.post_rate):
            assert np.all(z >= mk.FLOOR) and np.all(np.isfinite(z))
            assert np.all(a >= mk.FLOOR) and np.all(b >= mk.FLOOR)

    fit(_toy(1), small_cfg.replace(max_iters=15), callback=check)


def test_cold_entities_keep_the_prior(small_cfg):
    t = SparseCountTensor((3, 2, 2), [[0, 0, 0], [0, 1, 1], [1, 1, 0]], [1, 2, 1])
    cfg = small_cfg.replace(prior_shape=2.0, prior_rate=4.0)
    state, _, _ = fit(t, cfg.replace(max_iters=3))
    assert np.all(state.post_shape[0][2] == 2.0) and np.all(state.post_rate[0][2] == 4.0)


def test_predict_from_unit_means():
    means = [np.ones((3, 5)) for _ in range(3)]
    assert predict(means, (0, 1, 2)) == 5.0
    with pytest.raises(DataError):
        predict(means, (0, 3, 0))


def test_posterior_means_single_sample_matches_encoder_ratio(small_cfg):
    t = _toy()
    state, bank, _ = fit(t, small_cfg)
    means = posterior_mean_factors(t, state, bank, small_cfg, n_samples=1)
    again = posterior_mean_factors(t, state, bank, small_cfg, n_samples=1)
    for a, b in zip(means, again):
        assert np.array_equal(a, b)
    assert all(np.all(m > 0) for m in means)


def test_config_round_trip_and_validation():
    cfg = ModelConfig(K=4, layer_widths=(3, 2), theta=0.5)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(DataError):
        ModelConfig.from_dict({"K": 2, "bogus": 1})
    with pytest.raises(DataError):
        ModelConfig(K=0)
    with pytest.raises(DataError):
        ModelConfig(hidden_activation="tanh")


@pytest.mark.slow
def test_training_dynamics_on_synthetic_tensor():
    truth = generate((30, 30, 30), 5, 2.0, 0.25, np.random.default_rng(0))
    cfg = ModelConfig(K=5, layer_widths=(10,), seed=0)
    _, _, report = fit(truth.tensor, cfg)
    trace = np.asarray(report.elbo_trace)
    smooth = np.convolve(trace, np.ones(10) / 10, mode="valid")
    span = trace.max() - trace.min()
    start = len(trace) // 2
    drops = [smooth[i] - smooth[i + 10] for i in range(start, len(smooth) - 10)]
    assert max(drops) <= 0.02 * span
