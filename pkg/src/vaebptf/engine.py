"""VAE-BPTF inference: ELBO, pathwise gradients, encoder training and sampling.

One iteration sweeps the modes in ascending order. Each mode sweep
(1) evaluates both encoders for every (entity, factor), forms dQ/d(shape)
and dQ/d(rate) through the reparameterized Gamma sample, backpropagates
them into the encoders and takes one Adam ascent step on Q minus an L2
penalty; (2) resamples the mode's latent factors from the refreshed
encoder outputs. Input batches of the other modes are gathered on demand
from the current factors, so the new samples are picked up immediately.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import math_kernel as mk
from .encoders import PARAM_KINDS, backward_rows, forward_rows, init_bank
from .errors import DataError, NumericalError
from .reweight import ReweightParams, row_weights
from .rng import stream
from .tensor_store import most_frequent_value

__all__ = [
    "ModelConfig",
    "FactorState",
    "TrainReport",
    "Adam",
    "clip_norm",
    "poisson_rate",
    "rates_at",
    "elbo",
    "poisson_term",
    "total_kl",
    "grad_ll_z",
    "grad_ll_mode",
    "grad_elbo_params",
    "grad_elbo_mode",
    "init_state",
    "encoder_inputs",
    "mode_specific_inference",
    "fit",
    "posterior_mean_factors",
    "predict",
    "predict_many",
]


@dataclass
class ModelConfig:
    K: int = 10
    layer_widths: tuple = (20,)
    hidden_activation: str = "softplus"
    output_activation: str = "softplus"
    theta: float = 1.0
    eta: float = 5.0
    reweight: bool = True
    prior_shape: float = 1.0
    prior_rate: float = 1.0
    sigma_sq: float = 1.0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    max_iters: int = 300
    conv_window: int = 10
    conv_tol: float = 1e-4
    mean_samples: int = 50
    seed: int = 0

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        self.validate()

    @property
    def L(self):
        return len(self.layer_widths)

    def validate(self):
        if self.K < 1:
            raise DataError("K must be >= 1")
        if any(w < 1 for w in self.layer_widths):
            raise DataError("layer widths must be positive")
        for name in ("hidden_activation", "output_activation"):
            if getattr(self, name) not in mk.ACTIVATIONS:
                raise DataError(f"{name} must be one of {mk.ACTIVATIONS}")
        for name in ("theta", "eta", "prior_shape", "prior_rate", "sigma_sq", "conv_tol",
                     "grad_clip"):
            if not getattr(self, name) > 0:
                raise DataError(f"{name} must be positive")
        if self.lr < 0:
            raise DataError("lr must be non-negative")
        if self.max_iters < 1 or self.conv_window < 1 or self.mean_samples < 1:
            raise DataError("max_iters, conv_window and mean_samples must be >= 1")

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return ModelConfig(**data)

    def to_dict(self):
        data = asdict(self)
        data["layer_widths"] = list(self.layer_widths)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class FactorState:
    """Per mode: sampled factors ``z`` and the posterior shapes/rates that produced them."""

    factors: list
    post_shape: list
    post_rate: list

    @property
    def K(self):
        return self.factors[0].shape[1]

    @property
    def mode_sizes(self):
        return tuple(z.shape[0] for z in self.factors)

    def copy(self):
        return FactorState([z.copy() for z in self.factors],
                           [a.copy() for a in self.post_shape],
                           [b.copy() for b in self.post_rate])

    def noise(self, mode):
        """Standard-Gamma noise behind the current sample: ``eps = z * rate``."""
        return self.factors[mode] * self.post_rate[mode]


@dataclass
class TrainReport:
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    iterations_run: int = 0
    wall_time: float = 0.0
    sweep_times: list = field(default_factory=list)


class Adam:
    """Adam ascent steps keyed by parameter group."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.moments = {}
        self.steps = {}

    def step(self, key, params, grads):
        t = self.steps.get(key, 0) + 1
        self.steps[key] = t
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for i, (p, g) in enumerate(zip(params, grads)):
            m, v = self.moments.setdefault((key, i), (np.zeros_like(p), np.zeros_like(p)))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p += self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_norm(grads, max_norm):
    """Rescale a group of gradient arrays so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not np.isfinite(norm):
        raise NumericalError("non-finite encoder gradient")
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


# ---------------------------------------------------------------- likelihood

def poisson_rate(factor_rows):
    """CP rate ``sum_k prod_m z[m][k]`` for one index tuple, given one factor row per mode."""
    prod = np.ones_like(np.asarray(factor_rows[0], dtype=float))
    for row in factor_rows:
        prod = prod * np.asarray(row, dtype=float)
    return float(prod.sum())


def _gathered_products(coords, factors, skip=None):
    prod = None
    for m, z in enumerate(factors):
        if m == skip:
            continue
        rows = z[coords[:, m]]
        prod = rows.copy() if prod is None else prod * rows
    return prod


def rates_at(coords, factors):
    """CP rates for every row of ``coords``."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(factors))
    return _gathered_products(coords, factors).sum(axis=1)


def poisson_term(train, factors):
    lam = rates_at(train.coords, factors)
    return float(np.sum(train.values * np.log(lam) - lam))


def total_kl(state, cfg):
    kl = 0.0
    for a, b in zip(state.post_shape, state.post_rate):
        kl += float(np.sum(mk.kl_gamma(a, b, cfg.prior_shape, cfg.prior_rate)))
    return kl


def elbo(train, state, cfg):
    """Poisson log-likelihood of the observed entries (without ``-ln y!``) minus total KL."""
    return poisson_term(train, state.factors) - total_kl(state, cfg)


def _segment_sum(values, segments, n):
    if values.ndim == 1:
        return np.bincount(segments, weights=values, minlength=n)
    return np.stack([np.bincount(segments, weights=values[:, k], minlength=n)
                     for k in range(values.shape[1])], axis=1)


def grad_ll_mode(train, state, mode):
    """d(Poisson log-likelihood)/dz for every entity and factor of ``mode``."""
    coords, y = train.coords, train.values.astype(float)
    other = _gathered_products(coords, state.factors, skip=mode)
    lam = np.sum(state.factors[mode][coords[:, mode]] * other, axis=1)
    contrib = (y / lam)[:, None] * other - other
    return _segment_sum(contrib, coords[:, mode], state.factors[mode].shape[0])


def grad_ll_z(train, state, mode, entity, k):
    rows = train.coords[:, mode] == entity
    if not rows.any():
        return 0.0
    sub = train.take(np.flatnonzero(rows))
    return float(grad_ll_mode(sub, state, mode)[entity, k])


def grad_elbo_mode(train, state, cfg, mode, eps, dll=None, deps=None):
    """Pathwise ``(dQ/dshape, dQ/drate)`` for every entity and factor of ``mode``.

    ``eps`` is the standard-Gamma noise with ``z = eps / rate``. ``dll`` and
    ``deps`` override the likelihood gradient and the shape reparameterization
    term (used to isolate pieces of the chain in tests).
    """
    a, b = state.post_shape[mode], state.post_rate[mode]
    if dll is None:
        dll = grad_ll_mode(train, state, mode)
    if deps is None:
        deps = mk.deps_dalpha(eps, a)
    d_beta = dll * (-eps / b**2) - mk.kl_grad_beta(a, b, cfg.prior_shape, cfg.prior_rate)
    d_alpha = dll * (deps / b) - mk.kl_grad_alpha(a, b, cfg.prior_shape, cfg.prior_rate)
    return d_alpha, d_beta


def grad_elbo_params(train, state, cfg, mode, entity, k, eps):
    d_alpha, d_beta = grad_elbo_mode(train, state, cfg, mode, np.asarray(
        _noise_with(state, mode, entity, k, eps)))
    return float(d_alpha[entity, k]), float(d_beta[entity, k])


def _noise_with(state, mode, entity, k, eps):
    noise = state.noise(mode).copy()
    noise[entity, k] = eps
    return noise


# ---------------------------------------------------------------- training

def init_state(mode_sizes, K, prior_shape, prior_rate, rng):
    """Factors drawn from the prior; stored posterior parameters equal the prior."""
    factors, shapes, rates = [], [], []
    for size in mode_sizes:
        a = np.full((size, K), float(prior_shape))
        b = np.full((size, K), float(prior_rate))
        factors.append(mk.sample_gamma(a, b, rng))
        shapes.append(a)
        rates.append(b)
    return FactorState(factors, shapes, rates)


def encoder_inputs(train, factors, mode, k):
    """Input rows ``<z[m'][., k] for m' != mode (ascending), y>`` for every training entry."""
    cols = [factors[m][train.coords[:, m], k] for m in range(len(factors)) if m != mode]
    cols.append(train.values.astype(float))
    return np.column_stack(cols)


class _Context:
    """Per-fit constants: reweighting, per-mode observation counts, optimizer."""

    def __init__(self, train, cfg):
        if train.nnz == 0:
            raise DataError("training tensor is empty")
        self.cfg = cfg
        self.ybar = most_frequent_value(train)
        params = ReweightParams(cfg.theta, cfg.eta, self.ybar) if cfg.reweight else None
        self.row_weights = row_weights(train.values, params)
        self.counts = [np.bincount(train.coords[:, m], minlength=size)
                       for m, size in enumerate(train.mode_sizes)]
        self.optimizer = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def _encode_mode(train, state, bank, ctx, mode):
    """Forward every encoder of ``mode``; returns shapes, rates and the caches."""
    n = train.mode_sizes[mode]
    segs = train.coords[:, mode]
    cold = ctx.counts[mode] == 0
    shapes = np.empty((n, ctx.cfg.K))
    rates = np.empty((n, ctx.cfg.K))
    caches = {}
    for k in range(ctx.cfg.K):
        x = encoder_inputs(train, state.factors, mode, k)
        for kind, out in zip(PARAM_KINDS, (shapes, rates)):
            params, cache = forward_rows(bank.net(mode, k, kind), x, ctx.row_weights, segs, n)
            out[:, k] = params
            caches[(k, kind)] = cache
    # cold entities keep the prior
    shapes[cold] = ctx.cfg.prior_shape
    rates[cold] = ctx.cfg.prior_rate
    if not (np.all(np.isfinite(shapes)) and np.all(np.isfinite(rates))):
        raise NumericalError(f"non-finite posterior parameters in mode {mode}")
    return shapes, rates, caches


def _sample_mode(state, mode, shapes, rates, rng):
    state.post_shape[mode] = shapes
    state.post_rate[mode] = rates
    state.factors[mode] = mk.sample_gamma(shapes, rates, rng)


def mode_specific_inference(train, state, bank, cfg, mode, rng, ctx=None):
    """One sweep of ``mode``: encoder update, resampling; modifies state and bank in place."""
    ctx = ctx or _Context(train, cfg)
    cold = ctx.counts[mode] == 0

    # (1) encoder update at fixed noise
    shapes, rates, caches = _encode_mode(train, state, bank, ctx, mode)
    eps = state.noise(mode)
    current = state.copy()
    current.post_shape[mode] = shapes
    current.post_rate[mode] = rates
    current.factors[mode] = mk.clamp_factor(eps / rates)
    d_alpha, d_beta = grad_elbo_mode(train, current, cfg, mode, eps)
    d_alpha[cold] = 0.0
    d_beta[cold] = 0.0
    if not (np.all(np.isfinite(d_alpha)) and np.all(np.isfinite(d_beta))):
        raise NumericalError(f"non-finite ELBO gradient in mode {mode}")

    precision = 1.0 / cfg.sigma_sq
    for k in range(cfg.K):
        for kind, upstream in zip(PARAM_KINDS, (d_alpha[:, k], d_beta[:, k])):
            net = bank.net(mode, k, kind)
            grad = backward_rows(net, caches[(k, kind)], upstream)
            params = net.parameters()
            grads = clip_norm([g - precision * p for g, p in zip(grad.parameters(), params)],
                              cfg.grad_clip)
            ctx.optimizer.step((mode, k, kind), params, grads)

    # (2) resample from the refreshed encoders; (3) happens implicitly since
    # other modes gather their inputs from state.factors
    shapes, rates, _ = _encode_mode(train, state, bank, ctx, mode)
    _sample_mode(state, mode, shapes, rates, rng)
    return state, bank


def _converged(trace, window, tol):
    if len(trace) < window:
        return False
    recent = np.asarray(trace[-window:])
    return float(np.std(recent) / (abs(np.mean(recent)) + 1.0)) < tol


def fit(train, cfg, rng=None, bank=None, state=None, callback=None):
    """Run the full inference loop; returns ``(state, bank, report)``."""
    if train.nnz == 0:
        raise DataError("training tensor is empty")
    if rng is None:
        rng = stream(cfg.seed, "fit")
    init_rng = stream(cfg.seed, "init")
    if state is None:
        state = init_state(train.mode_sizes, cfg.K, cfg.prior_shape, cfg.prior_rate, init_rng)
    if bank is None:
        bank = init_bank(train.n_modes, cfg.K, cfg.layer_widths, init_rng, cfg.sigma_sq,
                         cfg.hidden_activation, cfg.output_activation)
    ctx = _Context(train, cfg)
    report = TrainReport()
    start = time.perf_counter()
    for it in range(cfg.max_iters):
        t0 = time.perf_counter()
        for mode in range(train.n_modes):
            mode_specific_inference(train, state, bank, cfg, mode, rng, ctx)
        report.sweep_times.append(time.perf_counter() - t0)
        q = elbo(train, state, cfg)
        if not np.isfinite(q):
            raise NumericalError(f"ELBO became non-finite at iteration {it + 1}")
        report.elbo_trace.append(q)
        report.iterations_run = it + 1
        if callback is not None:
            callback(it, state, bank, q)
        if _converged(report.elbo_trace, cfg.conv_window, cfg.conv_tol):
            report.converged = True
            break
    report.wall_time = time.perf_counter() - start
    return state, bank, report


def posterior_mean_factors(train, state, bank, cfg, n_samples=None, rng=None):
    """Average posterior means ``shape / rate`` over further sampling sweeps.

    The encoders are frozen; each sweep re-encodes every mode from the current
    samples, records the means and resamples. ``state`` is not modified.
    """
    n_samples = cfg.mean_samples if n_samples is None else int(n_samples)
    if n_samples < 1:
        raise DataError("n_samples must be >= 1")
    if rng is None:
        rng = stream(cfg.seed, "posterior-means")
    ctx = _Context(train, cfg)
    work = state.copy()
    sums = [np.zeros_like(z) for z in work.factors]
    for _ in range(n_samples):
        for mode in range(train.n_modes):
            shapes, rates, _ = _encode_mode(train, work, bank, ctx, mode)
            sums[mode] += mk.clamp_factor(shapes / rates)
            _sample_mode(work, mode, shapes, rates, rng)
    return [s / n_samples for s in sums]


def predict(means, index):
    """Poisson mean at one index tuple from posterior-mean factor matrices."""
    index = tuple(int(i) for i in index)
    if len(index) != len(means):
        raise DataError(f"index has {len(index)} components, expected {len(means)}")
    for m, (i, z) in enumerate(zip(index, means)):
        if not 0 <= i < z.shape[0]:
            raise DataError(f"index {i} out of range for mode {m}")
    return poisson_rate([z[i] for i, z in zip(index, means)])


def predict_many(means, coords):
    return rates_at(coords, means)
