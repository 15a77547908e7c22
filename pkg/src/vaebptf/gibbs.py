"""Classical BPTF baseline: Gibbs sampling with auxiliary latent counts.

Each observed count is split across the K factors by a multinomial draw;
conditioned on those allocations every factor has a conjugate Gamma
posterior. As in the VAE model, only observed (non-zero) entries enter the
likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import math_kernel as mk
from .engine import FactorState, _gathered_products, _segment_sum, init_state
from .errors import DataError

__all__ = ["GibbsResult", "allocate_counts", "allocate_all", "gibbs_update_mode",
           "joint_log_prob", "gibbs_fit"]


@dataclass
class GibbsResult:
    means: list                 # posterior-mean factors, averaged over retained sweeps
    log_prob_trace: list        # complete-data joint log-probability per sweep
    state: FactorState          # last sample
    samples: list = field(default_factory=list)  # per retained sweep, list of factor matrices


def allocate_counts(y, rates, rng):
    """Split count ``y`` over factors with probabilities ``rates / sum(rates)``."""
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < 0):
        raise DataError("rates must be non-negative")
    total = rates.sum()
    if not total > 0:
        raise DataError("all-zero rates")
    return rng.multinomial(int(y), rates / total)


def allocate_all(train, factors, rng):
    """Allocation matrix ``(nnz, K)`` for every observed entry."""
    rates = _gathered_products(train.coords, factors)
    probs = rates / rates.sum(axis=1, keepdims=True)
    return rng.multinomial(train.values, probs)


def gibbs_update_mode(train, allocations, state, prior, mode, rng):
    """Conjugate resampling of every factor of ``mode``; updates ``state`` in place.

    shape = prior shape + allocated counts; rate = prior rate + sum over the
    entity's entries of the product of the other modes' factors.
    """
    prior_shape, prior_rate = prior
    n = train.mode_sizes[mode]
    segs = train.coords[:, mode]
    other = _gathered_products(train.coords, state.factors, skip=mode)
    shape = prior_shape + _segment_sum(allocations.astype(float), segs, n)
    rate = prior_rate + _segment_sum(other, segs, n)
    state.post_shape[mode] = shape
    state.post_rate[mode] = rate
    state.factors[mode] = mk.sample_gamma(shape, rate, rng)
    return state.factors[mode]


def joint_log_prob(train, allocations, state, prior):
    prior_shape, prior_rate = prior
    rates = _gathered_products(train.coords, state.factors)
    c = allocations
    lp = float(np.sum(c * np.log(rates) - rates - special.gammaln(c + 1.0)))
    for z in state.factors:
        lp += float(np.sum(prior_shape * np.log(prior_rate) - special.gammaln(prior_shape)
                           + (prior_shape - 1.0) * np.log(z) - prior_rate * z))
    return lp


def gibbs_fit(train, K, prior=(1.0, 1.0), iters=200, burn_in=None, rng=None,
              keep_samples=False):
    if train.nnz == 0:
        raise DataError("training tensor is empty")
    if burn_in is None:
        burn_in = iters // 2
    if iters <= burn_in:
        raise DataError("no samples retained: iters must exceed burn_in")
    if rng is None:
        rng = np.random.default_rng()
    prior = (float(prior[0]), float(prior[1]))
    state = init_state(train.mode_sizes, int(K), prior[0], prior[1], rng)
    sums = [np.zeros_like(z) for z in state.factors]
    trace, samples = [], []
    for it in range(iters):
        alloc = allocate_all(train, state.factors, rng)
        for mode in range(train.n_modes):
            gibbs_update_mode(train, alloc, state, prior, mode, rng)
        trace.append(joint_log_prob(train, alloc, state, prior))
        if it >= burn_in:
            for s, z in zip(sums, state.factors):
                s += z
            if keep_samples:
                samples.append([z.copy() for z in state.factors])
    kept = iters - burn_in
    return GibbsResult([s / kept for s in sums], trace, state, samples)
