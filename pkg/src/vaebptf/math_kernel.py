"""Numerical kernel: special functions, activations, Gamma sampling and KL.

All functions accept scalars or numpy arrays and broadcast. Gamma
distributions use the shape/rate parameterization (mean ``shape / rate``).
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import DataError

__all__ = [
    "FLOOR",
    "ACTIVATIONS",
    "GammaParams",
    "lgamma",
    "digamma",
    "trigamma",
    "activate",
    "activate_grad",
    "clamp",
    "clamp_factor",
    "sample_gamma",
    "kl_gamma",
    "kl_grad_alpha",
    "kl_grad_beta",
    "std_gamma_cdf",
    "std_gamma_logpdf",
    "deps_dalpha",
]

# Lower bound for posterior parameters and latent factors.
FLOOR = 1e-6
# Upper bound for latent factors; keeps encoder inputs finite when an
# untrained encoder pair produces a near-zero rate.
CEILING = 1e6

ACTIVATIONS = ("softplus", "sigmoid", "relu")


class GammaParams(tuple):
    """``(shape, rate)`` pair; a thin tuple so it unpacks naturally."""

    __slots__ = ()

    def __new__(cls, shape, rate):
        return super().__new__(cls, (shape, rate))

    @property
    def shape(self):
        return self[0]

    @property
    def rate(self):
        return self[1]

    @property
    def mean(self):
        return self[0] / self[1]


def _positive(x, name):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DataError(f"{name} requires x > 0")
    return x


def _out(x):
    return x.item() if np.ndim(x) == 0 else x


def lgamma(x):
    return _out(special.gammaln(_positive(x, "lgamma")))


def digamma(x):
    return _out(special.digamma(_positive(x, "digamma")))


def trigamma(x):
    return _out(special.polygamma(1, _positive(x, "trigamma")))


def activate(kind, x):
    x = np.asarray(x, dtype=float)
    if kind == "softplus":
        # overflow-safe ln(1 + e^x)
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    if kind == "sigmoid":
        return special.expit(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    raise DataError(f"unknown activation {kind!r}")


def activate_grad(kind, x):
    x = np.asarray(x, dtype=float)
    if kind == "softplus":
        return special.expit(x)
    if kind == "sigmoid":
        s = special.expit(x)
        return s * (1.0 - s)
    if kind == "relu":
        return (x > 0).astype(float)
    raise DataError(f"unknown activation {kind!r}")


def clamp(x):
    return np.maximum(x, FLOOR)


def clamp_factor(z):
    return np.clip(z, FLOOR, CEILING)


def sample_gamma(shape, rate, rng, size=None):
    """Draw from Gamma(shape, rate); parameters and draws are floored at ``FLOOR``.

    numpy's ``standard_gamma`` is the Marsaglia-Tsang squeeze/rejection
    sampler with the ``U**(1/shape)`` boost for shape < 1.
    """
    shape = clamp(np.asarray(shape, dtype=float))
    rate = clamp(np.asarray(rate, dtype=float))
    if size is None:
        size = np.broadcast(shape, rate).shape
    eps = rng.standard_gamma(shape, size=size)
    return clamp_factor(eps / rate)


def kl_gamma(post_shape, post_rate, prior_shape, prior_rate):
    """KL(Gamma(post) || Gamma(prior)) in closed form."""
    a, b = np.asarray(post_shape, float), np.asarray(post_rate, float)
    a0, b0 = np.asarray(prior_shape, float), np.asarray(prior_rate, float)
    kl = ((a - a0) * special.digamma(a) - special.gammaln(a) + special.gammaln(a0)
          + a0 * (np.log(b) - np.log(b0)) + a * (b0 - b) / b)
    return _out(kl)


def kl_grad_beta(post_shape, post_rate, prior_shape, prior_rate):
    """d KL / d post_rate = prior_shape / post_rate - prior_rate * post_shape / post_rate**2."""
    a, b = np.asarray(post_shape, float), np.asarray(post_rate, float)
    return _out(prior_shape / b - prior_rate * a / b**2)


def kl_grad_alpha(post_shape, post_rate, prior_shape, prior_rate):
    """d KL / d post_shape = (post_shape - prior_shape) * trigamma(post_shape) + prior_rate / post_rate - 1."""
    a, b = np.asarray(post_shape, float), np.asarray(post_rate, float)
    return _out((a - prior_shape) * special.polygamma(1, a) + prior_rate / b - 1.0)


def std_gamma_cdf(eps, alpha):
    """Regularized lower incomplete gamma P(alpha, eps), the Gamma(alpha, 1) CDF."""
    return _out(special.gammainc(np.asarray(alpha, float), np.asarray(eps, float)))


def std_gamma_logpdf(eps, alpha):
    eps, alpha = np.asarray(eps, float), np.asarray(alpha, float)
    return _out((alpha - 1.0) * np.log(eps) - eps - special.gammaln(alpha))


def _log_tail(alpha, eps, upper):
    tail = np.where(upper, special.gammaincc(alpha, eps), special.gammainc(alpha, eps))
    with np.errstate(divide="ignore"):
        return np.log(tail)


def deps_dalpha(eps, alpha):
    """Implicit reparameterization gradient d eps / d alpha of a Gamma(alpha, 1) draw.

    Holding the CDF level ``u = P(eps; alpha)`` fixed, ``d eps/d alpha =
    -(dP/d alpha) / p(eps; alpha)``. ``dP/d alpha`` is a central difference in
    alpha with step ``1e-4 * max(1, alpha)``, taken on the log of whichever
    tail (lower P or upper 1 - P) is below one half so that neither
    cancellation nor underflow swamps the difference. Where that tail
    underflows, the leading-order asymptotics are used instead.
    """
    eps = np.asarray(eps, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    eps, alpha = np.broadcast_arrays(eps, alpha)
    h = np.minimum(1e-4 * np.maximum(1.0, alpha), 0.5 * alpha)

    with np.errstate(all="ignore"):
        p_lower = special.gammainc(alpha, eps)
        upper = p_lower > 0.5
        dlog = (_log_tail(alpha + h, eps, upper) - _log_tail(alpha - h, eps, upper)) / (2.0 * h)
        log_tail = _log_tail(alpha, eps, upper)
        log_pdf = (alpha - 1.0) * np.log(eps) - eps - special.gammaln(alpha)
        ratio = np.exp(log_tail - log_pdf)  # tail mass / density
        # lower tail: dP/da = P dlogP/da ; upper tail: dP/da = -Q dlogQ/da
        out = np.where(upper, ratio * dlog, -ratio * dlog)

        bad = ~np.isfinite(out)
        if np.any(bad):
            e, a = eps[bad], alpha[bad]
            lower_fallback = -(e / a) * (np.log(e) - special.digamma(a + 1.0))
            upper_fallback = np.log(e) - special.digamma(a)
            out = out.copy()
            out[bad] = np.where(upper[bad], upper_fallback, lower_fallback)
    # eps -> 0 is the lower limit of the support, where the derivative vanishes
    out = np.where(eps > 0, out, 0.0)
    return _out(out)
