"""MLP encoders that map an entity's observations to a Gamma shape or rate.

Each encoder is applied row-wise to the entity's input batch (one row per
observed entry: the k-th factor of every other mode followed by the count)
and the activated, reweighted outputs are summed. The bank holds one shape
and one rate encoder per (mode, factor) pair.

Forward and backward passes are segment-aware: a single call can evaluate
every entity of a mode at once, with ``segments[i]`` naming the entity that
row ``i`` belongs to. ``forward_entity``/``backward_entity`` are the
single-entity special case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .math_kernel import FLOOR, activate, activate_grad

__all__ = [
    "PARAM_KINDS",
    "ColdEntityError",
    "EncoderNet",
    "EncoderBank",
    "ForwardCache",
    "init_bank",
    "forward_rows",
    "backward_rows",
    "forward_entity",
    "backward_entity",
]

PARAM_KINDS = ("shape", "rate")


class ColdEntityError(DataError):
    """The entity has no observations, so its encoder sum is empty."""


@dataclass
class EncoderNet:
    """One encoder: ``L`` hidden layers plus a scalar output layer.

    ``weights[l]`` has shape ``(d_in, d_out)``; ``out_weights`` has shape
    ``(d_L,)`` where ``d_L`` is the input width when there are no hidden
    layers. ``out_bias`` is a 0-d array so that it can be updated in place.
    """

    weights: list
    biases: list
    out_weights: np.ndarray
    out_bias: np.ndarray
    hidden_activation: str = "softplus"
    output_activation: str = "softplus"

    @property
    def n_hidden(self):
        return len(self.weights)

    @property
    def input_width(self):
        return self.weights[0].shape[0] if self.weights else self.out_weights.shape[0]

    def parameters(self):
        """All parameter arrays in a fixed order (hidden W, hidden b, output w, output b)."""
        return [*self.weights, *self.biases, self.out_weights, self.out_bias]

    def zeros_like(self):
        return EncoderNet(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            np.zeros_like(self.out_weights),
            np.zeros_like(self.out_bias),
            self.hidden_activation,
            self.output_activation,
        )

    def copy(self):
        return EncoderNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.out_weights.copy(),
            self.out_bias.copy(),
            self.hidden_activation,
            self.output_activation,
        )


@dataclass
class EncoderBank:
    """Encoders keyed by ``(mode, factor, kind)`` with kind in ``PARAM_KINDS``."""

    nets: dict = field(default_factory=dict)

    def net(self, mode, factor, kind):
        return self.nets[(mode, factor, kind)]

    def keys(self):
        return sorted(self.nets, key=lambda key: (key[0], key[1], PARAM_KINDS.index(key[2])))

    def copy(self):
        return EncoderBank({key: net.copy() for key, net in self.nets.items()})

    def __len__(self):
        return len(self.nets)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list        # hidden pre-activations, one (N, d_l) array per layer
    acts: list       # hidden activations, one (N, d_l) array per layer
    out_pre: np.ndarray
    row_weights: np.ndarray
    segments: np.ndarray
    n_segments: int
    sums: np.ndarray  # unclamped per-segment sums


def init_bank(n_modes, K, layer_widths, rng, sigma_sq=1.0,
              hidden_activation="softplus", output_activation="softplus"):
    """Random bank: hidden layers ~ N(0, 1); output layers ~ N(0, s2) for shape nets, N(0.1, s2) for rate nets."""
    sd = float(np.sqrt(sigma_sq))
    widths = [n_modes, *[int(w) for w in layer_widths]]
    bank = EncoderBank()
    for m in range(n_modes):
        for k in range(K):
            for kind in PARAM_KINDS:
                weights = [rng.standard_normal((widths[l], widths[l + 1]))
                           for l in range(len(widths) - 1)]
                biases = [rng.standard_normal(widths[l + 1]) for l in range(len(widths) - 1)]
                mean = 0.0 if kind == "shape" else 0.1
                out_w = rng.normal(mean, sd, size=widths[-1])
                out_b = np.array(rng.normal(mean, sd))
                bank.nets[(m, k, kind)] = EncoderNet(
                    weights, biases, out_w, out_b, hidden_activation, output_activation
                )
    return bank


def forward_rows(net, inputs, row_weights, segments=None, n_segments=None):
    """Per-segment sums of ``row_weight * h(output affine of the hidden stack)``.

    Returns ``(params, cache)`` where ``params`` is floored at ``FLOOR``.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.input_width:
        raise DataError(f"input rows must have width {net.input_width}")
    n = x.shape[0]
    if segments is None:
        segments = np.zeros(n, dtype=np.int64)
        n_segments = 1
    row_weights = np.broadcast_to(np.asarray(row_weights, dtype=float), (n,))

    pre, acts = [], []
    f = x
    for W, b in zip(net.weights, net.biases):
        a = f @ W + b
        f = activate(net.hidden_activation, a)
        pre.append(a)
        acts.append(f)
    out_pre = f @ net.out_weights + net.out_bias
    contrib = row_weights * activate(net.output_activation, out_pre)
    sums = np.bincount(segments, weights=contrib, minlength=n_segments)
    cache = ForwardCache(x, pre, acts, out_pre, row_weights, segments, n_segments, sums)
    return np.maximum(sums, FLOOR), cache


def backward_rows(net, cache, upstream):
    """Gradient of ``sum_s upstream[s] * param_s`` w.r.t. every parameter of ``net``.

    The floor applied in ``forward_rows`` is treated as the identity here, so a
    segment that fell below it still receives gradient and can recover.
    """
    upstream = np.broadcast_to(np.asarray(upstream, dtype=float), (cache.n_segments,))
    if len(cache.acts) != net.n_hidden or cache.inputs.shape[1] != net.input_width:
        raise DataError("cache does not match network")
    g = upstream[cache.segments] * cache.row_weights
    g = g * activate_grad(net.output_activation, cache.out_pre)

    grad = net.zeros_like()
    last = cache.acts[-1] if cache.acts else cache.inputs
    grad.out_weights = last.T @ g
    grad.out_bias = np.array(g.sum())
    delta = np.outer(g, net.out_weights)
    for l in range(net.n_hidden - 1, -1, -1):
        dpre = delta * activate_grad(net.hidden_activation, cache.pre[l])
        below = cache.acts[l - 1] if l > 0 else cache.inputs
        grad.weights[l] = below.T @ dpre
        grad.biases[l] = dpre.sum(axis=0)
        if l > 0:
            delta = dpre @ net.weights[l].T
    return grad


def forward_entity(net, batch, weights):
    """Posterior parameter of a single entity from its input batch."""
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ColdEntityError("entity has no observations (cold entity)")
    params, cache = forward_rows(net, batch, weights)
    return float(params[0]), cache


def backward_entity(net, cache, upstream):
    if cache.n_segments != 1:
        raise DataError("cache holds more than one entity")
    return backward_rows(net, cache, np.array([upstream], dtype=float))
