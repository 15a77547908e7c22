"""Down-weighting of entries whose count sits near the most frequent value."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ReweightParams:
    """``theta`` is the slope, ``eta`` the intercept, ``ybar`` the most frequent count."""

    theta: float
    eta: float
    ybar: int

    def __post_init__(self):
        if not self.theta > 0 or not self.eta > 0:
            raise DataError("reweighting needs theta > 0 and eta > 0")


def delta(y, p):
    """Weight ``1 / (1 + eta * exp(-theta * (y - ybar)**2))``, in ``(1/(1+eta), 1)``."""
    d2 = (np.asarray(y, dtype=float) - p.ybar) ** 2
    w = 1.0 / (1.0 + p.eta * np.exp(-p.theta * d2))
    return w.item() if np.ndim(w) == 0 else w


def row_weights(y, p):
    """Per-entry weights; ``p=None`` means reweighting is switched off (all ones)."""
    y = np.asarray(y)
    if p is None:
        return np.ones(y.shape, dtype=float)
    return np.asarray(delta(y, p), dtype=float).reshape(y.shape)
