"""Binary classification losses on logits, each a single graph node."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, _sigmoid, as_tensor


def _softplus(x):
    # log(1 + exp(x)) without overflow
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _signed(labels, n):
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size != n:
        raise ValueError(f"{y.size} labels for {n} logits")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return y, 2.0 * y - 1.0


def bce_with_logits(logits, labels) -> Tensor:
    """Mean of log(1 + exp(-s z)) with s = 2y - 1."""
    z = as_tensor(logits)
    y, s = _signed(labels, z.data.size)
    zf = z.data.reshape(-1)
    n = zf.size
    loss = _softplus(-s * zf).mean()

    def back(g):
        return ((g * (_sigmoid(zf) - y) / n).reshape(z.shape),)

    return _make(loss, (z,), back)


def focal_loss(logits, labels, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean of -a_t (1 - p_t)^gamma log p_t, a_t = alpha for y=1 and 1 - alpha for y=0."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = as_tensor(logits)
    y, s = _signed(labels, z.data.size)
    zf = z.data.reshape(-1)
    n = zf.size
    sz = s * zf
    log_pt = -_softplus(-sz)
    pt = _sigmoid(sz)
    q = _sigmoid(-sz)  # 1 - p_t without cancellation
    a_t = np.where(y == 1, alpha, 1.0 - alpha)
    mod = q ** gamma
    loss = (-a_t * mod * log_pt).mean()

    def back(g):
        # d/dz = s * a_t * q^gamma * (gamma * p_t * log p_t - q)
        if gamma == 0:
            d = -q
        else:
            d = gamma * pt * log_pt - q
        return ((g * s * a_t * mod * d / n).reshape(z.shape),)

    return _make(loss, (z,), back)
