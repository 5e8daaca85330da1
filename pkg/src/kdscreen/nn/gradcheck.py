"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

import numpy as np

from .losses import bce_with_logits
from .models import Classifier, ModelSpec
from .tensor import no_grad


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def check_model(model: Classifier, X, y, eps=1e-5, loss_fn=bce_with_logits, only=None) -> dict[str, float]:
    """Max relative error per trainable parameter between backprop and central differences."""
    model.parameters.zero_grad()
    loss = loss_fn(model(X), y)
    loss.backward()
    errors = {}
    for name, p in model.parameters.trainable():
        if only is not None and name not in only:
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn(model(X), y).data
                flat[i] = orig - eps
                down = loss_fn(model(X), y).data
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        errors[name] = float(_rel_err(analytic, numeric).max())
    return errors


def grad_check(spec: ModelSpec, seed: int = 0, window: int = 10, batch: int = 2, eps: float = 1e-5) -> float:
    """Max relative gradient error of a freshly initialized model on a random batch."""
    rng = np.random.default_rng(seed)
    model = Classifier(spec)
    X = rng.standard_normal((batch, window, 4))
    y = np.arange(batch) % 2
    return max(check_model(model, X, y, eps).values())
