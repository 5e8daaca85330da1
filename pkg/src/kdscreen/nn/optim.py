"""Adam with bias-corrected moments."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self, prefix="opt") -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array(self.step, dtype=np.int64)}
        for k, a in self.m.items():
            out[f"{prefix}.m.{k}"] = a
        for k, a in self.v.items():
            out[f"{prefix}.v.{k}"] = a
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, prefix="opt") -> "AdamState":
        st = cls(int(np.asarray(arrays.get(f"{prefix}.step", 0)).reshape(-1)[0]))
        for k, a in arrays.items():
            if k.startswith(f"{prefix}.m."):
                st.m[k[len(prefix) + 3:]] = np.array(a)
            elif k.startswith(f"{prefix}.v."):
                st.v[k[len(prefix) + 3:]] = np.array(a)
        return st


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update of ``params`` (name -> array, updated in place)."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, parameters, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.parameters = parameters
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self):
        params, grads = {}, {}
        for name, p in self.parameters.trainable():
            if p.grad is None:
                continue
            params[name] = p.data
            grads[name] = p.grad
        adam_step(params, grads, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self):
        self.parameters.zero_grad()
