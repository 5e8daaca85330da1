"""A small reverse-mode differentiation engine over float64 numpy arrays.

Each op computes its value eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients. The op set
is what the six classifiers need; recurrent layers, convolutions and layer
normalization are fused ops with hand-written backward passes.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that is not part of a graph")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(x.data)
        if _needs_add_at(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(x.data[idx], (x,), back)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` as one node; ``w`` is (in, out)."""
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if w.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(y, parents, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def back(g):
        gg = gb = gx = None
        flat_g = g.reshape(-1, n)
        if gamma.requires_grad:
            gg = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        if beta.requires_grad:
            gb = flat_g.sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv / n * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), back)


# ---------------------------------------------------------------- convolution


def _pad_amounts(k: int, dilation: int, padding: str) -> tuple[int, int]:
    total = dilation * (k - 1)
    if padding == "causal":
        return total, 0
    if padding in ("same", "circular"):
        left = total // 2
        return left, total - left
    raise ValueError(f"unknown padding {padding!r}")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, dilation: int = 1, padding: str = "same") -> Tensor:
    """Stride-1 temporal convolution keeping the sequence length.

    x: (B, T, Cin); w: (K, Cin, Cout); b: (Cout,). ``padding`` is ``same``
    (zeros both sides), ``circular`` (wrap-around) or ``causal`` (zeros on the
    left only, so output t sees inputs <= t).
    """
    B, T, Cin = x.shape
    K, _, Cout = w.shape
    left, right = _pad_amounts(K, dilation, padding)
    if padding == "circular":
        idx = np.arange(-left, T + right) % T
        xp = x.data[:, idx, :]
    else:
        xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    # gather all taps at once: (B, T, K*Cin) @ (K*Cin, Cout)
    taps = np.concatenate([xp[:, k * dilation:k * dilation + T, :] for k in range(K)], axis=2)
    wf = w.data.reshape(K * Cin, Cout)
    y = taps @ wf
    if b is not None:
        y = y + b.data

    def back(g):
        g2 = g.reshape(-1, Cout)
        gw = (taps.reshape(-1, K * Cin).T @ g2).reshape(K, Cin, Cout) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gtaps = (g @ wf.T).reshape(B, T, K, Cin)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k * dilation:k * dilation + T, :] += gtaps[:, :, k, :]
            if padding == "circular":
                gx = np.zeros_like(x.data)
                np.add.at(gx, (slice(None), idx, slice(None)), gxp)
            else:
                gx = gxp[:, left:left + T, :]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(y, parents, back)


# ---------------------------------------------------------------- recurrences


def gru(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """GRU over the whole sequence from a zero state; returns all states (B, T, H).

    Gate layout in the 3H axis is (reset, update, new)::

        r = sigmoid(x Wr + br + h Ur + cr)
        z = sigmoid(x Wz + bz + h Uz + cz)
        n = tanh(x Wn + bn + r * (h Un + cn))
        h' = (1 - z) * n + z * h
    """
    B, T, _ = x.shape
    H = w_hh.shape[0]
    xi = x.data @ w_ih.data + b_ih.data  # (B, T, 3H)
    hs = np.empty((B, T, H))
    r_s = np.empty((B, T, H))
    z_s = np.empty((B, T, H))
    n_s = np.empty((B, T, H))
    hn_s = np.empty((B, T, H))
    h = np.zeros((B, H))
    U = w_hh.data
    c = b_hh.data
    for t in range(T):
        gh = h @ U + c
        gi = xi[:, t]
        r = _sigmoid(gi[:, :H] + gh[:, :H])
        z = _sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        hs[:, t], r_s[:, t], z_s[:, t], n_s[:, t], hn_s[:, t] = h, r, z, n, gh[:, 2 * H:]

    def back(g):
        d_xi = np.empty((B, T, 3 * H))
        dU = np.zeros_like(U)
        dc = np.zeros_like(c)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H))
            r, z, n = r_s[:, t], z_s[:, t], n_s[:, t]
            dz = dh * (h_prev - n)
            dn_pre = dh * (1.0 - z) * (1.0 - n * n)
            dr_pre = dn_pre * hn_s[:, t] * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
            d_xi[:, t] = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
            dU += h_prev.T @ dgh
            dc += dgh.sum(axis=0)
            dh = dh * z + dgh @ U.T
        flat = d_xi.reshape(-1, 3 * H)
        gx = d_xi @ w_ih.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ flat if w_ih.requires_grad else None
        gb = flat.sum(axis=0) if b_ih.requires_grad else None
        return gx, gw, dU, gb, dc

    return _make(hs, (x, w_ih, w_hh, b_ih, b_hh), back)


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """LSTM over the whole sequence from zero state; returns all hidden states.

    Gate layout in the 4H axis is (input, forget, cell, output).
    """
    B, T, _ = x.shape
    H = w_hh.shape[0]
    xi = x.data @ w_ih.data + b.data
    U = w_hh.data
    hs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))  # activated i, f, g, o
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        pre = xi[:, t] + h @ U
        i = _sigmoid(pre[:, :H])
        f = _sigmoid(pre[:, H:2 * H])
        gg = np.tanh(pre[:, 2 * H:3 * H])
        o = _sigmoid(pre[:, 3 * H:])
        c = f * c + i * gg
        h = o * np.tanh(c)
        hs[:, t], cs[:, t] = h, c
        gates[:, t, :H], gates[:, t, H:2 * H], gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = i, f, gg, o

    def back(g):
        d_pre = np.empty((B, T, 4 * H))
        dU = np.zeros_like(U)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            i, f, gg, o = (gates[:, t, k * H:(k + 1) * H] for k in range(4))
            c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, H))
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H))
            tc = np.tanh(cs[:, t])
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            dp = np.concatenate([
                dc * gg * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                do * o * (1.0 - o),
            ], axis=1)
            d_pre[:, t] = dp
            dU += h_prev.T @ dp
            dc = dc * f
            dh = dp @ U.T
        flat = d_pre.reshape(-1, 4 * H)
        gx = d_pre @ w_ih.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ flat if w_ih.requires_grad else None
        gb = flat.sum(axis=0) if b.requires_grad else None
        return gx, gw, dU, gb

    return _make(hs, (x, w_ih, w_hh, b), back)
