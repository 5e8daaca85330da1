"""The six window classifiers (GRU, LSTM, GRU-FCN, LSTM-FCN, TCN, transformer)."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

N_INPUTS = 4


class Arch(str, Enum):
    GRU = "gru"
    LSTM = "lstm"
    GRU_FCN = "gru_fcn"
    LSTM_FCN = "lstm_fcn"
    TCN = "tcn"
    TRANSFORMER = "transformer"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and size. ``hidden`` is the recurrent state size, the TCN
    channel count and the transformer model width."""

    arch: Arch
    hidden: int = 32
    depth: int | None = None  # rnn layers / tcn blocks / encoder layers
    fcn_channels: tuple[int, int, int] = (32, 64, 32)
    fcn_kernels: tuple[int, int, int] = (8, 5, 3)
    fcn_padding: str = "same"
    tcn_kernel: int = 3
    heads: int = 2
    ff_width: int | None = None
    positional: bool = True
    head_init: str = "glorot"  # or "zeros"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "fcn_channels", tuple(self.fcn_channels))
        object.__setattr__(self, "fcn_kernels", tuple(self.fcn_kernels))
        if self.depth is None:
            default = {Arch.TCN: 4, Arch.TRANSFORMER: 2}.get(self.arch, 1)
            object.__setattr__(self, "depth", default)
        if self.ff_width is None:
            object.__setattr__(self, "ff_width", 2 * self.hidden)
        if self.hidden < 1 or self.depth < 1:
            raise ValueError("hidden and depth must be >= 1")
        if self.arch is Arch.TRANSFORMER and self.hidden % self.heads:
            raise ValueError("transformer width must be divisible by the number of heads")
        if self.head_init not in ("glorot", "zeros"):
            raise ValueError("head_init must be 'glorot' or 'zeros'")

    def to_dict(self):
        d = asdict(self)
        d["arch"] = self.arch.value
        d["fcn_channels"] = list(self.fcn_channels)
        d["fcn_kernels"] = list(self.fcn_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------- modules


class Module:
    """Parameter container; parameters and submodules keep insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._modules: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for n, m in self._modules.items():
            yield from m.named_parameters(prefix + n + ".")


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, zeros=False, bias=True):
        super().__init__()
        w = np.zeros((n_in, n_out)) if zeros else _glorot(rng, n_in, n_out, (n_in, n_out))
        self.w = self.param("weight", w)
        self.b = self.param("bias", np.zeros(n_out)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, n):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(n))
        self.beta = self.param("beta", np.zeros(n))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class GRULayer(Module):
    def __init__(self, rng, n_in, hidden):
        super().__init__()
        self.w_ih = self.param("w_ih", _glorot(rng, n_in, hidden, (n_in, 3 * hidden)))
        self.w_hh = self.param("w_hh", _glorot(rng, hidden, hidden, (hidden, 3 * hidden)))
        self.b_ih = self.param("b_ih", np.zeros(3 * hidden))
        self.b_hh = self.param("b_hh", np.zeros(3 * hidden))

    def __call__(self, x):
        return T.gru(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class LSTMLayer(Module):
    def __init__(self, rng, n_in, hidden):
        super().__init__()
        self.w_ih = self.param("w_ih", _glorot(rng, n_in, hidden, (n_in, 4 * hidden)))
        self.w_hh = self.param("w_hh", _glorot(rng, hidden, hidden, (hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate starts open
        self.b = self.param("bias", b)

    def __call__(self, x):
        return T.lstm(x, self.w_ih, self.w_hh, self.b)


class Recurrent(Module):
    """Stacked GRU/LSTM layers; output is the last hidden state (B, H)."""

    def __init__(self, rng, kind, n_in, hidden, depth):
        super().__init__()
        cls = GRULayer if kind == "gru" else LSTMLayer
        self.layers = [
            self.child(f"layer{i}", cls(rng, n_in if i == 0 else hidden, hidden)) for i in range(depth)
        ]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x[:, -1, :]


class ConvBlock(Module):
    def __init__(self, rng, c_in, c_out, k, dilation=1, padding="same"):
        super().__init__()
        self.k, self.dilation, self.padding = k, dilation, padding
        self.w = self.param("weight", _glorot(rng, c_in * k, c_out * k, (k, c_in, c_out)))
        self.b = self.param("bias", np.zeros(c_out))
        self.norm = self.child("norm", LayerNorm(c_out))

    def __call__(self, x):
        y = T.conv1d(x, self.w, self.b, self.dilation, self.padding)
        return T.relu(self.norm(y))


class FCN(Module):
    """Three conv blocks then global average pooling over time -> (B, C_last)."""

    def __init__(self, rng, n_in, channels, kernels, padding="same"):
        super().__init__()
        ins = (n_in,) + tuple(channels[:-1])
        self.blocks = [
            self.child(f"block{i}", ConvBlock(rng, ci, co, k, padding=padding))
            for i, (ci, co, k) in enumerate(zip(ins, channels, kernels))
        ]

    def features(self, x):
        for b in self.blocks:
            x = b(x)
        return x

    def __call__(self, x):
        return T.mean(self.features(x), axis=1)


class TCNBlock(Module):
    def __init__(self, rng, c_in, c_out, k, dilation):
        super().__init__()
        self.conv1 = self.child("conv1", ConvBlock(rng, c_in, c_out, k, dilation, "causal"))
        self.conv2 = self.child("conv2", ConvBlock(rng, c_out, c_out, k, dilation, "causal"))
        self.proj = self.child("proj", Linear(rng, c_in, c_out)) if c_in != c_out else None

    def __call__(self, x):
        res = self.proj(x) if self.proj is not None else x
        return T.relu(self.conv2(self.conv1(x)) + res)


class TCN(Module):
    def __init__(self, rng, n_in, channels, depth, k):
        super().__init__()
        self.blocks = [
            self.child(f"block{i}", TCNBlock(rng, n_in if i == 0 else channels, channels, k, 2 ** i))
            for i in range(depth)
        ]

    def features(self, x):
        for b in self.blocks:
            x = b(x)
        return x

    def __call__(self, x):
        return T.mean(self.features(x), axis=1)


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class EncoderLayer(Module):
    """Post-norm encoder layer: x = LN(x + MHA(x)); x = LN(x + FF(x))."""

    def __init__(self, rng, width, heads, ff):
        super().__init__()
        self.heads = heads
        self.q = self.child("q", Linear(rng, width, width))
        # no key bias: it shifts each query's scores by a constant, which softmax ignores
        self.k = self.child("k", Linear(rng, width, width, bias=False))
        self.v = self.child("v", Linear(rng, width, width))
        self.out = self.child("out", Linear(rng, width, width))
        self.norm1 = self.child("norm1", LayerNorm(width))
        self.ff1 = self.child("ff1", Linear(rng, width, ff))
        self.ff2 = self.child("ff2", Linear(rng, ff, width))
        self.norm2 = self.child("norm2", LayerNorm(width))

    def attention(self, x):
        B, L, D = x.shape
        h, dh = self.heads, D // self.heads
        q, k, v = (proj(x).reshape(B, L, h, dh).transpose(0, 2, 1, 3) for proj in (self.q, self.k, self.v))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        att = T.softmax(scores, axis=-1)
        ctx = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, D)
        return self.out(ctx)

    def __call__(self, x):
        x = self.norm1(x + self.attention(x))
        return self.norm2(x + self.ff2(T.relu(self.ff1(x))))


class Transformer(Module):
    def __init__(self, rng, n_in, width, depth, heads, ff, positional=True):
        super().__init__()
        self.positional = positional
        self.width = width
        self.embed = self.child("embed", Linear(rng, n_in, width))
        self.layers = [self.child(f"layer{i}", EncoderLayer(rng, width, heads, ff)) for i in range(depth)]

    def features(self, x):
        z = self.embed(x)
        if self.positional:
            z = z + sinusoidal_encoding(x.shape[1], self.width)
        for layer in self.layers:
            z = layer(z)
        return z

    def __call__(self, x):
        return T.mean(self.features(x), axis=1)


class Classifier(Module):
    """Backbone(s) -> concatenated features -> affine head producing one logit."""

    HEAD = "head."

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        a = spec.arch
        self.rnn = self.fcn = self.tcn = self.transformer = None
        width = 0
        if a in (Arch.GRU, Arch.LSTM, Arch.GRU_FCN, Arch.LSTM_FCN):
            kind = "gru" if a in (Arch.GRU, Arch.GRU_FCN) else "lstm"
            self.rnn = self.child("rnn", Recurrent(rng, kind, N_INPUTS, spec.hidden, spec.depth))
            width += spec.hidden
        if a in (Arch.GRU_FCN, Arch.LSTM_FCN):
            self.fcn = self.child("fcn", FCN(rng, N_INPUTS, spec.fcn_channels, spec.fcn_kernels, spec.fcn_padding))
            width += spec.fcn_channels[-1]
        if a is Arch.TCN:
            self.tcn = self.child("tcn", TCN(rng, N_INPUTS, spec.hidden, spec.depth, spec.tcn_kernel))
            width += spec.hidden
        if a is Arch.TRANSFORMER:
            self.transformer = self.child("transformer", Transformer(
                rng, N_INPUTS, spec.hidden, spec.depth, spec.heads, spec.ff_width, spec.positional))
            width += spec.hidden
        self.head = self.child("head", Linear(rng, width, 1, zeros=spec.head_init == "zeros"))
        self.parameters = ParameterSet(dict(self.named_parameters()), head_prefix=self.HEAD)

    def features(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != N_INPUTS or x.shape[1] < 1:
            raise ValueError(f"expected a (B, W, {N_INPUTS}) batch with W >= 1, got {x.shape}")
        parts = []
        if self.rnn is not None:
            parts.append(self.rnn(x))
        if self.fcn is not None:
            parts.append(self.fcn(x))
        if self.tcn is not None:
            parts.append(self.tcn(x))
        if self.transformer is not None:
            parts.append(self.transformer(x))
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def __call__(self, x) -> Tensor:
        """(B, W, 4) -> (B,) logits."""
        return self.head(self.features(x)).reshape(-1)

    forward = __call__

    def predict_logits(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, X.shape[0], batch_size):
                out.append(self(X[i:i + batch_size]).data)
        return np.concatenate(out) if out else np.zeros(0)

    def predict_proba(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return T._sigmoid(self.predict_logits(X, batch_size))


class ParameterSet:
    """Named parameters in a stable order with per-parameter trainable flags."""

    def __init__(self, params: dict[str, Tensor], head_prefix: str = "head."):
        self._params = params
        self.head_prefix = head_prefix

    def __iter__(self):
        return iter(self._params.items())

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].requires_grad = flag

    def freeze_backbone(self) -> None:
        for n, p in self._params.items():
            p.requires_grad = n.startswith(self.head_prefix)

    def unfreeze(self) -> None:
        for p in self._params.values():
            p.requires_grad = True

    def is_head(self, name: str) -> bool:
        return name.startswith(self.head_prefix)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) ^ set(state)
            raise ValueError(f"parameter names differ: {sorted(missing)[:5]}")
        for n, p in self._params.items():
            if state[n].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {p.data.shape}")
            p.data = np.array(state[n], dtype=np.float64)

    def digest(self, backbone_only: bool = False) -> str:
        h = hashlib.sha256()
        for n, p in self._params.items():
            if backbone_only and self.is_head(n):
                continue
            h.update(n.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))


def build_model(spec: ModelSpec) -> Classifier:
    return Classifier(spec)
