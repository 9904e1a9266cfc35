"""Module containers and layers."""
from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import DTYPE, Tensor


class Module:
    """Base class: sub-modules and parameters are discovered from attributes.

    Buffers (non-trainable arrays such as BN running statistics) are listed
    by name in ``_buffers``.  Forward hooks receive ``(module, inputs,
    output)`` and are used by calibration to capture unit inputs/outputs.
    """

    _buffers: tuple = ()

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        for hook in getattr(self, "_hooks", ()):
            hook(self, args, out)
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def add_hook(self, fn: Callable) -> Callable:
        if "_hooks" not in self.__dict__:
            self._hooks = []
        self._hooks.append(fn)
        return fn

    def remove_hook(self, fn: Callable) -> None:
        self._hooks.remove(fn)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self._children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for mname, mod in self.named_modules(prefix):
            for key, val in vars(mod).items():
                if isinstance(val, Tensor) and not key.startswith("_"):
                    yield (f"{mname}.{key}" if mname else key), val

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for mname, mod in self.named_modules():
            for key in mod._buffers:
                state[f"{mname}.{key}" if mname else key] = getattr(mod, key)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = (set(params) | set(self._buffer_names())) - set(state)
        if missing:
            raise KeyError(f"missing keys in state: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = np.array(state[name], dtype=DTYPE)
        for mname, mod in self.named_modules():
            for key in mod._buffers:
                full = f"{mname}.{key}" if mname else key
                setattr(mod, key, np.array(state[full], dtype=DTYPE))

    def _buffer_names(self) -> list[str]:
        return [f"{m}.{k}" if m else k for m, mod in self.named_modules() for k in mod._buffers]

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    """Affine layer with optional fake-quantizers on weight and input."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(in_features)
        self.weight = _uniform(rng, (out_features, in_features), bound)
        self.bias = _uniform(rng, (out_features,), bound) if bias else None
        self.weight_quant = None
        self.act_quant = None

    def forward(self, x: Tensor) -> Tensor:
        if self.act_quant is not None:
            x = self.act_quant(x)
        w = self.weight_quant(self.weight) if self.weight_quant is not None else self.weight
        return F.linear(x, w, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        bound = 1.0 / math.sqrt(cin * k * k)
        self.weight = _uniform(rng, (cout, cin, k, k), bound)
        self.bias = _uniform(rng, (cout,), bound) if bias else None
        self.stride = stride
        self.padding = padding
        self.weight_quant = None
        self.act_quant = None

    def forward(self, x: Tensor) -> Tensor:
        if self.act_quant is not None:
            x = self.act_quant(x)
        w = self.weight_quant(self.weight) if self.weight_quant is not None else self.weight
        return F.conv2d(x, w, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """BN with modes ``train`` (update running stats), ``eval`` and ``stats``.

    ``stats`` normalizes with batch statistics without touching the running
    buffers and keeps the differentiable batch mean/variance in
    ``last_stats`` for statistic-matching losses.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps
        self.mode = "eval"
        self.last_stats = None

    def forward(self, x: Tensor) -> Tensor:
        out, mu, var = F.batch_norm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                                      training=self.mode != "eval", momentum=self.momentum,
                                      eps=self.eps, update_stats=self.mode == "train")
        self.last_stats = (mu, var) if self.mode == "stats" else None
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.weight = Tensor(rng.normal(0.0, 0.02, size=(num, dim)), requires_grad=True)

    def forward(self, idx: np.ndarray) -> Tensor:
        return ag.take_rows(self.weight, idx)


_MASK_VALUE = -1e4


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, causal: bool = False):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.last_attn: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        H = self.heads
        dh = D // H
        qkv = self.qkv(x).reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        if self.causal:
            mask = np.triu(np.full((T, T), _MASK_VALUE, dtype=DTYPE), k=1)
            scores = scores + mask
        attn = F.softmax(scores, axis=-1)
        self.last_attn = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class AttentionBlock(Module):
    """Pre-LN transformer block: x + attn(ln1(x)), then x + mlp(ln2(x))."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int, rng: np.random.Generator, causal: bool = False):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, causal=causal)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_hidden, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))

    @property
    def attention_maps(self) -> np.ndarray | None:
        return self.attn.last_attn


def attention_block(x: Tensor, block: AttentionBlock) -> tuple[Tensor, np.ndarray]:
    """Run ``block`` on ``x`` and return its output with the per-head attention maps."""
    out = block(x)
    return out, block.attention_maps
