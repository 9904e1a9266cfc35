"""Uniform asymmetric quantization, OMSE initialization and fake-quant with STE.

Codes follow ``q = clamp(round(x / s) + z, 0, 2^k - 1)`` and values are
recovered as ``x_hat = s * (q - z)``.  Rounding is half-away-from-zero.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autograd import DTYPE, Tensor, as_tensor

logger = logging.getLogger(__name__)

MIN_SCALE = 1e-8
OMSE_GRID = 100
TIE_RTOL = 1e-9


class DegenerateChannelWarning(UserWarning):
    """A channel had max == min; fallback parameters were used."""


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def qmax(bits: int) -> int:
    return (1 << bits) - 1


def _bshape(arr: np.ndarray, ndim: int, axis: int | None) -> np.ndarray:
    if axis is None:
        return arr.reshape(())
    shape = [1] * ndim
    shape[axis] = -1
    return arr.reshape(shape)


@dataclass
class QuantParams:
    """Scale/zero-point pair at per-tensor (``axis=None``) or per-channel granularity."""

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    axis: int | None = None

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int64))
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.bits <= 16:
            raise ValueError(f"unsupported bit-width {self.bits}")
        if self.scale.shape != self.zero_point.shape:
            raise ValueError("scale and zero-point granularity differ")
        if self.axis is None and self.scale.size != 1:
            raise ValueError("per-tensor params must hold a single scale")
        if np.any(~(self.scale > 0)):
            raise ValueError("scale must be positive")
        if np.any(self.zero_point < 0) or np.any(self.zero_point > qmax(self.bits)):
            raise ValueError("zero-point outside [0, 2^k - 1]")

    @property
    def granularity(self) -> str:
        return "per_tensor" if self.axis is None else f"per_channel({self.axis})"

    def check_against(self, shape: tuple) -> None:
        if self.axis is not None and shape[self.axis] != self.scale.size:
            raise ValueError(f"per-channel params have {self.scale.size} entries, axis extent is {shape[self.axis]}")

    def broadcast(self, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        return (_bshape(self.scale, ndim, self.axis),
                _bshape(self.zero_point.astype(np.float64), ndim, self.axis))


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams
    shape: tuple = field(default=())

    def __post_init__(self):
        self.shape = tuple(self.codes.shape)
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() > qmax(self.params.bits)):
            raise ValueError("code outside [0, 2^k - 1]")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _data64(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _codes(xd: np.ndarray, p: QuantParams) -> np.ndarray:
    s, z = p.broadcast(xd.ndim)
    return np.clip(round_half_away(xd.astype(np.float64) / s) + z, 0, qmax(p.bits))


def quantize(x, p: QuantParams) -> QuantizedTensor:
    xd = _data(x)
    if not np.all(np.isfinite(xd)):
        raise ValueError("cannot quantize non-finite values")
    p.check_against(xd.shape)
    return QuantizedTensor(_codes(xd, p).astype(np.int64), p)


def dequantize(q: QuantizedTensor) -> Tensor:
    s, z = q.params.broadcast(q.codes.ndim)
    return Tensor(s * (q.codes - z))


def fake_quant(x, p: QuantParams) -> Tensor:
    """dequantize(quantize(x)) with a straight-through gradient.

    The gradient passes unchanged where ``round(x/s) + z`` lies inside the
    code range and is zero where the clamp is active.
    """
    x = as_tensor(x)
    xd = x.data
    p.check_against(xd.shape)
    s, z = p.broadcast(xd.ndim)
    pre = round_half_away(xd.astype(np.float64) / s) + z
    inside = (pre >= 0) & (pre <= qmax(p.bits))
    out = s * (np.clip(pre, 0, qmax(p.bits)) - z)
    return Tensor._make(out, (x,), lambda g: (g * inside,), "fake_quant")


def fake_quant_mse(x: np.ndarray, p: QuantParams) -> float:
    xd = np.asarray(x, dtype=np.float64)
    s, z = p.broadcast(xd.ndim)
    xh = s * (np.clip(round_half_away(xd / s) + z, 0, qmax(p.bits)) - z)
    return float(((xd - xh) ** 2).mean())


# ---------------------------------------------------------------------------
# OMSE initialization
# ---------------------------------------------------------------------------


def params_from_range(lo: float, hi: float, bits: int) -> tuple[float, int]:
    """Scale and zero-point for the clip range [lo, hi] (zero always representable)."""
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    s = max((hi - lo) / qmax(bits), MIN_SCALE)
    z = int(np.clip(round_half_away(np.array(-lo / s)), 0, qmax(bits)))
    return s, z


def _omse_channel(v: np.ndarray, bits: int, grid: int) -> tuple[float, int, float, bool]:
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return MIN_SCALE, 1 << (bits - 1), float("nan"), True
    qm = qmax(bits)
    best = None
    for i in range(grid):
        a = 1.0 - i / grid
        s, z = params_from_range(a * lo, a * hi, bits)
        xh = s * (np.clip(round_half_away(v / s) + z, 0, qm) - z)
        err = float(((v - xh) ** 2).mean())
        # errors equal up to float noise count as ties; the earlier (larger) scale stays
        if best is None or err < best[2] * (1.0 - TIE_RTOL):
            best = (s, z, err)
    return best[0], best[1], best[2], False


def omse_init(x, bits: int, axis: int | None = None, grid: int = OMSE_GRID) -> QuantParams:
    """MSE-optimal (s, z) over ``grid`` linearly shrunk clip ranges.

    Candidate ``i`` clips to ``(1 - i/grid) * [min, max]``; the candidate with
    the smallest quantization MSE wins, ties going to the larger scale.
    Channels with max == min get ``s = 1e-8`` and a centered zero-point,
    reported through :class:`DegenerateChannelWarning`.
    """
    xd = _data64(x)
    if axis is None:
        chans = [xd.reshape(-1)]
    else:
        axis = axis % xd.ndim
        moved = np.moveaxis(xd, axis, 0)
        chans = list(moved.reshape(moved.shape[0], -1))
    scales, zeros, degenerate = [], [], []
    for c, v in enumerate(chans):
        s, z, _, deg = _omse_channel(v, bits, grid)
        scales.append(s)
        zeros.append(z)
        if deg:
            degenerate.append(c)
    if degenerate:
        warnings.warn(f"constant channels {degenerate[:8]} use fallback quantization params",
                      DegenerateChannelWarning, stacklevel=2)
    return QuantParams(np.array(scales), np.array(zeros), bits, axis)


def minmax_params(x, bits: int, axis: int | None = None) -> QuantParams:
    xd = _data64(x)
    if axis is None:
        s, z = params_from_range(float(xd.min()), float(xd.max()), bits)
        return QuantParams(np.array([s]), np.array([z]), bits, None)
    axis = axis % xd.ndim
    moved = np.moveaxis(xd, axis, 0).reshape(xd.shape[axis], -1)
    pairs = [params_from_range(float(r.min()), float(r.max()), bits) for r in moved]
    return QuantParams(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]), bits, axis)


# ---------------------------------------------------------------------------
# activation granularity rule
# ---------------------------------------------------------------------------

LN_FOLDABLE_SUFFIXES = ("attn.qkv", "mlp.fc1")


@dataclass(frozen=True)
class Granularity:
    per_channel: bool
    axis: int | None = None


PER_TENSOR = Granularity(False, None)


def fold_layernorm_activation_quant(layer_id: str) -> Granularity:
    """Per-channel (feature axis) activation quantization for LayerNorm-fed projections.

    Only QKV and first-MLP projections of pre-LN transformer blocks qualify,
    since their per-channel input scales can be folded into the preceding
    LayerNorm affine.
    """
    if not layer_id.endswith(LN_FOLDABLE_SUFFIXES):
        raise ValueError(f"{layer_id} does not directly follow a LayerNorm")
    return Granularity(True, -1)


def activation_granularity(layer_id: str) -> Granularity:
    try:
        return fold_layernorm_activation_quant(layer_id)
    except ValueError:
        return PER_TENSOR


# ---------------------------------------------------------------------------
# learnable fake quantizer
# ---------------------------------------------------------------------------


def _rect_sigmoid(v: np.ndarray) -> np.ndarray:
    return np.clip(1.0 / (1.0 + np.exp(-v)) * 1.2 - 0.1, 0.0, 1.0)


class FakeQuantizer:
    """Fake-quantizer with a learnable scale.

    The clip minimum is fixed at initialization; the zero-point is re-derived
    from the current scale as ``clamp(round(-clip_min / s), 0, 2^k - 1)``.
    Gradients w.r.t. the scale use the straight-through rounding rule:
    ``round(x/s) - x/s`` inside the range, ``-z`` / ``2^k - 1 - z`` where the
    clamp is active.  With ``learn_rounding`` (weights only) the rounding
    offset of every element becomes a learnable rectified-sigmoid variable.
    """

    def __init__(self, params: QuantParams, learn_rounding: bool = False, weight: np.ndarray | None = None):
        self.bits = params.bits
        self.axis = params.axis
        self.scale = Tensor(params.scale.copy(), requires_grad=False)
        self.clip_min = -params.scale * params.zero_point
        self.enabled = True
        self.alpha: Tensor | None = None
        self.soft_rounding = False
        if learn_rounding:
            if weight is None:
                raise ValueError("learned rounding needs the weight tensor")
            s, _ = params.broadcast(weight.ndim)
            rest = weight / s - np.floor(weight / s)
            rest = np.clip(rest, 0.01, 0.99)
            # inverse of the rectified sigmoid
            self.alpha = Tensor(-np.log(1.2 / (rest + 0.1) - 1.0), requires_grad=False)
            self.soft_rounding = True

    @classmethod
    def from_data(cls, x, bits: int, axis: int | None, learn_rounding: bool = False) -> "FakeQuantizer":
        p = omse_init(x, bits, axis)
        return cls(p, learn_rounding=learn_rounding, weight=_data(x) if learn_rounding else None)

    def learnable(self) -> list[Tensor]:
        out = [self.scale]
        if self.alpha is not None:
            out.append(self.alpha)
        return out

    def zero_point(self) -> np.ndarray:
        s = self.scale.data.astype(np.float64)
        return np.clip(round_half_away(-self.clip_min / s), 0, qmax(self.bits))

    def params(self) -> QuantParams:
        return QuantParams(np.maximum(self.scale.data.astype(np.float64), MIN_SCALE),
                           self.zero_point().astype(np.int64), self.bits, self.axis)

    def reproject(self) -> None:
        self.scale.data = np.maximum(self.scale.data, MIN_SCALE).astype(DTYPE)

    def rounding_regularizer(self, beta: float) -> Tensor | None:
        """AdaRound-style penalty pushing soft rounding offsets to {0, 1}."""
        if self.alpha is None or not self.soft_rounding:
            return None
        a = self.alpha.data
        h = _rect_sigmoid(a)
        sig = 1.0 / (1.0 + np.exp(-a))
        inner = np.clip(np.abs(2 * h - 1), 1e-12, None)
        val = (1.0 - inner ** beta).sum()
        active = (h > 0) & (h < 1)

        def bw(g):
            dh = 1.2 * sig * (1 - sig) * active
            d = -beta * inner ** (beta - 1) * np.sign(2 * h - 1) * 2 * dh
            return (g * d,)

        return Tensor._make(np.array(val), (self.alpha,), bw, "round_reg")

    def harden(self) -> None:
        self.soft_rounding = False

    def rounding_offsets(self) -> np.ndarray:
        """Hard 0/1 round-up decision per element (learned rounding only)."""
        if self.alpha is None:
            raise ValueError("quantizer does not learn rounding")
        return (_rect_sigmoid(self.alpha.data.astype(np.float64)) >= 0.5).astype(np.float64)

    def set_hard_rounding(self, up: np.ndarray) -> None:
        self.alpha = Tensor(np.where(np.asarray(up) > 0.5, 10.0, -10.0), requires_grad=False)
        self.soft_rounding = False

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        xd = x.data.astype(np.float64)
        s = _bshape(np.maximum(self.scale.data.astype(np.float64), MIN_SCALE), xd.ndim, self.axis)
        qm = qmax(self.bits)
        z = np.clip(round_half_away(-_bshape(self.clip_min, xd.ndim, self.axis) / s), 0, qm)
        xs = xd / s
        if self.alpha is not None:
            h = _rect_sigmoid(self.alpha.data.astype(np.float64))
            if not self.soft_rounding:
                h = (h >= 0.5).astype(np.float64)
            r = np.floor(xs) + h
        else:
            r = round_half_away(xs)
        pre = r + z
        low, high = pre < 0, pre > qm
        inside = ~(low | high)
        q = np.clip(pre, 0, qm)
        out = s * (q - z)
        scale_t, alpha_t = self.scale, self.alpha
        axis = self.axis

        def bw(g):
            g = g.astype(np.float64)
            gx = g * inside
            ds = np.where(inside, r - xs, np.where(low, -z, qm - z)) * g
            if axis is None:
                gs = np.array([ds.sum()])
            else:
                ax = axis % ds.ndim
                gs = ds.sum(axis=tuple(i for i in range(ds.ndim) if i != ax))
            grads = [gx, gs.astype(DTYPE)]
            if alpha_t is not None:
                a = alpha_t.data.astype(np.float64)
                sig = 1.0 / (1.0 + np.exp(-a))
                hh = 1.2 * sig - 0.1
                dh = 1.2 * sig * (1 - sig) * ((hh > 0) & (hh < 1))
                grads.append((g * s * inside * dh).astype(DTYPE))
            return tuple(grads)

        parents = (x, scale_t) if alpha_t is None else (x, scale_t, alpha_t)
        return Tensor._make(out, parents, bw, "fake_quant_learnable")
