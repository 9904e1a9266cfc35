"""Neural-network and image ops built on :mod:`d4c.autograd`."""
from __future__ import annotations

import math

import numpy as np

from .autograd import DTYPE, Tensor, as_tensor, matmul, stack, unbroadcast

# ---------------------------------------------------------------------------
# normalizations and activations
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    w, b = weight.data, bias.data
    out = xhat * w + b
    n = xd.shape[-1]

    def bw(g):
        gw = unbroadcast(g * xhat, w.shape) if weight.requires_grad else None
        gb = unbroadcast(g, b.shape) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * w
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), bw, "layer_norm")


def batch_norm2d(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5, update_stats: bool = True):
    """Batch normalization over (B, H, W) per channel.

    Returns ``(out, batch_mean, batch_var)``; the batch statistics are
    differentiable tensors in training mode and ``None`` in eval mode.  In
    training mode with ``update_stats`` the running buffers are updated in
    place (unbiased variance, PyTorch convention).
    """
    shape = (1, -1, 1, 1)
    if not training:
        inv = Tensor((1.0 / np.sqrt(running_var + eps)).reshape(shape))
        out = (x - Tensor(running_mean.reshape(shape))) * inv * weight.reshape(shape) + bias.reshape(shape)
        return out, None, None
    axes = (0, 2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    v = (xc * xc).mean(axis=axes, keepdims=True)
    out = xc / ((v + eps) ** 0.5) * weight.reshape(shape) + bias.reshape(shape)
    if update_stats:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        bm = mu.data.reshape(-1)
        bv = v.data.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * bm
        running_var *= 1 - momentum
        running_var += momentum * bv
    return out, mu.reshape(-1), v.reshape(-1)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._make(out, (x,), bw, "l2_normalize")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for weight shaped (out, in)."""
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[0])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._make(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.  x: (B,C,H,W), weight: (O,C,kh,kw)."""
    xd, wd = x.data, weight.data
    B, C, H, W = xd.shape
    O, Cw, kh, kw = wd.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ValueError("kernel larger than padded input")
    OH, OW = conv_out_size(H, kh, stride, padding), conv_out_size(W, kw, stride, padding)
    # channel-major padded copy so each kernel tap is one strided slice
    xp = np.zeros((C, B, H + 2 * padding, W + 2 * padding), dtype=DTYPE)
    xp[:, :, padding:padding + H, padding:padding + W] = xd.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, B, OH, OW), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride]
    cols = cols.reshape(C * kh * kw, B * OH * OW)
    wmat = wd.reshape(O, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, OH, OW).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
        gw = (g2 @ cols.T).reshape(wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(C, kh, kw, B, OH, OW)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += dcols[:, i, j]
            gx = np.ascontiguousarray(dxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=1) if bias.requires_grad else None)

    return Tensor._make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear weights, align_corners=False."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m.astype(DTYPE)


def bilinear_resize(img: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of (B,C,H,W) images."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    H, W = img.shape[-2:]
    if (H, W) == (out_h, out_w):
        return img
    ry = Tensor(resize_matrix(H, out_h))
    rx = Tensor(resize_matrix(W, out_w).T.copy())
    return matmul(matmul(ry, img), rx)


def crop_resize(img: Tensor, boxes: np.ndarray, out_h: int, out_w: int) -> Tensor:
    """Crop per-image boxes (x0, y0, x1, y1; exclusive end) and resize each."""
    crops = []
    for b, (x0, y0, x1, y1) in enumerate(np.asarray(boxes, dtype=int)):
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"degenerate box {x0, y0, x1, y1}")
        crop = img[b, :, y0:y1, x0:x1]
        crops.append(bilinear_resize(crop, out_h, out_w))
    return stack(crops, axis=0)


def _bilinear_sample_weights(src_y: np.ndarray, src_x: np.ndarray, H: int, W: int):
    """Gather indices and weights for zero-padded bilinear sampling."""
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    fy = (src_y - y0).astype(DTYPE)
    fx = (src_x - x0).astype(DTYPE)
    corners = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            w = (wy * wx * valid).astype(DTYPE)
            corners.append((np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1), w))
    return corners


def affine_warp(img: Tensor, theta: np.ndarray) -> Tensor:
    """Warp (B,C,H,W) images by per-image 2x3 affine maps (output -> source).

    ``theta`` acts on normalized coordinates in [-1, 1] (align_corners=False)
    and maps each output location to its sampling location.  Out-of-bounds
    samples read zero.  Differentiable w.r.t. the image only.
    """
    B, C, H, W = img.shape
    theta = np.asarray(theta, dtype=np.float64).reshape(B, 2, 3)
    ys = (np.arange(H) + 0.5) / H * 2 - 1
    xs = (np.arange(W) + 0.5) / W * 2 - 1
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    base = np.stack([gx.ravel(), gy.ravel(), np.ones(H * W)], axis=0)  # (3, HW)
    src = theta @ base  # (B, 2, HW)
    src_x = (src[:, 0] + 1) * W / 2 - 0.5
    src_y = (src[:, 1] + 1) * H / 2 - 0.5
    corners = _bilinear_sample_weights(src_y, src_x, H, W)
    bidx = np.arange(B)[:, None]
    xd = img.data
    out = np.zeros((B, C, H * W), dtype=DTYPE)
    for yy, xx, w in corners:
        out += xd[bidx, :, yy, xx].transpose(0, 2, 1) * w[:, None, :]
    out = out.reshape(B, C, H, W)

    def bw(g):
        g = g.reshape(B, C, H * W)
        full = np.zeros((B, H, W, C), dtype=DTYPE)
        for yy, xx, w in corners:
            contrib = (g * w[:, None, :]).transpose(0, 2, 1)  # (B, HW, C)
            np.add.at(full, (np.broadcast_to(bidx, yy.shape), yy, xx), contrib)
        return (full.transpose(0, 3, 1, 2),)

    return Tensor._make(out, (img,), bw, "affine_warp")


def affine_matrix(angle_deg: float, translate: tuple[float, float], scale: float) -> np.ndarray:
    """Output->source 2x3 map for rotation/translation/zoom about the center.

    Translation is in normalized units (fraction of half-extent * 2, i.e.
    0.1 moves content by 10% of the side).
    """
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    fwd = np.array([[scale * c, -scale * s, translate[0] * 2],
                    [scale * s, scale * c, translate[1] * 2],
                    [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(fwd)
    return inv[:2]


def blur_matrix(n: int, sigma: float, size: int = 3) -> np.ndarray:
    """(n, n) matrix applying a normalized 1-D Gaussian with reflect padding."""
    half = size // 2
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    k /= k.sum()
    m = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for t, wt in zip(range(-half, half + 1), k):
            j = i + t
            if j < 0:
                j = -j
            elif j >= n:
                j = 2 * (n - 1) - j
            m[i, j] += wt
    return m.astype(DTYPE)


def gaussian_blur(img: Tensor, sigma, size: int = 3) -> Tensor:
    """Separable Gaussian blur of (B, C, H, W) images with a fixed-size kernel.

    ``sigma`` is a scalar or one value per image; a sigma of 0 leaves that
    image untouched.
    """
    B = img.shape[0]
    H, W = img.shape[-2:]
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
    ry = np.stack([blur_matrix(H, s, size) if s > 0 else np.eye(H, dtype=DTYPE) for s in sig])
    rx = np.stack([(blur_matrix(W, s, size) if s > 0 else np.eye(W, dtype=DTYPE)).T for s in sig])
    return matmul(matmul(Tensor(ry[:, None]), img), Tensor(rx[:, None]))


def random_erase_mask(shape: tuple, box: tuple[int, int, int, int]) -> np.ndarray:
    """Binary keep-mask (1 outside the box, 0 inside) of the given (C,H,W) shape."""
    mask = np.ones(shape, dtype=DTYPE)
    x0, y0, x1, y1 = box
    mask[..., y0:y1, x0:x1] = 0.0
    return mask


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    lp = log_softmax(logits, axis=-1)
    n = logits.shape[0]
    return -lp[np.arange(n), np.asarray(targets)].mean()


def mse(a: Tensor, b) -> Tensor:
    d = a - as_tensor(b)
    return (d * d).mean()
