"""Patch-similarity maps, embedding cluster analysis and compression accounting."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import Tensor
from .calibration import FP_BITS, QuantizedClip
from .data import IMAGE_SIZE, MAX_LEN
from .nn import Conv2d, Linear, MultiHeadAttention

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# patch similarity
# ---------------------------------------------------------------------------


@dataclass
class PatchSimilarityMap:
    image_id: int
    grid: int
    matrix: np.ndarray      # (g*g, g*g) cosine similarities


def split_patches(image: np.ndarray, g: int) -> np.ndarray:
    """(C, H, W) -> (g*g, C, H/g, W/g), row-major over the grid."""
    C, H, W = image.shape
    if H != W:
        raise ValueError("image must be square")
    if H % g:
        raise ValueError(f"grid {g} does not divide image side {H}")
    p = H // g
    return image.reshape(C, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, C, p, p)


def encoder_features(model, batch: int = 256) -> Callable[[np.ndarray], np.ndarray]:
    """Feature extractor returning the model's L2-normalized image embeddings."""
    def extract(x: np.ndarray) -> np.ndarray:
        out = []
        with ag.no_grad():
            for i in range(0, len(x), batch):
                out.append(model.encode_image(Tensor(x[i:i + batch])).data)
        return np.concatenate(out)
    return extract


def patch_similarity(image: np.ndarray, feature_extractor: Callable[[np.ndarray], np.ndarray],
                     g: int = 8, image_id: int = 0, size: int = IMAGE_SIZE) -> PatchSimilarityMap:
    """Cosine similarity between the embeddings of all g*g patches of one image.

    Each patch is bilinearly resized to the encoder input size before
    embedding.
    """
    patches = split_patches(np.asarray(image, dtype=np.float32), g)
    with ag.no_grad():
        up = F.bilinear_resize(Tensor(patches), size, size).data
    feats = feature_extractor(up).astype(np.float64)
    feats /= np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    sim = np.clip(feats @ feats.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return PatchSimilarityMap(image_id, g, sim)


def patch_similarity_batch(images: np.ndarray, feature_extractor, g: int = 8) -> list[PatchSimilarityMap]:
    """Patch maps for many images with one feature-extractor call."""
    images = np.asarray(images, dtype=np.float32)
    patches = np.concatenate([split_patches(im, g) for im in images])
    with ag.no_grad():
        up = F.bilinear_resize(Tensor(patches), IMAGE_SIZE, IMAGE_SIZE).data
    feats = feature_extractor(up).astype(np.float64).reshape(len(images), g * g, -1)
    out = []
    for i, f in enumerate(feats):
        f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
        sim = np.clip(f @ f.T, -1.0, 1.0)
        sim = 0.5 * (sim + sim.T)
        np.fill_diagonal(sim, 1.0)
        out.append(PatchSimilarityMap(i, g, sim))
    return out


def structure_score(m: PatchSimilarityMap | np.ndarray) -> float:
    """Variance of the off-diagonal similarities; 0 for a uniform map."""
    mat = m.matrix if isinstance(m, PatchSimilarityMap) else np.asarray(m, dtype=np.float64)
    off = mat[~np.eye(mat.shape[0], dtype=bool)]
    return float(off.var())


# ---------------------------------------------------------------------------
# clusters
# ---------------------------------------------------------------------------


@dataclass
class ClusterReport:
    coords: np.ndarray      # (N, 2) PCA projection
    labels: np.ndarray
    silhouette: float
    explained_variance: np.ndarray


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top two principal axes (sign fixed for determinism)."""
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    # make the largest-magnitude loading of each axis positive
    signs = np.sign(comps[np.arange(comps.shape[0]), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    var = s ** 2 / max(len(x) - 1, 1)
    return xc @ comps.T, var[:2] / max(var.sum(), 1e-300)


def silhouette_score(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette with Euclidean distances; singleton-cluster points score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two classes")
    sq = (x * x).sum(axis=1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    np.fill_diagonal(d, 0.0)
    onehot = labels[:, None] == classes[None, :]
    sums = d @ onehot
    counts = onehot.sum(axis=0).astype(np.float64)
    own = np.argmax(onehot, axis=1)
    n_own = counts[own] - 1
    a = np.where(n_own > 0, sums[np.arange(len(x)), own] / np.maximum(n_own, 1), 0.0)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(len(x)), own] = np.inf
    b = mean_other.min(axis=1)
    s = np.where(n_own > 0, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(s.mean())


def region_crops(images: np.ndarray, boxes: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Box regions of synthetic images resized to the encoder input, as the synthesis loss sees them."""
    with ag.no_grad():
        return F.crop_resize(Tensor(np.asarray(images, dtype=np.float32)), boxes, size, size).data


def cluster_report(embeddings: np.ndarray, labels) -> ClusterReport:
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("cluster_report needs at least two classes")
    if counts.min() < 2:
        raise ValueError("cluster_report needs at least two samples per class")
    emb = np.asarray(embeddings, dtype=np.float64)
    coords, ev = pca_2d(emb)
    return ClusterReport(coords, labels, silhouette_score(emb, labels), ev)


# ---------------------------------------------------------------------------
# compression
# ---------------------------------------------------------------------------


@dataclass
class LayerCost:
    name: str
    weight_params: int
    bias_params: int
    w_bits: int
    a_bits: int
    fp_bytes: float
    q_bytes: float
    overhead_bytes: float
    macs: int


@dataclass
class CompressionReport:
    layers: list[LayerCost]
    other_params: int
    fp_bytes: float
    q_bytes: float
    storage_ratio: float
    weight_storage_ratio: float
    fp_cost: float
    q_cost: float
    speedup: float

    def to_dict(self) -> dict:
        return asdict(self)


def count_macs(qc: QuantizedClip) -> dict[str, int]:
    """Multiply-accumulates per single input (one image / one prompt) for every conv, linear and attention matmul."""
    model = qc.model
    macs: dict[str, int] = {}
    hooks = []
    for name, mod in model.named_modules():
        if isinstance(mod, Conv2d):
            def h(m, args, out, name=name):
                _, cin, kh, kw = m.weight.shape
                macs[name] = int(np.prod(out.shape[1:])) * cin * kh * kw
        elif isinstance(mod, Linear):
            def h(m, args, out, name=name):
                macs[name] = int(np.prod(out.shape[1:])) * m.weight.shape[1]
        elif isinstance(mod, MultiHeadAttention):
            def h(m, args, out, name=name):
                _, T, D = out.shape
                macs[name + ".matmul"] = 2 * T * T * D
        else:
            continue
        hooks.append((mod, mod.add_hook(h)))
    try:
        with ag.no_grad():
            model.image(Tensor(np.zeros((1, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32)))
            model.text(np.ones((1, MAX_LEN), dtype=np.int64))
    finally:
        for mod, h in hooks:
            mod.remove_hook(h)
    return macs


def compression_report(qc: QuantizedClip, exclusions: bool = True, overhead: bool = True,
                       weights_only: bool = False, uniform_bits: tuple[int, int] | None = None) -> CompressionReport:
    """Byte ledger and bit-product MAC cost of a quantized model.

    Quantized weights take ``w_bits / 8`` bytes each; biases, excluded layers
    and all non conv/linear parameters stay FP32.  ``overhead`` adds one FP32
    scale and one FP32 zero-point per quantization channel (weights and
    activations).  The cost model charges ``w_bits * a_bits`` per MAC against
    ``32 * 32`` for FP; attention matmuls run in FP.  ``uniform_bits``
    overrides every layer's setting and, with ``exclusions=False``, also
    quantizes the excluded layers.  ``weights_only`` drops biases and other
    parameters from the storage totals.
    """
    macs = count_macs(qc)
    mods = qc.model.quantizable_layers()
    rows = []
    covered = set()
    for name, mod in mods.items():
        lq = qc.layers.get(name)
        excluded = bool(lq and lq.excluded)
        if excluded and exclusions:
            wb = ab = FP_BITS
        elif uniform_bits is not None:
            wb, ab = uniform_bits
        elif excluded:
            raise ValueError("exclusions=False needs uniform_bits")
        else:
            wb = lq.w_bits if lq else FP_BITS
            ab = lq.a_bits if lq else FP_BITS
        nw = int(mod.weight.data.size)
        nb = int(mod.bias.data.size) if mod.bias is not None else 0
        covered.add(id(mod.weight))
        if mod.bias is not None:
            covered.add(id(mod.bias))
        bias_b = 0.0 if weights_only else 4.0 * nb
        fp = 4.0 * nw + bias_b
        q = nw * wb / 8.0 + bias_b
        ov = 0.0
        if overhead and wb != FP_BITS:
            ov += 8.0 * (mod.weight.shape[0])            # per output channel scale + zero-point
        if overhead and ab != FP_BITS:
            n_act = mod.weight.shape[1] if name.endswith(("attn.qkv", "mlp.fc1")) else 1
            ov += 8.0 * n_act
        rows.append(LayerCost(name, nw, nb, wb, ab, fp, q + ov, ov, macs.get(name, 0)))
    for name, n in macs.items():
        if name.endswith(".matmul"):
            rows.append(LayerCost(name, 0, 0, FP_BITS, FP_BITS, 0.0, 0.0, 0.0, n))
    other = 0 if weights_only else sum(int(p.data.size) for p in qc.model.parameters() if id(p) not in covered)
    fp_total = sum(r.fp_bytes for r in rows) + 4.0 * other
    q_total = sum(r.q_bytes for r in rows) + 4.0 * other
    w_fp = sum(4.0 * r.weight_params for r in rows)
    w_q = sum(r.weight_params * r.w_bits / 8.0 for r in rows)
    fp_cost = float(sum(r.macs for r in rows))
    q_cost = float(sum(r.macs * r.w_bits * r.a_bits / (FP_BITS * FP_BITS) for r in rows))
    return CompressionReport(rows, other, fp_total, q_total, fp_total / q_total, w_fp / w_q,
                             fp_cost, q_cost, fp_cost / q_cost if q_cost else float("inf"))


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def save_heatmap(m: PatchSimilarityMap, path, title: str = "") -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(m.matrix, vmin=-1, vmax=1, cmap="viridis")
    ax.set_title(title or f"patch similarity (g={m.grid})")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def save_scatter(reports: dict[str, ClusterReport], path) -> None:
    plt = _plt()
    fig, axes = plt.subplots(1, len(reports), figsize=(4 * len(reports), 4), squeeze=False)
    for ax, (name, rep) in zip(axes[0], reports.items()):
        ax.scatter(rep.coords[:, 0], rep.coords[:, 1], c=rep.labels, cmap="tab20", s=8)
        ax.set_title(f"{name} (silhouette {rep.silhouette:.2f})")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def save_matrix_csv(matrix: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows([[repr(float(v)) for v in row] for row in matrix])


def save_summary(path, silhouette: dict, structure: dict, compression: CompressionReport | None,
                 region_silhouette: dict | None = None) -> None:
    summary = {"silhouette": silhouette, "structure_scores": structure,
               "note": "silhouette (cluster separation) and off-diagonal patch-similarity variance "
                       "are this repository's quantitative stand-ins for the qualitative figures"}
    if region_silhouette is not None:
        summary["silhouette_region"] = region_silhouette
    if compression is not None:
        summary["compression"] = {"storage_ratio": compression.storage_ratio,
                                  "weight_storage_ratio": compression.weight_storage_ratio,
                                  "speedup": compression.speedup,
                                  "fp_bytes": compression.fp_bytes, "q_bytes": compression.q_bytes}
    Path(path).write_text(json.dumps(summary, indent=1, sort_keys=True))
