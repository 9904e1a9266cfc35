"""Calibration-image synthesis from a frozen CLIP model.

Methods:

``d4c``        foreground/background contrastive loss against prompts, with
               perturbations on the foreground crops and a TV prior
``pgsi_only``  prompt-aligned InfoNCE on whole images (+ TV)
``pgsi_scg``   ``d4c`` without perturbations
``pgsi_pae``   InfoNCE on perturbed whole images (+ TV)
``gaussian``   the N(0, 1) initialization, unchanged
``bns``        batch-norm statistic matching (CNN encoders)
``pse``        patch-similarity entropy maximization (ViT encoders)
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import NonFiniteError, Tensor
from .data import IMAGE_MEAN, IMAGE_SIZE, IMAGE_STD, Tokenizer, class_prompts
from .model import ClipModel
from .optim import Adam
from .rng import make_rng

logger = logging.getLogger(__name__)

METHODS = ("d4c", "pgsi_only", "pgsi_scg", "pgsi_pae", "gaussian", "bns", "pse")
PAE_ORDER = ("flip", "affine", "color", "blur", "erase")

# which components each method switches on: (prompt-guided, structure-contrastive, perturbations)
COMPONENTS = {
    "gaussian": (False, False, False),
    "pgsi_only": (True, False, False),
    "pgsi_scg": (True, True, False),
    "pgsi_pae": (True, False, True),
    "d4c": (True, True, True),
}


@dataclass
class PAEConfig:
    flip: bool = True
    affine: bool = True
    color: bool = True
    blur: bool = True
    erase: bool = True
    prob: float = 0.5
    max_rotation: float = 15.0
    max_translate: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    jitter_range: tuple = (0.8, 1.2)
    blur_sigma: tuple = (0.1, 1.0)
    erase_max_area: float = 0.2

    def enabled(self) -> list[str]:
        return [k for k in PAE_ORDER if getattr(self, k)]


@dataclass
class SynthesisConfig:
    batch_size: int = 16
    learning_rate: float = 0.01
    iterations: int = 3000
    temperature: float = 0.1
    tv_weight: float = 0.1
    bbox_frac: tuple = (0.25, 0.6)
    n_images: int = 128
    seed: int = 0
    pae: PAEConfig = field(default_factory=PAEConfig)
    pse_grid: int = 100
    log_every: int = 0

    def __post_init__(self):
        if isinstance(self.pae, dict):
            self.pae = PAEConfig(**self.pae)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be non-negative")
        if self.batch_size < 1 or self.n_images < 1:
            raise ValueError("batch_size and n_images must be >= 1")
        lo, hi = self.bbox_frac
        if not 0 < lo <= hi <= 1:
            raise ValueError("bbox_frac must satisfy 0 < lo <= hi <= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox_frac"] = list(self.bbox_frac)
        for k in ("scale_range", "jitter_range", "blur_sigma"):
            d["pae"][k] = list(d["pae"][k])
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SampleBatch:
    images: Tensor               # (N, 3, H, W), the trainable leaves
    bboxes: np.ndarray           # (N, 4) x0, y0, x1, y1 (end-exclusive)
    prompt_assignment: np.ndarray  # (N,) class index per image


@dataclass
class RegionEmbeddings:
    fg: Tensor   # I_F
    bg: Tensor   # I_B
    text: Tensor  # T


@dataclass
class SynthesisResult:
    images: np.ndarray
    bboxes: np.ndarray
    assignment: np.ndarray
    loss_trace: list            # per batch: list of per-iteration losses
    method: str
    config_hash: str

    def provenance(self) -> dict:
        return {"method": self.method, "config_hash": self.config_hash,
                "loss_trace": [[float(v) for v in tr] for tr in self.loss_trace]}


# ---------------------------------------------------------------------------
# batch construction
# ---------------------------------------------------------------------------


def init_batch(config: SynthesisConfig, batch_index: int = 0, n_prompts: int | None = None,
               size: int = IMAGE_SIZE) -> SampleBatch:
    """Gaussian-noise images, one random box per image, round-robin prompts."""
    n = config.batch_size
    n_prompts = n_prompts or len(class_prompts())
    rng = make_rng(config.seed, "init-batch", batch_index)
    images = rng.standard_normal((n, 3, size, size)).astype(np.float32)
    lo = max(1, int(math.ceil(config.bbox_frac[0] * size)))
    hi = max(lo, int(math.floor(config.bbox_frac[1] * size)))
    w = rng.integers(lo, hi + 1, size=n)
    h = rng.integers(lo, hi + 1, size=n)
    x0 = (rng.random(n) * (size - w + 1)).astype(int)
    y0 = (rng.random(n) * (size - h + 1)).astype(int)
    boxes = np.stack([x0, y0, x0 + w, y0 + h], axis=1)
    assign = (batch_index * n + np.arange(n)) % n_prompts
    return SampleBatch(Tensor(images, requires_grad=True), boxes, assign)


def extract_foreground(batch: SampleBatch, size: int = IMAGE_SIZE) -> Tensor:
    return F.crop_resize(batch.images, batch.bboxes, size, size)


def box_mask(boxes: np.ndarray, shape: tuple) -> np.ndarray:
    """Boolean (N, 1, H, W) mask, True inside each image's box."""
    N, _, H, W = shape
    m = np.zeros((N, 1, H, W), dtype=bool)
    for i, (x0, y0, x1, y1) in enumerate(boxes):
        m[i, :, y0:y1, x0:x1] = True
    return m


def mask_background(batch: SampleBatch, rng: np.random.Generator) -> Tensor:
    """Replace each box interior with fresh N(0,1) noise (no gradient there)."""
    imgs = batch.images
    noise = rng.standard_normal(imgs.shape).astype(np.float32)
    return ag.where(box_mask(batch.bboxes, imgs.shape), Tensor(noise), imgs)


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------


def _color_jitter(x: Tensor, b: np.ndarray, c: np.ndarray, s: np.ndarray) -> Tensor:
    """Brightness, contrast, saturation in [0,1] pixel space; factor 1 is identity."""
    v = x * IMAGE_STD + IMAGE_MEAN
    v = v * Tensor(b[:, None, None, None])
    lum_w = Tensor(np.array([0.299, 0.587, 0.114], dtype=np.float32).reshape(1, 3, 1, 1))
    gray_mean = (v * lum_w).sum(axis=1, keepdims=True).mean(axis=(2, 3), keepdims=True)
    cc = Tensor(c[:, None, None, None])
    v = v * cc + gray_mean * (1.0 - cc)
    gray = (v * lum_w).sum(axis=1, keepdims=True)
    ss = Tensor(s[:, None, None, None])
    v = v * ss + gray * (1.0 - ss)
    return (v - IMAGE_MEAN) * (1.0 / IMAGE_STD)


def apply_pae(images: Tensor, cfg: PAEConfig, rng: np.random.Generator) -> Tensor:
    """Apply each enabled perturbation to a random half of the images, in fixed order."""
    x = images
    N, C, H, W = x.shape
    enabled = set(cfg.enabled())
    for name in PAE_ORDER:
        if name not in enabled:
            continue
        sel = rng.random(N) < cfg.prob
        if name == "flip":
            if sel.any():
                x = ag.where(sel[:, None, None, None], ag.flip(x, axis=-1), x)
        elif name == "affine":
            ang = rng.uniform(-cfg.max_rotation, cfg.max_rotation, N)
            tx = rng.uniform(-cfg.max_translate, cfg.max_translate, (N, 2))
            sc = rng.uniform(*cfg.scale_range, N)
            if sel.any():
                theta = np.stack([F.affine_matrix(a, t, s) if on else np.array([[1.0, 0, 0], [0, 1.0, 0]])
                                  for a, t, s, on in zip(ang, tx, sc, sel)])
                x = F.affine_warp(x, theta)
        elif name == "color":
            f = rng.uniform(*cfg.jitter_range, (3, N))
            f[:, ~sel] = 1.0
            if sel.any():
                x = _color_jitter(x, f[0], f[1], f[2])
        elif name == "blur":
            sig = rng.uniform(*cfg.blur_sigma, N) * sel
            if sel.any():
                x = F.gaussian_blur(x, sig)
        elif name == "erase":
            area = rng.uniform(0.02, cfg.erase_max_area, N) * H * W
            ratio = np.exp(rng.uniform(math.log(0.3), math.log(3.3), N))
            pos = rng.random((N, 2))
            noise = rng.standard_normal((N, C, H, W)).astype(np.float32)
            if sel.any():
                keep = np.ones((N, C, H, W), dtype=np.float32)
                for i in np.flatnonzero(sel):
                    eh = int(min(H, max(1, round(math.sqrt(area[i] * ratio[i])))))
                    ew = int(min(W, max(1, round(math.sqrt(area[i] / ratio[i])))))
                    y0 = int(pos[i, 0] * (H - eh + 1))
                    x0 = int(pos[i, 1] * (W - ew + 1))
                    keep[i] = F.random_erase_mask((C, H, W), (x0, y0, x0 + ew, y0 + eh))
                x = x * keep + Tensor(noise * (1.0 - keep))
    return x


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def infonce_loss(img: Tensor, txt: Tensor, tau: float) -> Tensor:
    """Mean over rows of -log softmax_j(I_i . T_j / tau) at j = i."""
    logits = (img @ txt.T) * (1.0 / tau)
    n = logits.shape[0]
    return -F.log_softmax(logits, axis=-1)[np.arange(n), np.arange(n)].mean()


_MASKED = -1e30


def scg_loss(reg: RegionEmbeddings, tau: float, background_mask: np.ndarray | None = None) -> Tensor:
    """InfoNCE whose denominator pools the N prompt and N background similarities.

    ``background_mask`` (N, N) booleans drop the marked foreground-background
    pairs from the denominator.
    """
    fg_txt = reg.fg @ reg.text.T
    fg_bg = reg.fg @ reg.bg.T
    if background_mask is not None:
        fg_bg = ag.where(background_mask, Tensor(np.full(fg_bg.shape, _MASKED * tau, np.float32)), fg_bg)
    logits = ag.concatenate([fg_txt, fg_bg], axis=1) * (1.0 / tau)
    n = logits.shape[0]
    return -F.log_softmax(logits, axis=-1)[np.arange(n), np.arange(n)].mean()


def tv_loss(images: Tensor) -> Tensor:
    """Squared anisotropic total variation: mean dx^2 + mean dy^2."""
    if images.shape[-1] < 2 or images.shape[-2] < 2:
        raise ValueError("tv_loss needs H, W >= 2")
    dx = images[..., :, 1:] - images[..., :, :-1]
    dy = images[..., 1:, :] - images[..., :-1, :]
    return (dx * dx).mean() + (dy * dy).mean()


def bns_loss(model: ClipModel, images: Tensor) -> Tensor:
    """Sum over BN layers of squared distances between batch and running statistics."""
    enc = model.image
    enc.set_bn_mode("stats")
    try:
        enc(images)
        loss = None
        for bn in enc.batchnorms():
            mu, var = bn.last_stats
            dm = mu - bn.running_mean
            dv = var - bn.running_var
            term = (dm * dm).sum() + (dv * dv).sum()
            loss = term if loss is None else loss + term
    finally:
        enc.set_bn_mode("eval")
    return loss


def patch_similarity_entropy(tokens: Tensor, grid: int = 100, reduce: bool = True) -> Tensor:
    """Per-image (or mean, with ``reduce``) KDE differential entropy of pairwise token cosine similarities.

    The density is a Gaussian KDE with Silverman bandwidth (treated as a
    constant), evaluated on ``grid`` points spanning [-1, 1].
    """
    B, T, _ = tokens.shape
    z = F.l2_normalize(tokens, axis=-1)
    sim = z @ ag.swapaxes(z, -1, -2)
    iu = np.triu_indices(T, k=1)
    s = sim[:, iu[0], iu[1]]                  # (B, M)
    M = s.shape[1]
    std = s.data.std(axis=1)
    h = np.maximum(1.06 * std * M ** (-0.2), 1e-3).astype(np.float32)
    pts = np.linspace(-1.0, 1.0, grid, dtype=np.float32)
    d = (s.reshape(B, 1, M) - Tensor(pts.reshape(1, grid, 1))) * Tensor((1.0 / h).reshape(B, 1, 1))
    dens = ag.exp(d * d * -0.5).mean(axis=2) * Tensor((1.0 / (h * math.sqrt(2 * math.pi))).reshape(B, 1))
    step = 2.0 / (grid - 1)
    ent = -(dens * ag.log(dens + 1e-12)).sum(axis=1) * step
    return ent.mean() if reduce else ent


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


def _check_method(model: ClipModel, method: str) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown synthesis method {method!r}")
    if method == "bns" and model.cfg.variant != "cnn":
        raise ValueError("bns needs an encoder with batch-norm layers (cnn)")
    if method == "pse" and model.cfg.variant != "vit":
        raise ValueError("pse needs an encoder with attention blocks (vit)")


def prompt_embeddings(model: ClipModel, prompts: list[str]) -> np.ndarray:
    tok = Tokenizer()
    with ag.no_grad():
        return model.encode_text(tok.encode_batch(prompts)).data


def _stack_batches(batches: list[SampleBatch]) -> SampleBatch:
    """Concatenate independent batches so they share one encoder pass."""
    imgs = np.concatenate([b.images.data for b in batches])
    return SampleBatch(Tensor(imgs, requires_grad=True), np.concatenate([b.bboxes for b in batches]),
                       np.concatenate([b.prompt_assignment for b in batches]))


def _per_batch_losses(model: ClipModel, method: str, cfg: SynthesisConfig, batch: SampleBatch,
                      text: np.ndarray, rng: np.random.Generator, n_batches: int) -> Tensor:
    """Loss of every independent batch as a (n_batches,) vector.

    Batches never interact: contrastive logits are formed within a batch and
    every term is a per-batch mean, so the gradient of the summed vector
    w.r.t. one batch's pixels equals the gradient of that batch's own loss.
    """
    N = batch.images.shape[0]
    bs = N // n_batches
    if method == "bns":
        parts = [bns_loss(model, batch.images[i * bs:(i + 1) * bs]).reshape(1) for i in range(n_batches)]
        return ag.concatenate(parts)
    if method == "pse":
        enc = model.image
        enc(batch.images)
        ent = patch_similarity_entropy(enc._last_block_input, cfg.pse_grid, reduce=False)
        return -ent.reshape(n_batches, bs).mean(axis=1)
    _, scg, pae = COMPONENTS[method]
    T = Tensor(text[batch.prompt_assignment]).reshape(n_batches, bs, -1)
    diag = (slice(None), np.arange(bs), np.arange(bs))
    if scg:
        fg = extract_foreground(batch)
        if pae:
            fg = apply_pae(fg, cfg.pae, rng)
        bg = mask_background(batch, rng)
        emb = model.encode_image(ag.concatenate([fg, bg], axis=0))
        i_f = emb[:N].reshape(n_batches, bs, -1)
        i_b = emb[N:].reshape(n_batches, bs, -1)
        logits = ag.concatenate([i_f @ ag.swapaxes(T, -1, -2), i_f @ ag.swapaxes(i_b, -1, -2)], axis=-1)
    else:
        x = apply_pae(batch.images, cfg.pae, rng) if pae else batch.images
        img = model.encode_image(x).reshape(n_batches, bs, -1)
        logits = img @ ag.swapaxes(T, -1, -2)
    loss = -F.log_softmax(logits * (1.0 / cfg.temperature), axis=-1)[diag].mean(axis=1)
    if cfg.tv_weight:
        x = batch.images.reshape(n_batches, bs * 3, IMAGE_SIZE, IMAGE_SIZE)
        dx = x[..., :, 1:] - x[..., :, :-1]
        dy = x[..., 1:, :] - x[..., :-1, :]
        tv = (dx * dx).mean(axis=(1, 2, 3)) + (dy * dy).mean(axis=(1, 2, 3))
        loss = loss + tv * cfg.tv_weight
    return loss


def synthesize(model: ClipModel, config: SynthesisConfig, method: str = "d4c",
               prompts: list[str] | None = None) -> SynthesisResult:
    """Optimize ``config.n_images`` images in independent batches of ``config.batch_size``.

    Each batch starts from its own Gaussian initialization and box draw and
    has its own Adam state (Adam is elementwise, so one optimizer over the
    stacked pixels is equivalent).  All batches advance together through a
    single encoder pass per iteration.
    """
    _check_method(model, method)
    prompts = prompts or class_prompts()
    model.requires_grad_(False)
    text = prompt_embeddings(model, prompts)
    n_batches = math.ceil(config.n_images / config.batch_size)
    batches = [init_batch(config, b, n_prompts=len(prompts)) for b in range(n_batches)]
    batch = _stack_batches(batches)
    traces = np.zeros((config.iterations if method != "gaussian" else 0, n_batches))
    if method != "gaussian":
        rng = make_rng(config.seed, "synth-noise")
        opt = Adam([batch.images], lr=config.learning_rate)
        for it in range(config.iterations):
            losses = _per_batch_losses(model, method, config, batch, text, rng, n_batches)
            vals = losses.data.astype(np.float64)
            if not np.all(np.isfinite(vals)):
                tail = traces[max(0, it - 5):it].tolist()
                raise NonFiniteError(f"synthesis loss {vals} at iteration {it}; trace tail {tail}")
            opt.zero_grad()
            losses.sum().backward()
            opt.step()
            traces[it] = vals
            if config.log_every and it % config.log_every == 0:
                logger.info("synth %s iter %d loss %.4f", method, it, vals.mean())
    n = config.n_images
    return SynthesisResult(batch.images.data[:n].copy(), batch.bboxes[:n], batch.prompt_assignment[:n],
                           traces.T.tolist(), method, config.hash())
