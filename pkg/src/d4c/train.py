"""Contrastive pretraining, batched encoding and zero-shot evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import Tensor
from .data import N_CLASSES, ShapesDataset, Tokenizer, class_prompts, normalize_images
from .model import ClipModel
from .optim import Adam
from .rng import make_rng

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


# steps that reach the zero-shot gate on 4096 training images
DEFAULT_STEPS = {"cnn": 400, "vit": 2000}


@dataclass
class PretrainConfig:
    steps: int | None = None  # None picks DEFAULT_STEPS for the encoder variant
    groups: int = 4           # class-balanced groups of 16 images per step
    lr: float = 2e-3
    warmup: int = 50
    seed: int = 0
    flip_aug: bool = True
    log_every: int = 100


@dataclass
class PretrainLog:
    losses: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def clip_loss(image_emb: Tensor, text_emb: Tensor, logit_scale: Tensor) -> Tensor:
    """Symmetric InfoNCE with matched pairs on the diagonal."""
    n = image_emb.shape[0]
    logits = (image_emb @ text_emb.T) * ag.exp(logit_scale)
    targets = np.arange(n)
    return (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets)) * 0.5


def _balanced_batch(labels: np.ndarray, rng: np.random.Generator, groups: int) -> np.ndarray:
    """Indices of ``groups`` blocks, each holding one sample of every class in class order."""
    by_class = [np.flatnonzero(labels == c) for c in range(N_CLASSES)]
    idx = np.empty((groups, N_CLASSES), dtype=np.int64)
    for c, pool in enumerate(by_class):
        idx[:, c] = rng.choice(pool, size=groups, replace=len(pool) < groups)
    return idx.reshape(-1)


def pretrain_clip(model: ClipModel, dataset: ShapesDataset, cfg: PretrainConfig) -> PretrainLog:
    """Train both encoders with symmetric InfoNCE on class-balanced groups.

    Each group of 16 images carries one image per class, so the 16 class
    captions are distinct positives and no in-batch negative is a false
    negative.  Returns the loss trace; the model is left frozen in eval mode.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    steps = cfg.steps or DEFAULT_STEPS[model.cfg.variant]
    rng = make_rng(cfg.seed, "pretrain")
    tok = Tokenizer()
    caps = tok.encode_batch(class_prompts())
    params = [p for p in model.parameters()]
    model.requires_grad_(True)
    opt = Adam(params, lr=cfg.lr)
    log = PretrainLog()
    if hasattr(model.image, "set_bn_mode"):
        model.image.set_bn_mode("train")
    for step in range(steps):
        lr = cfg.lr * min(1.0, (step + 1) / cfg.warmup)
        lr *= 0.5 * (1 + math.cos(math.pi * step / steps))
        opt.lr = lr
        idx = _balanced_batch(dataset.labels, rng, cfg.groups)
        imgs = dataset.normalized(idx)
        if cfg.flip_aug:
            flip = rng.random(len(idx)) < 0.5
            imgs[flip] = imgs[flip][..., ::-1]
        img_emb = model.encode_image(Tensor(imgs))
        txt_emb = model.encode_text(caps)
        loss = None
        for g in range(cfg.groups):
            part = clip_loss(img_emb[g * N_CLASSES:(g + 1) * N_CLASSES], txt_emb, model.logit_scale)
            loss = part if loss is None else loss + part
        loss = loss * (1.0 / cfg.groups)
        val = loss.item()
        if not math.isfinite(val):
            raise DivergenceError(f"pretraining loss became {val} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.logit_scale.data = np.clip(model.logit_scale.data, 0.0, math.log(100.0)).astype(np.float32)
        log.losses.append(val)
        log.steps.append(step)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("pretrain step %d loss %.4f", step, val)
    if hasattr(model.image, "set_bn_mode"):
        model.image.set_bn_mode("eval")
    model.requires_grad_(False)
    return log


def encode_images(model: ClipModel, images: np.ndarray, batch: int = 128) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(images), batch):
            out.append(model.encode_image(Tensor(images[i:i + batch])).data)
    return np.concatenate(out)


def encode_texts(model: ClipModel, tokens: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(tokens), batch):
            out.append(model.encode_text(tokens[i:i + batch]).data)
    return np.concatenate(out)


def zero_shot_classify(model: ClipModel, images: np.ndarray, class_prompt_texts, labels=None):
    """Predict by argmax cosine similarity to the class prompts.

    ``images`` are model-space (normalized) arrays.  Returns
    ``(predictions, accuracy)``; accuracy is ``None`` without labels.
    """
    if len(class_prompt_texts) == 0:
        raise ValueError("empty class prompt set")
    tok = Tokenizer()
    t = encode_texts(model, tok.encode_batch(class_prompt_texts))
    i = encode_images(model, images)
    pred = np.argmax(i @ t.T, axis=1)
    acc = None if labels is None else float((pred == np.asarray(labels)).mean())
    return pred, acc


def evaluate(model: ClipModel, dataset: ShapesDataset) -> float:
    return zero_shot_classify(model, normalize_images(dataset.images), class_prompts(), dataset.labels)[1]
