"""Toy CLIP: CNN or ViT image encoder plus a causal transformer text encoder."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import Tensor
from .data import IMAGE_SIZE, MAX_LEN, Tokenizer
from .nn import AttentionBlock, BatchNorm2d, Conv2d, Embedding, LayerNorm, Linear, Module
from .rng import make_rng


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "cnn"
    embed_dim: int = 64
    cnn_channels: tuple = (16, 32, 64, 96)
    vit_dim: int = 64
    vit_depth: int = 4
    vit_heads: int = 4
    vit_mlp: int = 128
    patch: int = 8
    text_dim: int = 64
    text_depth: int = 2
    text_heads: int = 4
    text_mlp: int = 128
    vocab_size: int = 0
    init_logit_scale: float = math.log(1 / 0.07)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["cnn_channels"] = tuple(d.get("cnn_channels", cls.cnn_channels))
        return cls(**d)


class ConvBN(Module):
    """conv -> BN; after folding for quantization the BN is absorbed into the conv."""

    def __init__(self, cin, cout, stride, rng):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        y = self.conv(x)
        return self.bn(y) if self.bn is not None else y

    def fold_bn(self) -> None:
        bn = self.bn
        if bn is None:
            return
        inv = bn.weight.data / np.sqrt(bn.running_var + bn.eps)
        w = self.conv.weight.data * inv[:, None, None, None]
        b = bn.bias.data - bn.running_mean * inv
        if self.conv.bias is not None:
            b = b + self.conv.bias.data * inv
        self.conv.weight = Tensor(w)
        self.conv.bias = Tensor(b)
        self.bn = None


class ResStage(Module):
    """Downsampling conv-BN-ReLU followed by a residual conv-BN and ReLU."""

    def __init__(self, cin, cout, rng):
        self.down = ConvBN(cin, cout, 2, rng)
        self.body = ConvBN(cout, cout, 1, rng)

    def forward(self, x):
        h = ag.relu(self.down(x))
        return ag.relu(h + self.body(h))


class CNNEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        chans = (3,) + tuple(cfg.cnn_channels)
        self.stages = [ResStage(chans[i], chans[i + 1], rng) for i in range(len(cfg.cnn_channels))]
        self.proj = Linear(chans[-1], cfg.embed_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        for st in self.stages:
            x = st(x)
        return self.proj(x.mean(axis=(2, 3)))

    def batchnorms(self) -> list[BatchNorm2d]:
        return [m for _, m in self.named_modules() if isinstance(m, BatchNorm2d)]

    def set_bn_mode(self, mode: str) -> None:
        for bn in self.batchnorms():
            bn.mode = mode

    def first_conv_name(self) -> str:
        return "stages.0.down.conv"


class ViTEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.vit_dim
        self.patch_embed = Conv2d(3, d, cfg.patch, rng, stride=cfg.patch)
        n_tokens = (IMAGE_SIZE // cfg.patch) ** 2
        self.pos = Tensor(rng.normal(0, 0.02, size=(1, n_tokens, d)), requires_grad=True)
        self.blocks = [AttentionBlock(d, cfg.vit_heads, cfg.vit_mlp, rng) for _ in range(cfg.vit_depth)]
        self.ln = LayerNorm(d)
        self.proj = Linear(d, cfg.embed_dim, rng)
        self._last_block_input: Tensor | None = None

    def tokens(self, x: Tensor) -> Tensor:
        p = self.patch_embed(x)  # (B, D, g, g)
        B, D = p.shape[:2]
        return p.reshape(B, D, -1).transpose(0, 2, 1) + self.pos

    def forward(self, x: Tensor) -> Tensor:
        h = self.tokens(x)
        for i, blk in enumerate(self.blocks):
            if i == len(self.blocks) - 1:
                self._last_block_input = h
            h = blk(h)
        return self.proj(self.ln(h).mean(axis=1))

    def first_conv_name(self) -> str:
        return "patch_embed"


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.text_dim
        self.token_embed = Embedding(cfg.vocab_size, d, rng)
        self.pos = Tensor(rng.normal(0, 0.01, size=(1, MAX_LEN, d)), requires_grad=True)
        self.blocks = [AttentionBlock(d, cfg.text_heads, cfg.text_mlp, rng, causal=True)
                       for _ in range(cfg.text_depth)]
        self.ln = LayerNorm(d)
        self.proj = Linear(d, cfg.embed_dim, rng)

    def forward(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        h = self.token_embed(tokens) + self.pos[:, : tokens.shape[1]]
        for blk in self.blocks:
            h = blk(h)
        h = self.ln(h)
        end = Tokenizer.end_positions(tokens)
        pooled = h[np.arange(tokens.shape[0]), end]
        return self.proj(pooled)


class ClipModel(Module):
    """Dual encoder emitting L2-normalized embeddings in a shared space."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.vocab_size == 0:
            cfg = ModelConfig(**{**cfg.__dict__, "vocab_size": len(Tokenizer())})
        self.cfg = cfg
        rng = make_rng(seed, "init", cfg.variant)
        if cfg.variant == "cnn":
            self.image = CNNEncoder(cfg, rng)
        elif cfg.variant == "vit":
            self.image = ViTEncoder(cfg, rng)
        else:
            raise ValueError(f"unknown image encoder variant {cfg.variant!r}")
        self.text = TextEncoder(cfg, make_rng(seed, "init", "text"))
        self.logit_scale = Tensor(np.array([cfg.init_logit_scale]), requires_grad=True)

    def encode_image(self, images) -> Tensor:
        return F.l2_normalize(self.image(ag.as_tensor(images)), axis=-1)

    def encode_text(self, tokens) -> Tensor:
        return F.l2_normalize(self.text(tokens), axis=-1)

    def clone(self) -> "ClipModel":
        return copy.deepcopy(self)

    def quantizable_layers(self) -> dict[str, Module]:
        """Every conv/linear layer by stable name (``image.*`` / ``text.*``)."""
        out = {}
        for name, mod in self.named_modules():
            if isinstance(mod, (Linear, Conv2d)):
                out[name] = mod
        return out

    def first_conv_name(self) -> str:
        return "image." + self.image.first_conv_name()
