"""Procedural shapes-and-captions dataset, tokenizer and prompt sets."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import make_rng

IMAGE_SIZE = 64
MAX_LEN = 16
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle", "cross")
CLASSES = tuple((c, s) for s in SHAPES for c in COLORS)
N_CLASSES = len(CLASSES)

RGB = {
    "red": (0.88, 0.14, 0.12),
    "green": (0.14, 0.74, 0.18),
    "blue": (0.14, 0.24, 0.90),
    "yellow": (0.92, 0.84, 0.12),
}

DISTRACTOR_COLORS = ("purple", "orange", "pink", "cyan")
DISTRACTOR_SHAPES = ("star", "heart", "hexagon", "diamond")

TEMPLATES = (
    "a photo of a {}",
    "a picture of a {}",
    "an image of a {}",
    "a drawing of a {}",
    "a rendering of a {}",
    "this is a {}",
    "there is a {}",
    "a photo of a small {}",
    "a photo of a large {}",
    "a close up photo of a {}",
)

_WORDS = (
    "a an the of is this there photo picture image drawing rendering close up "
    "small large big little bright dark shiny plain object shape colored one single "
    "on with background textured in scene centered toy my "
    "red green blue yellow purple orange pink brown black white gray cyan "
    "circle square triangle cross star heart hexagon ring arrow diamond oval pentagon"
).split()
PAD, END, UNK = "<pad>", "<end>", "<unk>"


class Tokenizer:
    """Word-level tokenizer with a fixed vocabulary and end-token termination."""

    def __init__(self, max_len: int = MAX_LEN):
        self.vocab = [PAD, END, UNK] + list(dict.fromkeys(_WORDS))
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_len = max_len

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def end_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.vocab)

    @staticmethod
    def normalize(text: str) -> str:
        return " ".join(re.findall(r"[a-z]+", text.lower()))

    def encode(self, text: str) -> np.ndarray:
        words = self.normalize(text).split()
        if len(words) + 1 > self.max_len:
            raise ValueError(f"caption longer than {self.max_len - 1} words: {text!r}")
        ids = [self.index.get(w, self.index[UNK]) for w in words] + [self.end_id]
        out = np.zeros(self.max_len, dtype=np.int64)
        out[:len(ids)] = ids
        return out

    def encode_batch(self, texts) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts])

    def decode(self, ids) -> str:
        words = []
        for i in np.asarray(ids).tolist():
            if i == self.end_id:
                break
            if i != self.pad_id:
                words.append(self.vocab[i])
        return " ".join(words)

    @staticmethod
    def end_positions(tokens: np.ndarray) -> np.ndarray:
        return np.argmax(np.asarray(tokens) == 1, axis=-1)


def caption(label: int) -> str:
    color, shape = CLASSES[label]
    return f"a photo of a {color} {shape}"


def class_prompts() -> list[str]:
    return [caption(i) for i in range(N_CLASSES)]


def distractor_prompts() -> list[str]:
    return [f"a photo of a {c} {s}" for s in DISTRACTOR_SHAPES for c in DISTRACTOR_COLORS]


def prompt_set() -> list[str]:
    """The 32 prompts used for synthesis guidance and text calibration."""
    return class_prompts() + distractor_prompts()


def prompt_subjects() -> list[str]:
    return [f"{c} {s}" for c, s in CLASSES] + [f"{c} {s}" for s in DISTRACTOR_SHAPES for c in DISTRACTOR_COLORS]


def text_calibration_prompts(n: int, seed: int) -> list[str]:
    """``n`` prompts: the prompt-set subjects sampled with repetition under paraphrase templates."""
    rng = make_rng(seed, "text-calibration")
    subjects = prompt_subjects()
    base = prompt_set()
    out = list(base[: min(n, len(base))])
    while len(out) < n:
        subj = subjects[rng.integers(len(subjects))]
        tmpl = TEMPLATES[rng.integers(len(TEMPLATES))]
        out.append(tmpl.format(subj))
    return out


# ---------------------------------------------------------------------------
# image generation
# ---------------------------------------------------------------------------


def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    from .functional import resize_matrix
    r = resize_matrix(grid.shape[0], size).astype(np.float64)
    return r @ grid @ r.T


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.3, 0.7)
    tint = rng.uniform(-0.06, 0.06, size=3)
    smooth = _upsample(rng.normal(0, 1, size=(8, 8)), size)
    smooth = smooth / (np.abs(smooth).max() + 1e-9) * rng.uniform(0.05, 0.18)
    yy, xx = np.mgrid[0:size, 0:size]
    theta = rng.uniform(0, math.pi)
    freq = rng.uniform(0.15, 0.6)
    stripes = np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + rng.uniform(0, 2 * math.pi))
    stripes *= rng.uniform(0.0, 0.12)
    grain = rng.normal(0, 0.03, size=(3, size, size))
    bg = base + tint[:, None, None] + smooth[None] + stripes[None] + grain
    return bg


def _shape_mask(shape: str, rng: np.random.Generator, size: int) -> np.ndarray:
    r = rng.uniform(9.0, 16.0)
    cx = rng.uniform(r + 2, size - r - 2)
    cy = rng.uniform(r + 2, size - r - 2)
    rot = rng.uniform(-0.35, 0.35)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(rot) + dy * math.sin(rot)
    v = -dx * math.sin(rot) + dy * math.cos(rot)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        h = r * 0.82
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if shape == "triangle":
        # equilateral, apex up, centroid at the center
        top, base_y = -r, r * 0.5
        half_w = (v - top) / (base_y - top) * r * 0.866
        return (v >= top) & (v <= base_y) & (np.abs(u) <= half_w)
    if shape == "cross":
        t = r * 0.3
        return ((np.abs(u) <= t) & (np.abs(v) <= r)) | ((np.abs(v) <= t) & (np.abs(u) <= r))
    raise ValueError(shape)


def render(label: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    color, shape = CLASSES[label]
    img = _background(rng, size)
    mask = _shape_mask(shape, rng, size)
    rgb = np.array(RGB[color]) + rng.uniform(-0.06, 0.06, size=3)
    shade = 1.0 + rng.normal(0, 0.03, size=(size, size))
    fg = rgb[:, None, None] * shade[None]
    img = np.where(mask[None], fg, img)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


@dataclass
class ShapesDataset:
    images: np.ndarray          # (N, 3, 64, 64) in [0, 1]
    labels: np.ndarray          # (N,)
    tokens: np.ndarray          # (N, MAX_LEN)
    masks: np.ndarray           # (N, 64, 64) foreground masks
    split: str

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def captions(self) -> list[str]:
        return [caption(int(l)) for l in self.labels]

    def normalized(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return normalize_images(imgs)

    def export(self, out_dir) -> Path:
        """Write PNG images and a JSON manifest of captions and labels."""
        from PIL import Image
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        records = []
        for i, (img, lab) in enumerate(zip(self.images, self.labels)):
            name = f"images/{self.split}_{i:05d}.png"
            arr = (np.clip(img.transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
            Image.fromarray(arr).save(out / name)
            records.append({"file": name, "label": int(lab), "caption": caption(int(lab))})
        manifest = out / f"{self.split}_manifest.json"
        manifest.write_text(json.dumps({"split": self.split, "classes": [f"{c} {s}" for c, s in CLASSES],
                                        "items": records}, indent=1))
        return manifest


def normalize_images(images01: np.ndarray) -> np.ndarray:
    return ((np.asarray(images01, dtype=np.float32) - IMAGE_MEAN) / IMAGE_STD).astype(np.float32)


def denormalize_images(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32) * IMAGE_STD + IMAGE_MEAN


def _make_split(seed: int, n: int, split: str, tok: Tokenizer) -> ShapesDataset:
    order = make_rng(seed, "labels", split).permutation(n)
    labels = (np.arange(n) % N_CLASSES)[order]
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    masks = np.empty((n, IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    for i, lab in enumerate(labels):
        images[i], masks[i] = render(int(lab), make_rng(seed, "image", split, i))
    tokens = tok.encode_batch([caption(int(l)) for l in labels])
    return ShapesDataset(images, labels.astype(np.int64), tokens, masks, split)


def generate_dataset(seed: int, n_train: int, n_test: int) -> tuple[ShapesDataset, ShapesDataset]:
    """Deterministic balanced train/test splits; every image is seeded independently."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    tok = Tokenizer()
    return _make_split(seed, n_train, "train", tok), _make_split(seed, n_test, "test", tok)


def mask_contrast(ds: ShapesDataset) -> float:
    """Mean absolute RGB difference between foreground and background pixel means."""
    diffs = []
    for img, m in zip(ds.images, ds.masks):
        fg = img[:, m].mean(axis=1)
        bg = img[:, ~m].mean(axis=1)
        diffs.append(np.abs(fg - bg).mean())
    return float(np.mean(diffs))
