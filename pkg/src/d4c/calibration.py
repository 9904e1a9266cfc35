"""Post-training quantization of both encoders by sequential output reconstruction.

Each reconstruction unit (a residual stage of the CNN, or a single linear
projection of a transformer) is fitted so that its quantized output matches
the FP model's output for the same original calibration inputs.  The unit's
input is produced by the already-quantized prefix of the network.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Tokenizer
from .model import ClipModel, ConvBN, ModelConfig
from .nn import Conv2d, Linear, Module
from .optim import Adam
from .quant import FakeQuantizer, QuantParams, activation_granularity
from .rng import make_rng

logger = logging.getLogger(__name__)

FP_BITS = 32  # a bit-width of 32 switches a quantizer off


class ReconstructionWarning(UserWarning):
    """The reconstruction loss did not decrease over the second half of training."""


@dataclass
class CalibConfig:
    n_images: int = 128
    n_text: int = 512
    iterations: int = 20000
    text_iterations: int | None = None   # defaults to ``iterations``
    lr_image: float = 4.0e-5
    lr_text: float = 4.0e-6
    w_bits: int = 4
    a_bits: int = 8
    batch_size: int = 16
    text_batch_size: int = 64
    text_mlp_bits: int = 8
    heldout_frac: float = 0.25
    learn_rounding: bool = False
    rounding_weight: float = 0.01
    checks: int = 10          # held-out evaluations per unit (best one is kept)
    seed: int = 0

    def __post_init__(self):
        for b in (self.w_bits, self.a_bits, self.text_mlp_bits):
            if not (2 <= b <= 8 or b == FP_BITS):
                raise ValueError(f"bit-width {b} outside 2..8 (or {FP_BITS} for disabled)")
        if self.lr_image <= 0 or self.lr_text <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.heldout_frac < 1:
            raise ValueError("heldout_frac must be in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerQuant:
    """Quantizers attached to one conv/linear layer."""

    name: str
    weight: FakeQuantizer | None
    act: FakeQuantizer | None
    excluded: bool = False
    w_bits: int = FP_BITS
    a_bits: int = FP_BITS


@dataclass
class ReconstructionUnit:
    name: str
    module: Module
    layers: list[str]
    encoder: str            # "image" or "text"
    fp_outputs: np.ndarray | None = None
    inputs: np.ndarray | None = None
    loss_trace: list = field(default_factory=list)
    initial_mse: float = float("nan")
    final_mse: float = float("nan")
    quantized_output: np.ndarray | None = None


@dataclass
class QuantizedClip:
    model: ClipModel
    layers: dict[str, LayerQuant]
    config: CalibConfig
    units: list[ReconstructionUnit] = field(default_factory=list)

    def set_enabled(self, flag: bool) -> None:
        for lq in self.layers.values():
            for q in (lq.weight, lq.act):
                if q is not None:
                    q.enabled = flag

    def encode_image(self, images) -> Tensor:
        return self.model.encode_image(images)

    def encode_text(self, tokens) -> Tensor:
        return self.model.encode_text(tokens)

    def quant_records(self) -> tuple[dict, dict[str, np.ndarray]]:
        """Header ``quant`` section and the scale / zero-point tensors it refers to."""
        records, tensors = {}, {}
        for name, lq in self.layers.items():
            rec = {"excluded": lq.excluded}
            for kind, q in (("weight", lq.weight), ("act", lq.act)):
                if q is None:
                    continue
                p = q.params()
                sref, zref = f"quant.{name}.{kind}.scale", f"quant.{name}.{kind}.zero_point"
                tensors[sref] = p.scale.astype(np.float32)
                tensors[zref] = p.zero_point.astype(np.float32)
                if q.alpha is not None:
                    tensors[f"quant.{name}.{kind}.round_up"] = q.rounding_offsets().astype(np.float32)
                gran = "per_tensor" if p.axis is None else f"per_channel({p.axis})"
                rec[kind] = {"bits": p.bits, "granularity": gran, "axis": p.axis,
                             "scale": sref, "zero_point": zref}
            records[name] = rec
        return records, tensors

    def save(self, path, meta: dict | None = None) -> None:
        records, qt = self.quant_records()
        tensors = dict(self.model.state_dict())
        tensors.update(qt)
        meta = dict(meta or {})
        meta.update({"model_config": self.model.cfg.to_dict(), "calib_config": self.config.to_dict(),
                     "bn_folded": True})
        save_checkpoint(path, tensors, meta=meta, quant=records)


# ---------------------------------------------------------------------------
# model preparation
# ---------------------------------------------------------------------------


def fold_batchnorms(model: ClipModel) -> None:
    """Absorb every BN into its preceding conv (eval-mode statistics)."""
    for _, mod in model.named_modules():
        if isinstance(mod, ConvBN):
            mod.fold_bn()


def prepare_model(model: ClipModel) -> ClipModel:
    """Deep copy with BN folded; the FP model passed in is never mutated."""
    m = model.clone()
    fold_batchnorms(m)
    m.requires_grad_(False)
    return m


def _is_text_mlp(name: str) -> bool:
    return name.startswith("text.") and (name.endswith("mlp.fc1") or name.endswith("mlp.fc2"))


def layer_bits(model: ClipModel, name: str, cfg: CalibConfig) -> tuple[int, int, bool]:
    """(weight bits, activation bits, excluded) for one conv/linear layer."""
    if name == model.first_conv_name():
        return FP_BITS, FP_BITS, True
    if _is_text_mlp(name):
        return cfg.text_mlp_bits, cfg.text_mlp_bits, False
    return cfg.w_bits, cfg.a_bits, False


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------


def partition(model: ClipModel) -> list[ReconstructionUnit]:
    """Ordered reconstruction units covering every quantized layer exactly once.

    CNN image encoder: one unit per residual stage plus the projection head.
    ViT image encoder and text encoder: one unit per linear layer.  The
    excluded first conv belongs to no unit.
    """
    layers = model.quantizable_layers()
    first = model.first_conv_name()
    units: list[ReconstructionUnit] = []
    if model.cfg.variant == "cnn":
        for i, stage in enumerate(model.image.stages):
            prefix = f"image.stages.{i}."
            members = [n for n in layers if n.startswith(prefix) and n != first]
            if members:
                units.append(ReconstructionUnit(f"image.stages.{i}", stage, members, "image"))
        units.append(ReconstructionUnit("image.proj", model.image.proj, ["image.proj"], "image"))
    else:
        for name, mod in layers.items():
            if name.startswith("image.") and name != first:
                units.append(ReconstructionUnit(name, mod, [name], "image"))
    for name, mod in layers.items():
        if name.startswith("text."):
            units.append(ReconstructionUnit(name, mod, [name], "text"))
    for name in layers:
        if not name:
            raise ValueError("unnamed layer in model")
    return units


# ---------------------------------------------------------------------------
# capture helpers
# ---------------------------------------------------------------------------


def _run_encoder(model: ClipModel, encoder: str, data: np.ndarray, batch: int) -> None:
    with ag.no_grad():
        for i in range(0, len(data), batch):
            if encoder == "image":
                model.image(Tensor(data[i:i + batch]))
            else:
                model.text(data[i:i + batch])


def capture(model: ClipModel, modules: dict[str, Module], encoder: str, data: np.ndarray,
            batch: int, what: str = "output") -> dict[str, np.ndarray]:
    """Run ``data`` through an encoder and collect each module's input or output."""
    store: dict[str, list] = {k: [] for k in modules}
    hooks = []
    for key, mod in modules.items():
        def hook(m, args, out, key=key):
            store[key].append((args[0] if what == "input" else out).data.copy())
        hooks.append((mod, mod.add_hook(hook)))
    try:
        _run_encoder(model, encoder, data, batch)
    finally:
        for mod, h in hooks:
            mod.remove_hook(h)
    return {k: np.concatenate(v) for k, v in store.items()}


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def _unit_mse(unit: ReconstructionUnit, x: np.ndarray, y: np.ndarray, batch: int) -> float:
    tot, n = 0.0, 0
    with ag.no_grad():
        for i in range(0, len(x), batch):
            out = unit.module(_as_input(x[i:i + batch])).data.astype(np.float64)
            tot += float(((out - y[i:i + batch]) ** 2).sum())
            n += out.size
    return tot / max(n, 1)


def _as_input(x: np.ndarray) -> Tensor:
    return Tensor(x)


def _snapshot(qs: list[FakeQuantizer]) -> list[np.ndarray]:
    return [t.data.copy() for q in qs for t in q.learnable()]


def _restore(qs: list[FakeQuantizer], snap: list[np.ndarray]) -> None:
    it = iter(snap)
    for q in qs:
        for t in q.learnable():
            t.data = next(it)


def reconstruct(unit: ReconstructionUnit, quantizers: list[FakeQuantizer], inputs: np.ndarray,
                targets: np.ndarray, cfg: CalibConfig, lr: float, iterations: int, batch: int,
                rng: np.random.Generator) -> ReconstructionUnit:
    """Fit the unit's quantizer scales (and optional rounding) to the FP outputs.

    Minimizes the mean squared error between the unit's quantized output on
    ``inputs`` and ``targets`` with Adam on mini-batches of ``batch``.  A
    ``heldout_frac`` share of the samples is never trained on; the quantizer
    state with the lowest held-out MSE (including the initial OMSE state) is
    kept, so reconstruction never ends worse than its initialization.
    """
    n = len(inputs)
    if n < batch:
        raise ValueError(f"unit {unit.name}: {n} calibration samples < batch size {batch}")
    perm = rng.permutation(n)
    n_hold = int(round(n * cfg.heldout_frac))
    if n - n_hold < batch:
        n_hold = 0
    hold, train = perm[:n_hold], perm[n_hold:]
    eval_idx = hold if n_hold else train
    xe, ye = inputs[eval_idx], targets[eval_idx]

    params = [t for q in quantizers for t in q.learnable()]
    for p in params:
        p.requires_grad = True
    init_mse = _unit_mse(unit, xe, ye, batch)
    unit.initial_mse = init_mse
    best = (init_mse, _snapshot(quantizers))
    trace: list[float] = []
    if params and iterations > 0:
        opt = Adam(params, lr=lr)
        check_every = max(1, iterations // max(cfg.checks, 1))
        order = train[rng.permutation(len(train))]
        pos = 0
        for it in range(iterations):
            if pos + batch > len(order):
                order = train[rng.permutation(len(train))]
                pos = 0
            idx = order[pos:pos + batch]
            pos += batch
            out = unit.module(_as_input(inputs[idx]))
            diff = out - Tensor(targets[idx])
            loss = (diff * diff).mean()
            if cfg.learn_rounding:
                beta = 20.0 - 18.0 * it / max(iterations - 1, 1)
                for q in quantizers:
                    reg = q.rounding_regularizer(beta)
                    if reg is not None:
                        loss = loss + reg * (cfg.rounding_weight / max(reg.data.size, 1))
            val = loss.item()
            if not math.isfinite(val):
                raise NonFiniteError(f"unit {unit.name}: loss {val} at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            for q in quantizers:
                q.reproject()
            trace.append(val)
            if (it + 1) % check_every == 0 or it == iterations - 1:
                if cfg.learn_rounding and it == iterations - 1:
                    for q in quantizers:
                        q.harden()
                m = _unit_mse(unit, xe, ye, batch)
                if m <= best[0]:
                    best = (m, _snapshot(quantizers))
        half = len(trace) // 2
        if half >= 50:
            w = max(1, half // 10)
            # relative slack so summation-order noise does not count as progress
            if np.mean(trace[-w:]) >= np.mean(trace[half:half + w]) * (1.0 - 1e-6):
                warnings.warn(f"unit {unit.name}: reconstruction loss did not decrease over the final half",
                              ReconstructionWarning, stacklevel=2)
    _restore(quantizers, best[1])
    for q in quantizers:
        q.harden()
    for p in params:
        p.requires_grad = False
    unit.final_mse = best[0]
    unit.loss_trace = trace
    return unit


def _make_quantizers(model: ClipModel, unit: ReconstructionUnit, layer_inputs: dict[str, np.ndarray],
                     cfg: CalibConfig, layers: dict[str, LayerQuant]) -> list[FakeQuantizer]:
    mods = model.quantizable_layers()
    out = []
    for name in unit.layers:
        mod = mods[name]
        wb, ab, excluded = layer_bits(model, name, cfg)
        wq = aq = None
        if not excluded and wb != FP_BITS:
            wq = FakeQuantizer.from_data(mod.weight.data, wb, axis=0, learn_rounding=cfg.learn_rounding)
        if not excluded and ab != FP_BITS:
            g = activation_granularity(name)
            aq = FakeQuantizer.from_data(layer_inputs[name], ab, axis=g.axis if g.per_channel else None)
        mod.weight_quant, mod.act_quant = wq, aq
        layers[name] = LayerQuant(name, wq, aq, excluded, wb, ab)
        out.extend(q for q in (wq, aq) if q is not None)
    return out


def quantize_clip(model: ClipModel, images: np.ndarray, prompts: list[str], cfg: CalibConfig,
                  csv_path=None) -> QuantizedClip:
    """Quantize both encoders of a frozen FP model.

    ``images`` are model-space synthetic calibration images; ``prompts`` the
    text calibration inputs.  Units are reconstructed strictly in network
    order: while unit ``i`` is fitted, units before it run quantized and
    units after it run in FP.
    """
    images = np.asarray(images, dtype=np.float32)[: cfg.n_images]
    prompts = list(prompts)[: cfg.n_text]
    if len(images) < cfg.batch_size:
        raise ValueError(f"need at least {cfg.batch_size} calibration images, got {len(images)}")
    if len(prompts) < cfg.text_batch_size:
        raise ValueError(f"need at least {cfg.text_batch_size} text calibration inputs, got {len(prompts)}")
    tokens = Tokenizer().encode_batch(prompts)
    qmodel = prepare_model(model)
    units = partition(qmodel)
    layers: dict[str, LayerQuant] = {}
    first = qmodel.first_conv_name()
    layers[first] = LayerQuant(first, None, None, True)
    mods = qmodel.quantizable_layers()

    data = {"image": images, "text": tokens}
    bsz = {"image": cfg.batch_size, "text": cfg.text_batch_size}
    lrs = {"image": cfg.lr_image, "text": cfg.lr_text}
    iters = {"image": cfg.iterations,
             "text": cfg.iterations if cfg.text_iterations is None else cfg.text_iterations}
    fp_out = {}
    for enc in ("image", "text"):
        enc_units = [u for u in units if u.encoder == enc]
        fp_out.update(capture(qmodel, {u.name: u.module for u in enc_units}, enc, data[enc], 128))

    for k, unit in enumerate(units):
        enc = unit.encoder
        # prefix quantized, this unit and later units in FP
        member_mods = {n: mods[n] for n in unit.layers}
        layer_in = capture(qmodel, {**member_mods, "__unit__": unit.module}, enc, data[enc], 128, what="input")
        unit.inputs = layer_in.pop("__unit__")
        unit.fp_outputs = fp_out[unit.name]
        qs = _make_quantizers(qmodel, unit, layer_in, cfg, layers)
        rng = make_rng(cfg.seed, "reconstruct", unit.name)
        reconstruct(unit, qs, unit.inputs, unit.fp_outputs, cfg, lrs[enc], iters[enc], bsz[enc], rng)
        logger.info("unit %d/%d %s mse %.3e -> %.3e", k + 1, len(units), unit.name,
                    unit.initial_mse, unit.final_mse)
        # free captured activations; the relative error needs one quantized pass
        unit.quantized_output = None
        unit.inputs = None
        unit.fp_outputs = None
    qc = QuantizedClip(qmodel, layers, cfg, units)
    if csv_path is not None:
        write_loss_csv(qc, csv_path)
    return qc


def unit_relative_errors(qc: QuantizedClip, model: ClipModel, images: np.ndarray,
                         prompts: list[str]) -> dict[str, float]:
    """Relative output error ``||O - O_hat|| / ||O||`` of every unit in the fully quantized model.

    Outputs are compared on the same original inputs, so prefix errors
    accumulate as they would at inference time.
    """
    tokens = Tokenizer().encode_batch(list(prompts))
    ref = prepare_model(model)
    out = {}
    for enc, data in (("image", np.asarray(images, dtype=np.float32)), ("text", tokens)):
        us = [u for u in qc.units if u.encoder == enc]
        ref_mods = {u.name: dict(ref.named_modules())[u.name] for u in us}
        q_mods = {u.name: u.module for u in us}
        o = capture(ref, ref_mods, enc, data, 128)
        oq = capture(qc.model, q_mods, enc, data, 128)
        for u in us:
            a, b = o[u.name].astype(np.float64), oq[u.name].astype(np.float64)
            out[u.name] = float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-12))
    return out


def write_loss_csv(qc: QuantizedClip, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["unit", "iteration", "loss"])
        for u in qc.units:
            for i, v in enumerate(u.loss_trace):
                w.writerow([u.name, i, repr(float(v))])
        w.writerow([])
        w.writerow(["unit", "initial_heldout_mse", "final_heldout_mse"])
        for u in qc.units:
            w.writerow([u.name, repr(u.initial_mse), repr(u.final_mse)])


def load_quantized_clip(path) -> QuantizedClip:
    """Rebuild a :class:`QuantizedClip` from a quantized checkpoint."""
    tensors, header = load_checkpoint(path)
    meta = header["meta"]
    cfg = CalibConfig(**meta["calib_config"])
    model = ClipModel(ModelConfig.from_dict(meta["model_config"]))
    fold_batchnorms(model)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("quant.")})
    model.requires_grad_(False)
    mods = model.quantizable_layers()
    layers = {}
    for name, rec in header["quant"].items():
        qs = {}
        for kind in ("weight", "act"):
            r = rec.get(kind)
            if r is None:
                qs[kind] = None
                continue
            p = QuantParams(tensors[r["scale"]].astype(np.float64), tensors[r["zero_point"]].astype(np.int64),
                            r["bits"], r["axis"])
            qs[kind] = FakeQuantizer(p)
            up = tensors.get(f"quant.{name}.{kind}.round_up")
            if up is not None:
                qs[kind].set_hard_rounding(up)
        mods[name].weight_quant, mods[name].act_quant = qs["weight"], qs["act"]
        layers[name] = LayerQuant(name, qs["weight"], qs["act"], rec["excluded"],
                                  rec["weight"]["bits"] if "weight" in rec else FP_BITS,
                                  rec["act"]["bits"] if "act" in rec else FP_BITS)
    return QuantizedClip(model, layers, cfg)
