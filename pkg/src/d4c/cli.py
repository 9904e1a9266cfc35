"""Command-line pipeline: gen-data, pretrain, synth, quantize, eval, diagnose, report.

Every command reads one JSON run config (unknown keys are rejected), writes
its artifacts under the run directory and records a manifest in
``<out>/manifests/``.  Each artifact carries the hash of the config subset
that produced it; downstream commands recompute the expected hash of their
inputs and refuse to run on a mismatch unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibConfig, load_quantized_clip, quantize_clip, write_loss_csv
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .data import (IMAGE_SIZE, N_CLASSES, ShapesDataset, Tokenizer, caption, class_prompts, generate_dataset,
                   normalize_images, text_calibration_prompts)
from .model import ClipModel, ModelConfig
from .synthesis import METHODS, PAEConfig, SynthesisConfig, synthesize
from .train import DEFAULT_STEPS, PretrainConfig, encode_images, pretrain_clip, zero_shot_classify

logger = logging.getLogger("d4c")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_HASH = 0, 2, 3, 4
PAE_FLAGS = {"H": "flip", "A": "affine", "C": "color", "G": "blur", "R": "erase"}


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------


def _strict(cls, d: dict, where: str, forbidden: tuple = ()):
    names = {f.name for f in dataclasses.fields(cls)} - set(forbidden)
    unknown = set(d) - names
    if unknown:
        raise CliError(f"unknown keys in {where}: {sorted(unknown)}", EXIT_CONFIG)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid {where}: {e}", EXIT_CONFIG) from e


@dataclass
class DataConfig:
    seed: int = 0
    n_train: int = 4096
    n_test: int = 512


@dataclass
class DiagnosticsConfig:
    n_samples: int = 32
    grid: int = 8


@dataclass
class AblationConfig:
    pgsi: bool = True
    scg: bool = True
    pae: bool = True
    H: bool = True
    A: bool = True
    C: bool = True
    G: bool = True
    R: bool = True

    def method(self) -> str:
        if not self.pgsi:
            if self.scg or self.pae:
                raise CliError("scg/pae ablations build on pgsi; enable pgsi", EXIT_CONFIG)
            return "gaussian"
        return {(False, False): "pgsi_only", (True, False): "pgsi_scg",
                (False, True): "pgsi_pae", (True, True): "d4c"}[(self.scg, self.pae)]


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "cnn"
    method: str = "d4c"
    bits: tuple = (4, 8)
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    calibration: CalibConfig = field(default_factory=CalibConfig)
    ablation: AblationConfig | None = None
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise CliError(f"unknown keys in config: {sorted(unknown)}", EXIT_CONFIG)
        cfg = cls(**{k: v for k, v in d.items() if k not in
                     ("data", "pretrain", "synthesis", "calibration", "ablation", "diagnostics")})
        cfg.data = _strict(DataConfig, d.get("data", {}), "data")
        cfg.pretrain = _strict(PretrainConfig, d.get("pretrain", {}), "pretrain")
        syn = dict(d.get("synthesis", {}))
        if "pae" in syn:
            syn["pae"] = _strict(PAEConfig, syn["pae"], "synthesis.pae")
        cfg.synthesis = _strict(SynthesisConfig, syn, "synthesis", forbidden=("seed",))
        cfg.calibration = _strict(CalibConfig, d.get("calibration", {}), "calibration",
                                  forbidden=("w_bits", "a_bits", "seed"))
        if d.get("ablation") is not None:
            cfg.ablation = _strict(AblationConfig, d["ablation"], "ablation")
        cfg.diagnostics = _strict(DiagnosticsConfig, d.get("diagnostics", {}), "diagnostics")
        cfg.finalize()
        return cfg

    def finalize(self) -> None:
        """Validate and push run-level settings into the stage configs."""
        if self.variant not in ("cnn", "vit"):
            raise CliError(f"unknown variant {self.variant!r}", EXIT_CONFIG)
        self.bits = tuple(int(b) for b in self.bits)
        if len(self.bits) != 2:
            raise CliError("bits must be [W, A]", EXIT_CONFIG)
        if self.ablation is not None:
            if self.method not in ("d4c", "pgsi_only", "pgsi_scg", "pgsi_pae", "gaussian"):
                raise CliError("ablation flags apply to the prompt-guided method family", EXIT_CONFIG)
            self.method = self.ablation.method()
            self.synthesis.pae = PAEConfig(**{**dataclasses.asdict(self.synthesis.pae),
                                              **{v: getattr(self.ablation, k) for k, v in PAE_FLAGS.items()}})
        if self.method not in METHODS:
            raise CliError(f"unknown method {self.method!r}; choose from {METHODS}", EXIT_CONFIG)
        self.synthesis.seed = self.seed
        if self.pretrain.steps is None:
            self.pretrain.steps = DEFAULT_STEPS[self.variant]
        try:
            self.calibration = CalibConfig(**{**dataclasses.asdict(self.calibration),
                                              "w_bits": self.bits[0], "a_bits": self.bits[1], "seed": self.seed})
        except ValueError as e:
            raise CliError(str(e), EXIT_CONFIG) from e

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bits"] = list(self.bits)
        d["synthesis"] = self.synthesis.to_dict()
        return d

    # --- stage hashes: each covers exactly the settings its artifact depends on
    def data_hash(self) -> str:
        return _hash({"data": dataclasses.asdict(self.data)})

    def model_hash(self) -> str:
        return _hash({"data": self.data_hash(), "variant": self.variant,
                      "pretrain": dataclasses.asdict(self.pretrain)})

    def synth_hash(self) -> str:
        return _hash({"model": self.model_hash(), "method": self.method, "synthesis": self.synthesis.to_dict()})

    def quant_hash(self) -> str:
        return _hash({"synth": self.synth_hash(), "calibration": self.calibration.to_dict()})

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return _hash(d)

    # --- artifact paths
    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def data_paths(self) -> tuple[Path, Path]:
        return self.out / "data" / "train.ckpt", self.out / "data" / "test.ckpt"

    def model_path(self) -> Path:
        return self.out / "models" / f"fp_{self.variant}.ckpt"

    @property
    def tag(self) -> str:
        """Method name, suffixed with the enabled perturbations when only some are on."""
        on = [k for k, v in PAE_FLAGS.items() if getattr(self.synthesis.pae, v)]
        if self.method in ("d4c", "pgsi_pae") and len(on) < len(PAE_FLAGS):
            return f"{self.method}-{''.join(on) or 'none'}"
        return self.method

    def synth_dir(self) -> Path:
        return self.out / "synth" / self.variant / f"{self.tag}_seed{self.seed}"

    def quant_dir(self) -> Path:
        w, a = self.bits
        return self.out / "quant" / self.variant / f"{self.tag}_W{w}A{a}_seed{self.seed}"


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()[:16]


def load_config(path: str | None, args: argparse.Namespace) -> RunConfig:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise CliError(f"config file {path} not found", EXIT_CONFIG) from e
        except json.JSONDecodeError as e:
            raise CliError(f"config file {path} is not valid JSON: {e}", EXIT_CONFIG) from e
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out_dir"] = args.out
    if args.method is not None:
        raw["method"] = args.method
        raw.pop("ablation", None)
    if args.variant is not None:
        raw["variant"] = args.variant
    if args.bits is not None:
        try:
            raw["bits"] = [int(b) for b in args.bits.split(",")]
        except ValueError as e:
            raise CliError(f"--bits expects W,A (got {args.bits!r})", EXIT_CONFIG) from e
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


def _file_sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _check_input(path: Path, expected_hash: str, what: str, make: str, force: bool) -> dict:
    if not path.exists():
        raise CliError(f"missing {what} at {path}; run `d4c {make}` with the same config first", EXIT_MISSING)
    header = read_header(path)
    got = header.get("meta", {}).get("stage_hash")
    if got != expected_hash:
        msg = f"{what} at {path} was produced by a different config (hash {got}, expected {expected_hash})"
        if not force:
            raise CliError(msg + "; rerun that stage or pass --force", EXIT_HASH)
        logger.warning("%s; continuing because of --force", msg)
    return header


def _up_to_date(path: Path, stage_hash: str, force: bool) -> bool:
    """True when ``path`` already holds this stage's result; refuses to clobber other results."""
    if force or not path.exists():
        return False
    got = read_header(path).get("meta", {}).get("stage_hash")
    if got == stage_hash:
        return True
    raise CliError(f"{path} holds results of another config (hash {got}); pass --force to overwrite", EXIT_HASH)


def write_manifest(cfg: RunConfig, name: str, stage_hash: str, inputs: dict, outputs: list[Path],
                   metrics: dict | None = None, extra: dict | None = None, seconds: float | None = None) -> Path:
    m = {"command": name, "config_hash": cfg.config_hash(), "stage_hash": stage_hash,
         "variant": cfg.variant, "method": cfg.tag, "bits": list(cfg.bits), "seed": cfg.seed,
         "inputs": inputs, "outputs": {str(p): _file_sha(p) for p in outputs if Path(p).is_file()},
         "metrics": metrics or {}, "config": cfg.to_dict()}
    if extra:
        m.update(extra)
    if seconds is not None:
        m["seconds"] = round(seconds, 3)
    path = cfg.out / "manifests" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(m, indent=1, sort_keys=True))
    return path


def _meta(cfg: RunConfig, stage_hash: str, **kw) -> dict:
    # only the stage hash: an artifact shared by several run configs must not depend on which one wrote it
    return {"stage_hash": stage_hash, **kw}


def save_dataset(path: Path, ds: ShapesDataset, meta: dict) -> None:
    save_checkpoint(path, {"images": ds.images, "labels": ds.labels.astype(np.float32),
                           "masks": ds.masks.astype(np.float32)}, meta={**meta, "split": ds.split})


def load_dataset(path: Path) -> ShapesDataset:
    t, h = load_checkpoint(path)
    labels = t["labels"].astype(np.int64)
    tokens = Tokenizer().encode_batch([caption(int(l)) for l in labels])
    return ShapesDataset(t["images"], labels, tokens, t["masks"] > 0.5, h["meta"]["split"])


def load_fp_model(path: Path) -> ClipModel:
    t, h = load_checkpoint(path)
    model = ClipModel(ModelConfig.from_dict(h["meta"]["model_config"]))
    model.load_state_dict(t)
    model.requires_grad_(False)
    return model


def save_grid_png(images: np.ndarray, path: Path, per_row: int = 8) -> None:
    """Tile images into one PNG; each image min-max scaled to [0, 255] for viewing."""
    from PIL import Image
    n, c, h, w = images.shape
    rows = int(np.ceil(n / per_row))
    canvas = np.zeros((rows * h, per_row * w, 3), dtype=np.uint8)
    for i, im in enumerate(images):
        lo, hi = im.min(), im.max()
        v = (im - lo) / (hi - lo) if hi > lo else np.zeros_like(im)
        r, col = divmod(i, per_row)
        canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = (v.transpose(1, 2, 0) * 255).round().astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, force: bool = False, export_png: bool = False) -> dict:
    t0 = time.time()
    train_p, test_p = cfg.data_paths()
    h = cfg.data_hash()
    if _up_to_date(train_p, h, force) and _up_to_date(test_p, h, force):
        logger.info("dataset up to date")
        return {"skipped": True}
    train, test = generate_dataset(cfg.data.seed, cfg.data.n_train, cfg.data.n_test)
    for p, ds in ((train_p, train), (test_p, test)):
        save_dataset(p, ds, _meta(cfg, h))
        if export_png:
            ds.export(p.parent / "png")
    write_manifest(cfg, "gen-data", h, {}, [train_p, test_p],
                   {"n_train": len(train), "n_test": len(test)}, seconds=time.time() - t0)
    return {"n_train": len(train), "n_test": len(test)}


def cmd_pretrain(cfg: RunConfig, force: bool = False) -> dict:
    t0 = time.time()
    train_p, test_p = cfg.data_paths()
    _check_input(train_p, cfg.data_hash(), "training data", "gen-data", force)
    _check_input(test_p, cfg.data_hash(), "test data", "gen-data", force)
    out = cfg.model_path()
    h = cfg.model_hash()
    if _up_to_date(out, h, force):
        logger.info("pretrained model up to date")
        return {"skipped": True}
    train, test = load_dataset(train_p), load_dataset(test_p)
    model = ClipModel(ModelConfig(variant=cfg.variant), seed=cfg.pretrain.seed)
    log = pretrain_clip(model, train, cfg.pretrain)
    acc_train = zero_shot_classify(model, normalize_images(train.images), class_prompts(), train.labels)[1]
    acc_test = zero_shot_classify(model, normalize_images(test.images), class_prompts(), test.labels)[1]
    metrics = {"train_accuracy": acc_train, "test_accuracy": acc_test, "final_loss": log.losses[-1]}
    save_checkpoint(out, model.state_dict(), meta=_meta(cfg, h, model_config=model.cfg.to_dict(), metrics=metrics))
    curve = out.with_suffix(".loss.csv")
    with open(curve, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows([[s, repr(v)] for s, v in zip(log.steps, log.losses)])
    write_manifest(cfg, f"pretrain_{cfg.variant}", h, {str(train_p): cfg.data_hash()}, [out, curve], metrics,
                   seconds=time.time() - t0)
    return metrics


def cmd_synth(cfg: RunConfig, force: bool = False) -> dict:
    t0 = time.time()
    _check_input(cfg.model_path(), cfg.model_hash(), "pretrained model", "pretrain", force)
    d = cfg.synth_dir()
    out = d / "images.ckpt"
    h = cfg.synth_hash()
    if _up_to_date(out, h, force):
        logger.info("synthetic images up to date")
        return {"skipped": True}
    model = load_fp_model(cfg.model_path())
    res = synthesize(model, cfg.synthesis, cfg.method)
    prov = {**res.provenance(), "stage_hash": h}
    save_checkpoint(out, {"images": res.images, "bboxes": res.bboxes.astype(np.float32),
                          "assignment": res.assignment.astype(np.float32)},
                    meta=_meta(cfg, h, method=cfg.method, synthesis=cfg.synthesis.to_dict()))
    (d / "provenance.json").write_text(json.dumps(prov, sort_keys=True))
    bs = cfg.synthesis.batch_size
    pngs = []
    for b in range(0, len(res.images), bs):
        p = d / f"batch_{b // bs:02d}.png"
        save_grid_png(res.images[b:b + bs], p)
        pngs.append(p)
    final = [tr[-1] for tr in res.loss_trace if tr]
    metrics = {"final_loss_mean": float(np.mean(final)) if final else None}
    write_manifest(cfg, f"synth_{cfg.variant}_{cfg.tag}_seed{cfg.seed}", h,
                   {str(cfg.model_path()): cfg.model_hash()}, [out, d / "provenance.json"], metrics,
                   seconds=time.time() - t0)
    return metrics


def cmd_quantize(cfg: RunConfig, force: bool = False) -> dict:
    t0 = time.time()
    _check_input(cfg.model_path(), cfg.model_hash(), "pretrained model", "pretrain", force)
    syn = cfg.synth_dir() / "images.ckpt"
    _check_input(syn, cfg.synth_hash(), "synthetic images", "synth", force)
    d = cfg.quant_dir()
    out = d / "quantized.ckpt"
    h = cfg.quant_hash()
    if _up_to_date(out, h, force):
        logger.info("quantized model up to date")
        return {"skipped": True}
    model = load_fp_model(cfg.model_path())
    images = load_checkpoint(syn)[0]["images"]
    prompts = text_calibration_prompts(cfg.calibration.n_text, cfg.seed)
    qc = quantize_clip(model, images, prompts, cfg.calibration)
    qc.save(out, meta=_meta(cfg, h, method=cfg.method, bits=list(cfg.bits)))
    write_loss_csv(qc, d / "losses.csv")
    (d / "prompts.json").write_text(json.dumps(prompts))
    metrics = {"units": len(qc.units),
               "units_improved": sum(u.final_mse <= u.initial_mse for u in qc.units)}
    write_manifest(cfg, f"quantize_{cfg.variant}_{cfg.tag}_W{cfg.bits[0]}A{cfg.bits[1]}_seed{cfg.seed}", h,
                   {str(syn): cfg.synth_hash()}, [out, d / "losses.csv"], metrics, seconds=time.time() - t0)
    return metrics


def cmd_eval(cfg: RunConfig, target: str = "quant", force: bool = False) -> dict:
    t0 = time.time()
    _, test_p = cfg.data_paths()
    _check_input(test_p, cfg.data_hash(), "test data", "gen-data", force)
    test = load_dataset(test_p)
    if target == "fp":
        _check_input(cfg.model_path(), cfg.model_hash(), "pretrained model", "pretrain", force)
        model = load_fp_model(cfg.model_path())
        h, src, name = cfg.model_hash(), cfg.model_path(), f"eval_{cfg.variant}_fp"
    else:
        src = cfg.quant_dir() / "quantized.ckpt"
        _check_input(src, cfg.quant_hash(), "quantized model", "quantize", force)
        model = load_quantized_clip(src).model
        h = cfg.quant_hash()
        name = f"eval_{cfg.variant}_{cfg.tag}_W{cfg.bits[0]}A{cfg.bits[1]}_seed{cfg.seed}"
    _, acc = zero_shot_classify(model, normalize_images(test.images), class_prompts(), test.labels)
    metrics = {"accuracy": acc, "n_test": len(test)}
    extra = {"target": target}
    if target == "fp":
        extra.update({"method": "fp", "bits": [32, 32]})
    write_manifest(cfg, name, h, {str(src): h}, [], metrics, extra=extra, seconds=time.time() - t0)
    return metrics


def cmd_diagnose(cfg: RunConfig, force: bool = False) -> dict:
    """Patch-structure and cluster statistics for real, Gaussian and current-method images."""
    from . import diagnostics as D
    t0 = time.time()
    _check_input(cfg.model_path(), cfg.model_hash(), "pretrained model", "pretrain", force)
    syn = cfg.synth_dir() / "images.ckpt"
    _check_input(syn, cfg.synth_hash(), "synthetic images", "synth", force)
    if cfg.synthesis.n_images < 2 * N_CLASSES:
        raise CliError(f"diagnose clusters synthetic images by class and needs synthesis.n_images >= "
                       f"{2 * N_CLASSES}", EXIT_CONFIG)
    n = cfg.diagnostics.n_samples
    if n < 2 or IMAGE_SIZE % cfg.diagnostics.grid:
        raise CliError(f"diagnostics needs n_samples >= 2 and a grid dividing {IMAGE_SIZE}", EXIT_CONFIG)
    _, test_p = cfg.data_paths()
    test = load_dataset(test_p)
    model = load_fp_model(cfg.model_path())
    t = load_checkpoint(syn)[0]
    g_res = synthesize(model, cfg.synthesis, "gaussian")
    sets = {
        "real": (normalize_images(test.images), test.labels, None),
        "gaussian": (g_res.images, g_res.assignment.astype(np.int64), g_res.bboxes),
        cfg.method: (t["images"], t["assignment"].astype(np.int64), t["bboxes"].astype(np.int64)),
    }
    d = cfg.out / "diagnose" / cfg.variant / f"{cfg.tag}_seed{cfg.seed}"
    d.mkdir(parents=True, exist_ok=True)
    feat = D.encoder_features(model)
    structure, silhouettes, regions, clusters = {}, {}, {}, {}
    for name, (imgs, labels, boxes) in sets.items():
        maps = D.patch_similarity_batch(imgs[:n], feat, cfg.diagnostics.grid)
        scores = [D.structure_score(m) for m in maps]
        structure[name] = {"mean": float(np.mean(scores)), "sem": float(np.std(scores, ddof=1) / np.sqrt(len(scores)))}
        D.save_heatmap(maps[0], d / f"patch_similarity_{name}.png", f"{name} patch similarity")
        D.save_matrix_csv(maps[0].matrix, d / f"patch_similarity_{name}.csv")
        rep = D.cluster_report(encode_images(model, imgs), labels)
        silhouettes[name] = rep.silhouette
        clusters[name] = rep
        # synthetic images carry their prompt inside the box; real images are whole scenes
        if boxes is None:
            regions[name] = rep.silhouette
        else:
            regions[name] = D.cluster_report(encode_images(model, D.region_crops(imgs, boxes)), labels).silhouette
    D.save_scatter(clusters, d / "clusters.png")
    comp = None
    qpath = cfg.quant_dir() / "quantized.ckpt"
    if qpath.exists():
        comp = D.compression_report(load_quantized_clip(qpath))
    D.save_summary(d / "summary.json", silhouettes, structure, comp, regions)
    metrics = {"silhouette": silhouettes, "silhouette_region": regions, "structure": structure}
    if comp is not None:
        metrics["compression"] = {"storage_ratio": comp.storage_ratio, "speedup": comp.speedup}
    write_manifest(cfg, f"diagnose_{cfg.variant}_{cfg.tag}_seed{cfg.seed}", cfg.synth_hash(),
                   {str(syn): cfg.synth_hash()}, [d / "summary.json"], metrics, seconds=time.time() - t0)
    return metrics


REPORT_KEYS = ("variant", "method", "bits", "seed", "metrics")


def cmd_report(run_dirs: list[str], out: str) -> dict:
    """Fold eval manifests of one or more run directories into accuracy tables."""
    rows = []
    for rd in run_dirs:
        mdir = Path(rd) / "manifests"
        if not mdir.is_dir():
            raise CliError(f"{rd} has no manifests directory", EXIT_MISSING)
        for p in sorted(mdir.glob("eval_*.json")):
            m = json.loads(p.read_text())
            missing = [k for k in REPORT_KEYS if k not in m] + \
                      ([] if "accuracy" in m.get("metrics", {}) else ["metrics.accuracy"])
            if missing:
                raise CliError(f"{p}: inconsistent manifest schema, missing {missing}", EXIT_CONFIG)
            w, a = m["bits"]
            rows.append({"variant": m["variant"], "method": m["method"], "bits": f"W{w}A{a}",
                         "seed": m["seed"], "accuracy": m["metrics"]["accuracy"]})
    if not rows:
        raise CliError("no completed eval runs found", EXIT_MISSING)
    rows.sort(key=lambda r: (r["variant"], r["method"], r["bits"], r["seed"]))
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["variant"], r["method"], r["bits"]), []).append(100.0 * r["accuracy"])
    summary = []
    for (v, m, b), accs in sorted(groups.items()):
        a = np.array(accs)
        summary.append({"variant": v, "method": m, "bits": b, "n": len(a), "mean": float(a.mean()),
                        "std": float(a.std(ddof=1)) if len(a) > 1 else None,
                        "min": float(a.min()), "max": float(a.max())})
    outp = Path(out)
    outp.mkdir(parents=True, exist_ok=True)
    with open(outp / "runs.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["variant", "method", "bits", "seed", "accuracy"])
        w.writeheader()
        w.writerows(rows)
    with open(outp / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["variant", "method", "bits", "n", "mean", "std", "min", "max"])
        w.writeheader()
        w.writerows([{**s, "std": "" if s["std"] is None else s["std"]} for s in summary])
    _plot_summary(summary, outp / "summary.png")
    return {"rows": rows, "summary": summary}


def _plot_summary(summary: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    labels = [f"{s['variant']} {s['method']} {s['bits']}" for s in summary]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(summary)), 4))
    ax.bar(range(len(summary)), [s["mean"] for s in summary],
           yerr=[s["std"] or 0.0 for s in summary], capsize=3)
    ax.set_xticks(range(len(summary)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("zero-shot accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="d4c", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="run directory (overrides out_dir)")
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--variant", choices=("cnn", "vit"))
        sp.add_argument("--bits", help="W,A e.g. 4,8")
        sp.add_argument("--force", action="store_true", help="ignore config-hash mismatches and overwrite")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name in ("gen-data", "pretrain", "synth", "quantize", "eval", "diagnose"):
        sp = sub.add_parser(name)
        common(sp)
        if name == "gen-data":
            sp.add_argument("--export-png", action="store_true")
        if name == "eval":
            sp.add_argument("--target", choices=("fp", "quant"), default="quant")
    rp = sub.add_parser("report")
    rp.add_argument("runs", nargs="+", help="run directories")
    rp.add_argument("--out", required=True, help="directory for the consolidated tables")
    rp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            res = cmd_report(args.runs, args.out)
            print(f"{len(res['rows'])} runs, {len(res['summary'])} groups -> {args.out}")
            return EXIT_OK
        cfg = load_config(args.config, args)
        if args.command == "gen-data":
            res = cmd_gen_data(cfg, args.force, args.export_png)
        elif args.command == "pretrain":
            res = cmd_pretrain(cfg, args.force)
        elif args.command == "synth":
            res = cmd_synth(cfg, args.force)
        elif args.command == "quantize":
            res = cmd_quantize(cfg, args.force)
        elif args.command == "eval":
            res = cmd_eval(cfg, args.target, args.force)
        else:
            res = cmd_diagnose(cfg, args.force)
        print(json.dumps(res, sort_keys=True, default=str))
        return EXIT_OK
    except (CliError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return getattr(e, "code", EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
