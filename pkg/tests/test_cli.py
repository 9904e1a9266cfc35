import csv
import json

import numpy as np
import pytest

from d4c.checkpoint import load_checkpoint
from d4c.cli import EXIT_CONFIG, EXIT_HASH, EXIT_MISSING, EXIT_OK, RunConfig, load_fp_model, load_dataset, main
from d4c.data import class_prompts, normalize_images
from d4c.train import zero_shot_classify

TINY = {
    "data": {"n_train": 64, "n_test": 32},
    "pretrain": {"steps": 3, "groups": 1},
    "synthesis": {"iterations": 2, "n_images": 32, "batch_size": 16},
    "calibration": {"iterations": 2, "n_images": 32, "n_text": 64, "batch_size": 8, "text_batch_size": 32},
    "diagnostics": {"n_samples": 4, "grid": 4},
}


def write_config(path, out_dir, **overrides):
    cfg = json.loads(json.dumps(TINY))
    cfg["out_dir"] = str(out_dir)
    for k, v in overrides.items():
        cfg[k] = v
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module", params=["cnn", "vit"])
def pipeline(request, tmp_path_factory):
    """Tiny full pipeline per encoder variant; returns (config path, run dir, exit codes)."""
    root = tmp_path_factory.mktemp(f"run_{request.param}")
    conf = write_config(root / "cfg.json", root / "run", variant=request.param)
    codes = {}
    for cmd in (["gen-data"], ["pretrain"], ["synth"], ["quantize"], ["eval", "--target", "fp"],
                ["eval", "--target", "quant"], ["diagnose"]):
        codes[" ".join(cmd)] = main(cmd + ["--config", conf])
    return conf, root / "run", codes, request.param


class TestConfigErrors:
    @pytest.mark.parametrize("cfg", [
        {"bogus": 1},
        {"synthesis": {"lr": 0.1}},
        {"synthesis": {"seed": 3}},
        {"calibration": {"w_bits": 4}},
        {"variant": "mlp"},
        {"method": "nope"},
        {"bits": [4]},
        {"bits": [3, 12]},
        {"ablation": {"pgsi": False, "scg": True}},
    ])
    def test_rejected(self, tmp_path, cfg):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert main(["gen-data", "--config", str(path)]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG

    def test_bad_bits_flag(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--bits", "x,y"]) == EXIT_CONFIG

    def test_ablation_maps_to_method(self):
        cfg = RunConfig.from_dict({"ablation": {"scg": False, "H": False}})
        assert cfg.method == "pgsi_pae"
        assert not cfg.synthesis.pae.flip and cfg.synthesis.pae.erase
        assert cfg.tag == "pgsi_pae-ACGR"
        assert RunConfig.from_dict({"ablation": {"pgsi": False, "scg": False, "pae": False}}).method == "gaussian"

    def test_stage_hashes_are_scoped(self):
        a = RunConfig.from_dict({"calibration": {"iterations": 5}})
        b = RunConfig.from_dict({"calibration": {"iterations": 6}})
        assert a.synth_hash() == b.synth_hash() and a.quant_hash() != b.quant_hash()
        c = RunConfig.from_dict({"seed": 1})
        assert c.model_hash() == a.model_hash() and c.synth_hash() != a.synth_hash()

    def test_variant_pretrain_budget(self):
        assert RunConfig.from_dict({"variant": "vit"}).pretrain.steps == 2000
        assert RunConfig.from_dict({"variant": "cnn"}).pretrain.steps == 400


class TestPrerequisites:
    def test_missing_prerequisite(self, tmp_path):
        conf = write_config(tmp_path / "c.json", tmp_path / "run")
        assert main(["pretrain", "--config", conf]) == EXIT_MISSING
        assert main(["synth", "--config", conf]) == EXIT_MISSING
        assert main(["eval", "--config", conf]) == EXIT_MISSING

    def test_hash_mismatch(self, tmp_path):
        conf = write_config(tmp_path / "c.json", tmp_path / "run")
        assert main(["gen-data", "--config", conf]) == EXIT_OK
        other = write_config(tmp_path / "d.json", tmp_path / "run", data={"n_train": 48, "n_test": 32})
        assert main(["pretrain", "--config", other]) == EXIT_HASH
        # regenerating data over a different config's results is refused too
        assert main(["gen-data", "--config", other]) == EXIT_HASH

    def test_shared_artifact_independent_of_run_config(self, tmp_path):
        out = []
        for variant in ("cnn", "vit"):
            conf = write_config(tmp_path / f"{variant}.json", tmp_path / variant, variant=variant, method="gaussian")
            assert main(["gen-data", "--config", conf]) == EXIT_OK
            out.append((tmp_path / variant / "data" / "test.ckpt").read_bytes())
        assert out[0] == out[1]


class TestPipeline:
    def test_all_commands_succeed(self, pipeline):
        _, _, codes, _ = pipeline
        assert all(c == EXIT_OK for c in codes.values()), codes

    def test_manifests_written(self, pipeline):
        _, run, _, variant = pipeline
        names = {p.name for p in (run / "manifests").glob("*.json")}
        assert {"gen-data.json", f"pretrain_{variant}.json", f"synth_{variant}_d4c_seed0.json",
                f"quantize_{variant}_d4c_W4A8_seed0.json", f"eval_{variant}_fp.json"} <= names
        m = json.loads((run / "manifests" / f"synth_{variant}_d4c_seed0.json").read_text())
        assert m["config_hash"] and m["stage_hash"] and m["outputs"]

    def test_fp_eval_passthrough(self, pipeline):
        _, run, _, variant = pipeline
        m = json.loads((run / "manifests" / f"eval_{variant}_fp.json").read_text())
        model = load_fp_model(run / "models" / f"fp_{variant}.ckpt")
        test = load_dataset(run / "data" / "test.ckpt")
        _, acc = zero_shot_classify(model, normalize_images(test.images), class_prompts(), test.labels)
        assert m["metrics"]["accuracy"] == acc

    def test_idempotent_and_reproducible(self, pipeline):
        conf, run, _, variant = pipeline
        syn = run / "synth" / variant / "d4c_seed0" / "images.ckpt"
        q = run / "quant" / variant / "d4c_W4A8_seed0" / "quantized.ckpt"
        before = syn.read_bytes(), q.read_bytes()
        mtime = syn.stat().st_mtime_ns
        assert main(["synth", "--config", conf]) == EXIT_OK
        assert syn.stat().st_mtime_ns == mtime          # up to date, skipped
        assert main(["synth", "--config", conf, "--force"]) == EXIT_OK
        assert main(["quantize", "--config", conf, "--force"]) == EXIT_OK
        assert (syn.read_bytes(), q.read_bytes()) == before

    def test_quantized_checkpoint_header(self, pipeline):
        _, run, _, variant = pipeline
        tensors, header = load_checkpoint(run / "quant" / variant / "d4c_W4A8_seed0" / "quantized.ckpt")
        rec = header["quant"]["text.blocks.0.mlp.fc1"]
        assert rec["weight"]["bits"] == 8 and rec["weight"]["granularity"] == "per_channel(0)"
        assert rec["weight"]["scale"] in tensors
        assert header["meta"]["stage_hash"]


def fake_manifest(mdir, variant, method, bits, seed, acc):
    mdir.mkdir(parents=True, exist_ok=True)
    name = f"eval_{variant}_{method}_W{bits[0]}A{bits[1]}_seed{seed}.json"
    (mdir / name).write_text(json.dumps({"variant": variant, "method": method, "bits": list(bits),
                                         "seed": seed, "metrics": {"accuracy": acc}}))


class TestReport:
    def test_single_run(self, tmp_path):
        fake_manifest(tmp_path / "r" / "manifests", "cnn", "d4c", (4, 8), 0, 0.5)
        assert main(["report", str(tmp_path / "r"), "--out", str(tmp_path / "o")]) == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "o" / "runs.csv")))
        summary = list(csv.DictReader(open(tmp_path / "o" / "summary.csv")))
        assert len(rows) == 1 and len(summary) == 1 and summary[0]["std"] == ""

    def test_row_count_and_stats(self, tmp_path):
        rng = np.random.default_rng(0)
        methods, bits, seeds = ["gaussian", "bns", "d4c"], [(4, 8), (6, 6), (8, 8)], [0, 1, 2]
        for m in methods:
            for b in bits:
                for s in seeds:
                    fake_manifest(tmp_path / "r" / "manifests", "cnn", m, b, s, float(rng.uniform()))
        assert main(["report", str(tmp_path / "r"), "--out", str(tmp_path / "o")]) == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "o" / "runs.csv")))
        summary = list(csv.DictReader(open(tmp_path / "o" / "summary.csv")))
        assert len(rows) == len(methods) * len(bits) * len(seeds)
        assert len(summary) == len(methods) * len(bits)
        for s in summary:
            accs = [100 * float(r["accuracy"]) for r in rows
                    if (r["method"], r["bits"]) == (s["method"], s["bits"])]
            assert float(s["std"]) == pytest.approx(np.std(accs, ddof=1))
            assert float(s["min"]) <= float(s["mean"]) <= float(s["max"])
        assert (tmp_path / "o" / "summary.png").exists()

    def test_inconsistent_schema(self, tmp_path):
        mdir = tmp_path / "r" / "manifests"
        mdir.mkdir(parents=True)
        (mdir / "eval_x.json").write_text(json.dumps({"variant": "cnn"}))
        assert main(["report", str(tmp_path / "r"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_no_runs(self, tmp_path):
        assert main(["report", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_MISSING
