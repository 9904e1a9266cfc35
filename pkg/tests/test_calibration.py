import warnings

import numpy as np
import pytest

from d4c import autograd as ag
from d4c import calibration as cal
from d4c.autograd import Tensor
from d4c.calibration import (
    FP_BITS,
    CalibConfig,
    ReconstructionUnit,
    ReconstructionWarning,
    load_quantized_clip,
    partition,
    prepare_model,
    quantize_clip,
    reconstruct,
)
from d4c.data import Tokenizer, class_prompts, text_calibration_prompts
from d4c.model import ClipModel, ModelConfig
from d4c.nn import Linear
from d4c.quant import FakeQuantizer

SMALL = dict(n_images=16, n_text=64, iterations=4, batch_size=8, text_batch_size=32)


@pytest.fixture(scope="module")
def cnn():
    return ClipModel(ModelConfig(variant="cnn"), seed=0)


@pytest.fixture(scope="module")
def vit():
    return ClipModel(ModelConfig(variant="vit"), seed=0)


@pytest.fixture(scope="module")
def calib_data():
    rng = np.random.default_rng(0)
    return rng.normal(size=(16, 3, 64, 64)).astype(np.float32), text_calibration_prompts(64, 0)


@pytest.fixture(scope="module")
def cnn_w4a8(cnn, calib_data):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ReconstructionWarning)
        return quantize_clip(cnn, *calib_data, CalibConfig(**SMALL))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"w_bits": 1}, {"a_bits": 9}, {"lr_image": 0.0}, {"heldout_frac": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            CalibConfig(**kw)

    def test_defaults(self):
        c = CalibConfig()
        assert (c.n_images, c.n_text, c.iterations, c.lr_image, c.lr_text) == (128, 512, 20000, 4e-5, 4e-6)


class TestPartition:
    def test_cnn_counts(self, cnn):
        units = partition(prepare_model(cnn))
        image = [u for u in units if u.encoder == "image"]
        assert [u.name for u in image] == [f"image.stages.{i}" for i in range(4)] + ["image.proj"]
        assert len([u for u in units if u.encoder == "text"]) == 2 * 4 + 1

    def test_vit_counts(self, vit):
        units = partition(prepare_model(vit))
        image = [u for u in units if u.encoder == "image"]
        proj = [u for u in image if u.name.split(".")[-1] in ("qkv", "proj", "fc1", "fc2") and "blocks" in u.name]
        assert len(proj) == 16
        assert image[-1].name == "image.proj"

    @pytest.mark.parametrize("variant", ["cnn", "vit"])
    def test_set_cover(self, variant, cnn, vit):
        model = prepare_model(cnn if variant == "cnn" else vit)
        units = partition(model)
        members = [n for u in units for n in u.layers]
        assert len(members) == len(set(members))
        assert set(members) | {model.first_conv_name()} == set(model.quantizable_layers())
        assert model.first_conv_name() not in members

    def test_topological_order(self, vit):
        model = prepare_model(vit)
        order = list(model.quantizable_layers())
        pos = [order.index(u.layers[0]) for u in partition(model)]
        assert pos == sorted(pos)


def linear_unit(rng, d_in=6, d_out=5, n=48):
    lin = Linear(d_in, d_out, rng)
    x = rng.normal(size=(n, d_in)).astype(np.float32)
    with ag.no_grad():
        y = lin(Tensor(x)).data.copy()
    return ReconstructionUnit("toy", lin, ["toy"], "image"), lin, x, y


class TestReconstruct:
    def test_disabled_quantization_gives_zero_loss(self, rng):
        unit, lin, x, y = linear_unit(rng)
        cfg = CalibConfig(w_bits=FP_BITS, a_bits=FP_BITS)
        reconstruct(unit, [], x, y, cfg, 1e-3, 20, 8, np.random.default_rng(0))
        assert unit.initial_mse == 0.0 and unit.final_mse == 0.0

    @pytest.mark.filterwarnings("ignore::d4c.calibration.ReconstructionWarning")
    def test_final_not_worse_than_init(self, rng):
        unit, lin, x, y = linear_unit(rng)
        lin.weight_quant = FakeQuantizer.from_data(lin.weight.data, 2, axis=0)
        lin.act_quant = FakeQuantizer.from_data(x, 4, axis=None)
        qs = [lin.weight_quant, lin.act_quant]
        reconstruct(unit, qs, x, y, CalibConfig(), 1e-3, 200, 8, np.random.default_rng(0))
        assert unit.final_mse <= unit.initial_mse
        assert len(unit.loss_trace) == 200
        assert all(np.all(q.scale.data > 0) for q in qs)

    def test_too_few_samples(self, rng):
        unit, _, x, y = linear_unit(rng, n=4)
        with pytest.raises(ValueError):
            reconstruct(unit, [], x, y, CalibConfig(), 1e-3, 5, 8, np.random.default_rng(0))

    def test_flat_loss_warns(self, rng):
        unit, lin, x, y = linear_unit(rng, n=8)
        lin.weight_quant = FakeQuantizer.from_data(lin.weight.data, 2, axis=0)
        with pytest.warns(ReconstructionWarning):
            reconstruct(unit, [lin.weight_quant], x, y, CalibConfig(), 0.0, 120, 8, np.random.default_rng(0))

    def test_learned_rounding_path(self, rng):
        unit, lin, x, y = linear_unit(rng)
        lin.weight_quant = FakeQuantizer.from_data(lin.weight.data, 3, axis=0, learn_rounding=True)
        cfg = CalibConfig(learn_rounding=True)
        reconstruct(unit, [lin.weight_quant], x, y, cfg, 1e-2, 60, 8, np.random.default_rng(0))
        assert unit.final_mse <= unit.initial_mse
        assert not lin.weight_quant.soft_rounding


class TestQuantizeClip:
    def test_all_fp_bits_reproduce_outputs(self, cnn, calib_data):
        cfg = CalibConfig(**SMALL, w_bits=FP_BITS, a_bits=FP_BITS, text_mlp_bits=FP_BITS)
        qc = quantize_clip(cnn, *calib_data, cfg)
        # BLAS blocking differs between capture and evaluation batch sizes, hence the float-noise bound
        assert all(u.final_mse < 1e-12 for u in qc.units)
        assert all(u.final_mse == 0.0 for u in qc.units if u.encoder == "image")

    def test_final_not_worse_than_init(self, cnn_w4a8):
        for u in cnn_w4a8.units:
            assert u.final_mse <= u.initial_mse, u.name

    def test_first_conv_excluded_bit_exact(self, cnn, cnn_w4a8, calib_data):
        name = cnn.first_conv_name()
        ref = prepare_model(cnn).state_dict()
        got = cnn_w4a8.model.state_dict()
        for k in ref:
            if k.startswith(name + "."):
                assert got[k].tobytes() == ref[k].tobytes()
        lq = cnn_w4a8.layers[name]
        assert lq.excluded and lq.weight is None and lq.act is None

    def test_text_mlp_eight_bit_per_channel(self, cnn_w4a8):
        mlp = [n for n in cnn_w4a8.layers if n.startswith("text.") and ".mlp.fc" in n]
        assert len(mlp) == 4
        for n in mlp:
            p = cnn_w4a8.layers[n].weight.params()
            assert p.bits == 8 and p.axis == 0 and p.scale.size == cnn_w4a8.model.quantizable_layers()[n].weight.shape[0]
            assert cnn_w4a8.layers[n].act.bits == 8
        other = cnn_w4a8.layers["text.blocks.0.attn.qkv"]
        assert other.weight.bits == 4 and other.act.bits == 8 and other.act.axis == 2  # feature axis of (batch, tokens, features)

    def test_fp_model_untouched(self, cnn, cnn_w4a8):
        fresh = ClipModel(ModelConfig(variant="cnn"), seed=0)
        for k, v in fresh.state_dict().items():
            assert v.tobytes() == cnn.state_dict()[k].tobytes()

    def test_evaluable_end_to_end(self, cnn_w4a8):
        tok = Tokenizer().encode_batch(class_prompts())
        with ag.no_grad():
            img = cnn_w4a8.encode_image(Tensor(np.random.default_rng(1).normal(size=(4, 3, 64, 64)))).data
            txt = cnn_w4a8.encode_text(tok).data
        np.testing.assert_allclose(np.linalg.norm(img, axis=1), 1, atol=1e-5)
        np.testing.assert_allclose(np.linalg.norm(txt, axis=1), 1, atol=1e-5)

    def test_insufficient_samples(self, cnn, calib_data):
        images, prompts = calib_data
        with pytest.raises(ValueError):
            quantize_clip(cnn, images[:4], prompts, CalibConfig(**SMALL))
        with pytest.raises(ValueError):
            quantize_clip(cnn, images, prompts[:10], CalibConfig(**SMALL))

    def test_save_load_roundtrip(self, cnn_w4a8, tmp_path):
        path = tmp_path / "q.ckpt"
        cnn_w4a8.save(path)
        again = load_quantized_clip(path)
        x = Tensor(np.random.default_rng(2).normal(size=(3, 3, 64, 64)))
        with ag.no_grad():
            np.testing.assert_array_equal(again.encode_image(x).data, cnn_w4a8.encode_image(x).data)
        assert set(again.layers) == set(cnn_w4a8.layers)

    def test_sequential_prefix(self, cnn, calib_data, monkeypatch):
        seen = []
        real = cal.reconstruct

        def spy(unit, quantizers, *args, **kwargs):
            mods = unit.module
            root = spy.model
            active = {n for n, m in root.quantizable_layers().items()
                      if getattr(m, "weight_quant", None) is not None or getattr(m, "act_quant", None) is not None}
            seen.append((unit.name, set(unit.layers), active))
            return real(unit, quantizers, *args, **kwargs)

        real_prepare = cal.prepare_model

        def prepare(model):
            spy.model = real_prepare(model)
            return spy.model

        monkeypatch.setattr(cal, "reconstruct", spy)
        monkeypatch.setattr(cal, "prepare_model", prepare)
        quantize_clip(cnn, *calib_data, CalibConfig(**{**SMALL, "iterations": 1}))
        done = set()
        for name, members, active in seen:
            # earlier units quantized, current unit's quantizers freshly attached, later ones FP
            assert active == done | members, name
            done |= members
