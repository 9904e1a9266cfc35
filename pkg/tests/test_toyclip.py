import math

import numpy as np
import pytest

from d4c import autograd as ag
from d4c.autograd import Tensor
from d4c.data import (
    IMAGE_SIZE,
    MAX_LEN,
    N_CLASSES,
    Tokenizer,
    class_prompts,
    generate_dataset,
    mask_contrast,
    normalize_images,
    prompt_set,
    text_calibration_prompts,
)
from d4c.model import ClipModel, ModelConfig
from d4c.train import PretrainConfig, clip_loss, pretrain_clip, zero_shot_classify


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(7, 64, 32)


@pytest.fixture(scope="module", params=["cnn", "vit"])
def model(request):
    return ClipModel(ModelConfig(variant=request.param), seed=0)


class TestDataset:
    def test_deterministic(self, small_data):
        again = generate_dataset(7, 64, 32)
        assert small_data[0].images.tobytes() == again[0].images.tobytes()
        assert small_data[1].tokens.tobytes() == again[1].tokens.tobytes()

    def test_seed_changes_images(self, small_data):
        other = generate_dataset(8, 64, 32)
        assert small_data[0].images.tobytes() != other[0].images.tobytes()

    def test_shapes_and_range(self, small_data):
        tr, te = small_data
        assert tr.images.shape == (64, 3, IMAGE_SIZE, IMAGE_SIZE)
        assert te.tokens.shape == (32, MAX_LEN)
        assert tr.images.min() >= 0 and tr.images.max() <= 1

    def test_balanced_histogram(self):
        tr, _ = generate_dataset(1, 100, 1)
        counts = np.bincount(tr.labels, minlength=N_CLASSES)
        assert counts.max() - counts.min() <= 1

    def test_every_image_has_one_foreground(self, small_data):
        masks = small_data[0].masks
        assert np.all(masks.reshape(len(masks), -1).any(axis=1))
        assert np.all((~masks).reshape(len(masks), -1).any(axis=1))

    def test_mask_contrast_oracle(self, small_data):
        tr = small_data[0]
        # independent route: weighted sums over the mask instead of boolean indexing
        m = tr.masks[:, None].astype(np.float64)
        fg = (tr.images * m).sum(axis=(2, 3)) / m.sum(axis=(2, 3))
        bg = (tr.images * (1 - m)).sum(axis=(2, 3)) / (1 - m).sum(axis=(2, 3))
        oracle = float(np.abs(fg - bg).mean())
        assert oracle > 0.1
        assert mask_contrast(tr) == pytest.approx(oracle, rel=1e-5)

    def test_captions_follow_template(self, small_data):
        tr = small_data[0]
        assert all(c.startswith("a photo of a ") for c in tr.captions)

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            generate_dataset(0, 0, 5)

    def test_export(self, tmp_path):
        _, te = generate_dataset(0, 1, 3)
        manifest = te.export(tmp_path)
        assert manifest.exists()
        assert len(list((tmp_path / "images").glob("*.png"))) == 3


class TestTokenizer:
    def test_roundtrip(self):
        tok = Tokenizer()
        for text in prompt_set():
            assert tok.decode(tok.encode(text)) == Tokenizer.normalize(text)

    def test_vocab_size(self):
        assert 32 <= len(Tokenizer()) <= 96

    def test_prompt_counts(self):
        assert len(class_prompts()) == N_CLASSES
        assert len(prompt_set()) == 2 * N_CLASSES
        cal = text_calibration_prompts(512, 0)
        assert len(cal) == 512 and cal == text_calibration_prompts(512, 0)


class TestEncoders:
    def test_norms(self, model, small_data):
        with ag.no_grad():
            img = model.encode_image(Tensor(small_data[1].normalized()[:6])).data
            txt = model.encode_text(small_data[1].tokens[:6]).data
        np.testing.assert_allclose(np.linalg.norm(img, axis=1), 1, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(txt, axis=1), 1, atol=1e-6)
        assert img.shape == (6, 64)

    def test_batch_permutation(self, model, small_data):
        x = small_data[1].normalized()[:5]
        perm = np.array([3, 0, 4, 4, 1, 2])
        with ag.no_grad():
            base = model.encode_image(Tensor(x)).data
            shuffled = model.encode_image(Tensor(x[perm])).data
            tb = model.encode_text(small_data[1].tokens[:5]).data
            ts = model.encode_text(small_data[1].tokens[:5][perm]).data
        np.testing.assert_allclose(shuffled, base[perm], atol=1e-5)
        np.testing.assert_allclose(ts, tb[perm], atol=1e-5)

    def test_unique_layer_names(self, model):
        names = list(model.quantizable_layers())
        assert len(names) == len(set(names))
        assert model.first_conv_name() in names

    def test_initial_loss_near_log_batch(self, model, small_data):
        with ag.no_grad():
            img = model.encode_image(Tensor(small_data[0].normalized()[:16]))
            txt = model.encode_text(small_data[0].tokens[:16])
            loss = clip_loss(img, txt, Tensor(np.array([0.0])))
        assert abs(loss.item() - math.log(16)) < 0.1


class TestZeroShot:
    def test_single_class_is_perfect(self, model, small_data):
        pred, acc = zero_shot_classify(model, small_data[1].normalized()[:4], ["a photo of a red circle"], [0] * 4)
        assert acc == 1.0 and np.all(pred == 0)

    def test_prompt_permutation_equivariant(self, model, small_data):
        prompts = class_prompts()
        perm = np.random.default_rng(0).permutation(N_CLASSES)
        x = small_data[1].normalized()[:8]
        base, _ = zero_shot_classify(model, x, prompts)
        shuffled, _ = zero_shot_classify(model, x, [prompts[i] for i in perm])
        np.testing.assert_array_equal(perm[shuffled], base)

    def test_empty_prompts(self, model, small_data):
        with pytest.raises(ValueError):
            zero_shot_classify(model, small_data[1].normalized()[:2], [])

    def test_untrained_near_chance(self, model):
        _, te = generate_dataset(3, 1, 512)
        _, acc = zero_shot_classify(model, normalize_images(te.images), class_prompts(), te.labels)
        assert abs(acc - 1 / N_CLASSES) <= 0.05


def test_short_pretraining_lowers_loss(small_data):
    m = ClipModel(ModelConfig(variant="cnn"), seed=1)
    log = pretrain_clip(m, small_data[0], PretrainConfig(steps=15, groups=1, warmup=2, log_every=0))
    assert len(log.losses) == 15
    assert np.mean(log.losses[-5:]) < log.losses[0]
    assert not any(p.requires_grad for p in m.parameters())


def test_pretraining_rejects_empty(small_data):
    tr = small_data[0]
    empty = type(tr)(tr.images[:0], tr.labels[:0], tr.tokens[:0], tr.masks[:0], "train")
    with pytest.raises(ValueError):
        pretrain_clip(ClipModel(ModelConfig()), empty, PretrainConfig(steps=1))
