"""Tests for the frozen dual encoder and its planted latent-space geometry."""

import numpy as np
import pytest

from pvpl.autodiff import ShapeError, Tensor, constant, cosine_similarity, grad_check
from pvpl.corpus import CategorySet, default_categories, generate_corpus
from pvpl.encoders import (
    EOS_ID,
    OOV_ID,
    EncoderDims,
    build_encoder,
    encode_image,
    encode_text,
    encoder_checksum,
    render_eval_set,
    render_image,
    tokenize,
)


@pytest.fixture(scope="module")
def cats():
    return default_categories()


@pytest.fixture(scope="module")
def enc(cats):
    return build_encoder(seed=1, dims=EncoderDims(), categories=cats)


class TestBuildEncoder:
    def test_same_seed_bitwise_identical(self, cats, enc):
        again = build_encoder(seed=1, dims=EncoderDims(), categories=cats)
        for name, arr in enc.parameters().items():
            assert arr.tobytes() == again.parameters()[name].tobytes(), name

    def test_different_seed_differs(self, cats, enc):
        other = build_encoder(seed=2, dims=EncoderDims(), categories=cats)
        assert encoder_checksum(other) != encoder_checksum(enc)

    def test_anchors_well_separated(self, enc):
        a = enc.class_anchors
        gram = a @ a.T
        off = gram - np.diag(np.diag(gram))
        assert np.abs(off).max() <= 0.2

    def test_all_params_float32(self, enc):
        for name, arr in enc.parameters().items():
            assert arr.dtype == np.float32, name

    def test_too_many_classes_rejected(self):
        names = tuple(f"thing{i}" for i in range(40))
        cats = CategorySet(names=names, synonyms=tuple(() for _ in names))
        with pytest.raises(ValueError, match="exceed"):
            build_encoder(seed=1, dims=EncoderDims(d_embed=16), categories=cats)

    def test_shared_token_between_classes_rejected(self):
        cats = CategorySet(names=("car", "truck"), synonyms=(("vehicle",), ("vehicle",)))
        with pytest.raises(ValueError, match="vehicle"):
            build_encoder(seed=1, dims=EncoderDims(), categories=cats)

    def test_bad_patch_divisibility(self, cats):
        with pytest.raises(ValueError, match="divisible"):
            build_encoder(seed=1, dims=EncoderDims(image_size=30), categories=cats)


class TestTokenize:
    def test_sentence(self, enc):
        ids = tokenize(enc, "A car and a dog.")
        expected = [enc.vocab["a"], enc.vocab["car"], enc.vocab["and"], enc.vocab["a"], enc.vocab["dog"], EOS_ID]
        assert ids == expected

    def test_empty_sentence(self, enc):
        assert tokenize(enc, "") == [EOS_ID]

    def test_unknown_word_maps_to_oov(self, enc):
        assert tokenize(enc, "zyzzyva")[0] == OOV_ID

    def test_truncation(self, enc):
        ids = tokenize(enc, " ".join(["dog"] * 100))
        assert len(ids) == enc.dims.max_seq
        assert ids[-1] == EOS_ID


class TestEncodeText:
    def test_identical_inputs_identical_outputs(self, enc):
        ids = tokenize(enc, "a dog playing in the park")
        a = encode_text(enc, ids)
        b = encode_text(enc, ids)
        assert np.array_equal(a.global_feature.data, b.global_feature.data)
        assert np.array_equal(a.sequence_features.data, b.sequence_features.data)

    def test_unit_norm(self, enc):
        out = encode_text(enc, tokenize(enc, "a bright photo of a boat"))
        assert np.linalg.norm(out.global_feature.data) == pytest.approx(1.0, abs=1e-6)

    def test_class_word_pulls_toward_anchor(self, enc, cats):
        car, dog = cats.index("car"), cats.index("dog")
        solo = CategorySet(names=("car",), synonyms=(("automobile",),))
        for rec in generate_corpus(solo, 100, seed=13):
            g = encode_text(enc, tokenize(enc, rec.sentence)).global_feature.data
            assert g @ enc.class_anchors[car] > g @ enc.class_anchors[dog]

    def test_missing_eos_rejected(self, enc):
        with pytest.raises(ValueError, match="<EOS>"):
            encode_text(enc, [enc.vocab["dog"]])

    def test_overlong_rejected(self, enc):
        with pytest.raises(ValueError, match="exceeds"):
            encode_text(enc, [OOV_ID] * enc.dims.max_seq + [EOS_ID])


class TestEncodeImage:
    def test_zero_image_well_defined(self, enc):
        out = encode_image(enc, np.zeros((32, 32, 3), dtype=np.float32))
        assert np.all(np.isfinite(out.global_feature.data))
        assert np.linalg.norm(out.global_feature.data) == pytest.approx(1.0, abs=1e-6)

    def test_same_image_identical(self, enc):
        img = np.random.default_rng(0).normal(size=(32, 32, 3)).astype(np.float32)
        a, b = encode_image(enc, img), encode_image(enc, img)
        assert np.array_equal(a.global_feature.data, b.global_feature.data)

    def test_bad_dimensions(self, enc):
        with pytest.raises(ShapeError):
            encode_image(enc, np.zeros((30, 32, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            encode_image(enc, np.zeros((32, 32), dtype=np.float32))

    def test_gradient_matches_finite_differences(self, enc):
        rng = np.random.default_rng(3)
        point = rng.normal(0, 0.3, size=(32, 32, 3))
        anchor = constant(enc.class_anchors[0].astype(np.float64), dtype=np.float64)

        def f(img: Tensor):
            return cosine_similarity(encode_image(enc, img).global_feature, anchor)

        res = grad_check(f, point, step=1e-3, tol=1e-4)
        assert res.passed, res.max_rel_err

    def test_sequence_features_shape(self, enc):
        out = encode_image(enc, np.zeros((32, 32, 3), dtype=np.float32))
        assert out.sequence_features.shape == (enc.dims.num_patches, enc.dims.d_latent)


class TestAlignmentProperty:
    def test_positive_anchor_above_median_of_negatives(self, enc, cats):
        """The planted space must rank a sentence's own class anchors above
        the median negative anchor almost always; that alignment is what
        makes training on text meaningful."""
        records = generate_corpus(cats, 500, seed=11)
        anchors = enc.class_anchors
        wins = total = 0
        for rec in records:
            g = encode_text(enc, tokenize(enc, rec.sentence)).global_feature.data
            sims = anchors @ g
            negs = [j for j in range(len(cats)) if j not in rec.positive_labels]
            med = np.median(sims[negs])
            for pos in rec.positive_labels:
                wins += int(sims[pos] > med)
                total += 1
        assert wins / total >= 0.95

    def test_encoding_leaves_parameters_unchanged(self, enc, cats):
        before = encoder_checksum(enc)
        encode_text(enc, tokenize(enc, "a dog in the park"))
        encode_image(enc, np.zeros((32, 32, 3), dtype=np.float32))
        assert encoder_checksum(enc) == before


class TestRendering:
    def test_eval_set_shapes_and_determinism(self, enc, cats):
        imgs, labels = render_eval_set(enc, 20, seed=9)
        again, labels2 = render_eval_set(enc, 20, seed=9)
        assert imgs.shape == (20, 32, 32, 3)
        assert labels.shape == (20, len(cats))
        assert np.array_equal(imgs, again) and np.array_equal(labels, labels2)
        assert np.all(labels.sum(axis=1) >= 1)

    def test_rendered_class_recoverable(self, enc):
        rng = np.random.default_rng(5)
        hits = 0
        for _ in range(50):
            c = int(rng.integers(len(enc.class_names)))
            img = render_image(enc, (c,), rng)
            g = encode_image(enc, img).global_feature.data
            hits += int(np.argmax(enc.class_anchors @ g) == c)
        assert hits >= 45
