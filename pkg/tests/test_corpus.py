"""Tests for corpus generation, label extraction, filtering, and noise."""

import numpy as np
import pytest

from pvpl.corpus import (
    CategorySet,
    CorpusRecord,
    add_text_noise,
    augment_corpus,
    corpus_stats,
    default_categories,
    extract_labels,
    generate_corpus,
    load_corpus,
    reasonableness_check,
    save_corpus,
)


@pytest.fixture(scope="module")
def cats():
    return default_categories()


class TestGenerateCorpus:
    def test_two_class_balance(self):
        two = CategorySet(names=("car", "dog"), synonyms=((), ()))
        records = generate_corpus(two, 1000, seed=42)
        assert corpus_stats(records, two).imbalance_ratio <= 1.3

    def test_mentions_guarantee_roundtrip(self, cats):
        for rec in generate_corpus(cats, 300, seed=1):
            assert extract_labels(cats, rec.sentence) >= set(rec.positive_labels)

    def test_deterministic(self, cats):
        a = generate_corpus(cats, 200, seed=3)
        b = generate_corpus(cats, 200, seed=3)
        assert a == b

    def test_sentence_length_bound(self, cats):
        for rec in generate_corpus(cats, 500, seed=2):
            assert len(rec.sentence.split()) < 15

    def test_labels_in_range(self, cats):
        for rec in generate_corpus(cats, 100, seed=4):
            assert rec.positive_labels
            assert all(0 <= i < len(cats) for i in rec.positive_labels)

    def test_empty_categories_rejected(self):
        with pytest.raises(ValueError):
            CategorySet(names=(), synonyms=())

    def test_bad_count_rejected(self, cats):
        with pytest.raises(ValueError):
            generate_corpus(cats, 0, seed=1)


class TestExtractLabels:
    def test_direct_match(self):
        three = CategorySet(names=("car", "dog", "plane"), synonyms=((), (), ()))
        assert extract_labels(three, "a red car near a dog") == {0, 1}

    def test_token_boundary_no_substring(self):
        one = CategorySet(names=("car",), synonyms=((),))
        assert extract_labels(one, "a carpet on the floor") == set()

    def test_synonym_match(self):
        one = CategorySet(names=("car",), synonyms=(("automobile",),))
        assert extract_labels(one, "an automobile") == {0}

    def test_multiword_phrase(self):
        one = CategorySet(names=("traffic light",), synonyms=((),))
        assert extract_labels(one, "a traffic light glowing") == {0}
        assert extract_labels(one, "traffic near a light") == set()


class TestReasonablenessCheck:
    def test_label_mismatch_rejected(self, cats):
        rec = CorpusRecord("a photo of a dog in the park", frozenset({cats.index("car")}))
        kept, rejected = reasonableness_check(cats, [rec])
        assert not kept
        assert rejected[0][1] == "label-mismatch"

    def test_overlong_rejected(self, cats):
        words = ["quiet"] * 16 + ["car"]
        rec = CorpusRecord(" ".join(words), frozenset({cats.index("car")}))
        kept, rejected = reasonableness_check(cats, [rec], max_words=15)
        assert rejected[0][1] == "too-long"

    def test_label_only_sentence_rejected(self, cats):
        rec = CorpusRecord("a car and a car", frozenset({cats.index("car")}))
        kept, rejected = reasonableness_check(cats, [rec])
        assert rejected[0][1] == "no-content"

    def test_clean_corpus_mostly_kept(self, cats):
        records = generate_corpus(cats, 1000, seed=5)
        kept, _ = reasonableness_check(cats, records)
        assert len(kept) / len(records) >= 0.99

    def test_kept_records_roundtrip_exactly(self, cats):
        records = generate_corpus(cats, 500, seed=6)
        kept, _ = reasonableness_check(cats, records)
        for rec in kept:
            assert extract_labels(cats, rec.sentence) == set(rec.positive_labels)


class TestTextNoise:
    def test_zero_rate_is_identity(self, cats):
        records = generate_corpus(cats, 50, seed=7)
        assert add_text_noise(cats, records, seed=1, noise_rate=0.0) == records

    def test_exact_fraction_marked(self, cats):
        records = generate_corpus(cats, 1000, seed=8)
        noised = add_text_noise(cats, records, seed=2, noise_rate=0.3)
        assert sum(1 for r in noised if r.source == "noised") == 300

    def test_labels_survive_noise(self, cats):
        records = generate_corpus(cats, 400, seed=9)
        for rec in add_text_noise(cats, records, seed=3, noise_rate=1.0):
            assert extract_labels(cats, rec.sentence) >= set(rec.positive_labels)
            assert rec.source == "noised"

    def test_label_sets_unchanged(self, cats):
        records = generate_corpus(cats, 200, seed=10)
        noised = add_text_noise(cats, records, seed=4, noise_rate=0.5)
        for before, after in zip(records, noised):
            assert before.positive_labels == after.positive_labels

    def test_bad_rate_rejected(self, cats):
        with pytest.raises(ValueError):
            add_text_noise(cats, [], seed=1, noise_rate=1.5)


class TestAugmentCorpus:
    def test_factor_one_identity(self, cats):
        records = generate_corpus(cats, 40, seed=11)
        assert augment_corpus(cats, records, seed=1, factor=1) == records

    def test_factor_three_bounds_and_labels(self, cats):
        records = generate_corpus(cats, 100, seed=12)
        out = augment_corpus(cats, records, seed=2, factor=3)
        assert len(out) <= 300
        by_labels = {}
        for rec in out:
            by_labels.setdefault(rec.positive_labels, 0)
        for rec in records:
            assert rec in out

    def test_counts_scale_with_factor(self, cats):
        records = generate_corpus(cats, 150, seed=13)
        out = augment_corpus(cats, records, seed=3, factor=3)
        before = corpus_stats(records, cats).per_class_counts
        after = corpus_stats(out, cats).per_class_counts
        for b, a in zip(before, after):
            if b:
                assert a / b == pytest.approx(3.0, rel=0.1)


class TestCorpusStats:
    def test_empty(self, cats):
        st = corpus_stats([], cats)
        assert st.per_class_counts == [0] * len(cats)
        assert st.labels_per_sentence == {}
        assert st.imbalance_ratio == 0.0

    def test_hand_counts(self):
        two = CategorySet(names=("car", "dog"), synonyms=((), ()))
        records = [
            CorpusRecord("a car here", frozenset({0})),
            CorpusRecord("a car and a dog", frozenset({0, 1})),
        ]
        st = corpus_stats(records, two)
        assert st.per_class_counts == [2, 1]
        assert st.labels_per_sentence == {1: 1, 2: 1}

    def test_generator_balance(self, cats):
        records = generate_corpus(cats, 2000, seed=14)
        assert corpus_stats(records, cats).imbalance_ratio <= 1.3


class TestPersistence:
    def test_roundtrip(self, tmp_path, cats):
        records = generate_corpus(cats, 60, seed=15)
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, records, cats)
        loaded = load_corpus(path, cats)
        assert loaded == records

    def test_byte_identical_reruns(self, tmp_path, cats):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_corpus(p1, generate_corpus(cats, 80, seed=16), cats)
        save_corpus(p2, generate_corpus(cats, 80, seed=16), cats)
        assert p1.read_bytes() == p2.read_bytes()

    def test_unknown_class_name_fails_with_line(self, tmp_path, cats):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"sentence":"x","labels":["zeppelin"],"source":"external"}\n')
        with pytest.raises(ValueError, match=":1:"):
            load_corpus(path, cats)

    def test_category_file_roundtrip(self, tmp_path, cats):
        path = tmp_path / "classes.json"
        cats.to_file(path)
        assert CategorySet.from_file(path) == cats
