"""Tests for the synthetic benchmark generator and config loading."""

import dataclasses
from collections import Counter

import numpy as np
import pytest

from hoigen.benchmark import (
    GeneratorConfig,
    GeneratorError,
    HoldoutStrategy,
    composition_counts,
    generate,
    holdout_split,
    make_vocabulary,
    mutual_information,
    power_law,
    training_counts,
    true_compositions,
    true_labels,
)
from hoigen.core import Split, ValidationError, Vocabulary, validate_dataset


def grid_vocabulary(n_verbs: int, n_objects: int) -> Vocabulary:
    return Vocabulary(
        verbs=tuple(f"v{v}" for v in range(n_verbs)),
        objects=tuple(f"o{o}" for o in range(n_objects)),
        compositions=tuple((v, o) for v in range(n_verbs) for o in range(n_objects)),
    )


class TestGeneratorConfig:
    @pytest.mark.parametrize(
        "change",
        [
            {"spurious_strength": 1.5},
            {"unseen_fraction": 1.0},
            {"composition_density": 0.0},
            {"unseen_strategy": "largest"},
            {"test_per_composition": 0},
        ],
    )
    def test_infeasible(self, change):
        with pytest.raises(GeneratorError):
            GeneratorConfig(**change)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValidationError, match="n_verb"):
            GeneratorConfig.from_dict({"n_verb": 3})

    def test_overrides_skip_none(self):
        config = GeneratorConfig(seed=4).with_overrides(seed=None, n_verbs=3)
        assert (config.seed, config.n_verbs) == (4, 3)

    def test_from_yaml_file(self, tmp_path):
        path = tmp_path / "gen.yaml"
        path.write_text("n_verbs: 3\nspurious_strength: 0.0\n", encoding="utf-8")
        config = GeneratorConfig.from_file(path)
        assert config == GeneratorConfig(n_verbs=3, spurious_strength=0.0)
        assert GeneratorConfig.from_dict(config.to_dict()) == config


class TestVocabulary:
    def test_every_verb_has_two_objects(self):
        config = GeneratorConfig(n_verbs=8, n_objects=6, composition_density=0.1)
        vocabulary = make_vocabulary(config, np.random.default_rng(0))
        assert all(len(vocabulary.objects_for_verb(v)) >= 2 for v in range(vocabulary.n_verbs))
        assert all(vocabulary.verbs_for_object(o) for o in range(vocabulary.n_objects))

    def test_power_law_peak(self):
        frequencies = power_law(5, 1.0, np.random.default_rng(0))
        assert frequencies.max() == 1.0
        np.testing.assert_allclose(sorted(frequencies, reverse=True), [1, 1 / 2, 1 / 3, 1 / 4, 1 / 5])

    def test_full_spurious_strength_concentrates_objects(self):
        config = GeneratorConfig(n_verbs=4, n_objects=3, composition_density=1.0, spurious_strength=1.0)
        vocabulary = grid_vocabulary(4, 3)
        counts, preferred = training_counts(vocabulary, config, np.random.default_rng(0))
        for o in range(3):
            for v in range(4):
                count = counts[vocabulary.composition_id(v, o)]
                assert count > 1 if v == preferred[o] else count == 1


class TestHoldoutSplit:
    def test_zero_fraction(self, vocabulary):
        assert holdout_split(vocabulary, 0.0) == frozenset()

    def test_non_rare_first(self, vocabulary):
        counts = np.array([5, 100, 3, 2, 1])
        assert holdout_split(vocabulary, 0.2, HoldoutStrategy.NON_RARE_FIRST, counts=counts) == {1}

    def test_rare_first_keeps_last_seen_composition(self, vocabulary):
        # composition 4 is the only one of its verb
        counts = np.array([5, 100, 3, 2, 1])
        assert holdout_split(vocabulary, 0.2, HoldoutStrategy.RARE_FIRST, counts=counts) == {3}

    def test_exact_size(self):
        unseen = holdout_split(grid_vocabulary(2, 5), 0.2, HoldoutStrategy.RANDOM, seed=1)
        assert len(unseen) == 2

    def test_random_is_seeded(self):
        vocabulary = grid_vocabulary(4, 5)
        a = holdout_split(vocabulary, 0.3, "random", seed=7)
        assert a == holdout_split(vocabulary, 0.3, "random", seed=7)

    def test_infeasible(self, vocabulary):
        with pytest.raises(GeneratorError, match="one seen per verb"):
            holdout_split(vocabulary, 0.6)


class TestGenerate:
    @pytest.fixture
    def bundle(self, tiny_generator):
        return generate(dataclasses.replace(tiny_generator, unseen_fraction=0.2))

    def test_deterministic(self, tiny_generator):
        a, b = generate(tiny_generator), generate(tiny_generator)
        assert a.pair_records == b.pair_records
        assert a.gt_annotations == b.gt_annotations
        assert a.vocabulary == b.vocabulary

    def test_unseen_only_in_test(self, bundle):
        unseen = bundle.vocabulary.unseen
        assert unseen
        for split in (Split.TRAIN, Split.VAL, Split.UNLABELED):
            counts = composition_counts(bundle, split)
            assert all(counts[c] == 0 for c in unseen)
        test_counts = composition_counts(bundle, Split.TEST)
        assert set(test_counts.values()) == {4}

    def test_rare_flags_follow_train_counts(self, bundle):
        counts = composition_counts(bundle, Split.TRAIN)
        expected = {c for c, n in counts.items() if c not in bundle.vocabulary.unseen and n < 10}
        assert bundle.vocabulary.rare == expected

    def test_unlabeled_pairs_carry_no_labels(self, bundle):
        assert len(bundle.records(Split.UNLABELED)) == 30
        assert all(r.verb_labels is None for r in bundle.records(Split.UNLABELED))

    def test_true_labels_match_given_labels(self, bundle):
        records = bundle.records(Split.TRAIN)
        labels = true_labels(bundle, records)
        assert all(labels[r.pair_id] == r.verb_labels for r in records)

    def test_feature_dimensions(self, bundle):
        record = bundle.records(Split.TEST)[0]
        assert (len(record.features["human"]), len(record.features["object"])) == (6, 6)
        assert len(record.pose.keypoints) == 3

    def test_passes_validation(self, bundle):
        records = [*bundle.pair_records, *bundle.gt_annotations]
        dims = {"human": 6, "object": 6}
        assert validate_dataset(records, bundle.vocabulary, dims, bundle.n_keypoints) == []


class TestSpuriousCorrelation:
    def test_mutual_information_grows_with_strength(self):
        base = GeneratorConfig(n_verbs=4, n_objects=6, composition_density=1.0, val_fraction=0.0, seed=2)
        independent = mutual_information(generate(dataclasses.replace(base, spurious_strength=0.0)))
        correlated = mutual_information(generate(dataclasses.replace(base, spurious_strength=0.8)))
        assert correlated > independent + 0.1
        assert independent < 0.1

    def test_object_identity_alone_is_at_chance_without_correlation(self):
        config = GeneratorConfig(
            n_verbs=4,
            n_objects=6,
            composition_density=1.0,
            spurious_strength=0.0,
            object_confusion=0.0,
            val_fraction=0.0,
            seed=3,
        )
        bundle = generate(config)
        compositions = bundle.vocabulary.compositions
        train = bundle.records(Split.TRAIN)
        votes: dict[int, Counter] = {}
        for record, c in zip(train, true_compositions(bundle, train), strict=True):
            votes.setdefault(record.object_category, Counter())[compositions[c][0]] += 1
        test = bundle.records(Split.TEST)
        hits = [
            votes[record.object_category].most_common(1)[0][0] == compositions[c][0]
            for record, c in zip(test, true_compositions(bundle, test), strict=True)
        ]
        assert np.mean(hits) == pytest.approx(1.0 / config.n_verbs)
        assert mutual_information(bundle, Split.TEST) == pytest.approx(0.0, abs=1e-12)
