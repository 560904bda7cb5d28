"""Tests for the object classifier, synthesizer and synthesized stream training."""

import numpy as np
import pytest
import torch

from hoigen.models import MlpSpec, StreamNet, forward, gradient_check
from hoigen.oc_immune import (
    ObjectClassifier,
    ObjectPool,
    OcImmuneCheckpoint,
    OcImmuneError,
    SimilarityTable,
    Synthesizer,
    SynthesizerSpec,
    build_similarity,
    draw_partner,
    fit_oc_immune,
    infer_object_stream,
    is_frozen,
    synth_sample,
    synthesize_epoch,
    synthesizer_loss,
    synthesizer_target,
    train_object_classifier,
    train_object_verb_stream,
    train_synthesizer,
)


def clusters(n: int = 100, d: int = 4, seed: int = 0) -> tuple[torch.Tensor, list[int]]:
    """Two Gaussian clusters at -2 and +2 on every axis."""
    generator = torch.Generator().manual_seed(seed)
    labels = [i % 2 for i in range(n)]
    centres = torch.tensor([[-2.0] * d if c == 0 else [2.0] * d for c in labels], dtype=torch.float64)
    return centres + 0.5 * torch.randn(n, d, generator=generator, dtype=torch.float64), labels


@pytest.fixture
def pool() -> ObjectPool:
    features = torch.arange(12, dtype=torch.float64).reshape(4, 3)
    labels = torch.tensor([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
    return ObjectPool(features, labels, (0, 0, 1, 2))


@pytest.fixture
def similarity() -> SimilarityTable:
    """Every category similar only to itself."""
    return SimilarityTable((frozenset({0}), frozenset({1}), frozenset({2})))


class TestObjectClassifier:
    def test_separable_clusters(self):
        x, labels = clusters()
        classifier = train_object_classifier(x, labels, 2, hidden=(8,), epochs=30, lr=0.1, batch_size=16)
        x_held, labels_held = clusters(seed=1)
        accuracy = (classifier(x_held).argmax(dim=1) == torch.tensor(labels_held)).double().mean().item()
        assert accuracy > 0.95
        assert is_frozen(classifier)

    def test_length_mismatch(self):
        x, labels = clusters(n=10)
        with pytest.raises(OcImmuneError):
            train_object_classifier(x, labels[:-1], 2)

    def test_single_category(self):
        x, _ = clusters(n=10)
        with pytest.raises(OcImmuneError, match="two categories"):
            train_object_classifier(x, [0] * 10, 2)


class TestSynthesizer:
    def test_target_duplication(self):
        torch.testing.assert_close(synthesizer_target(1, 1, 3), torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))

    def test_target_two_categories(self):
        torch.testing.assert_close(synthesizer_target(0, 2, 3), torch.tensor([0.5, 0.0, 0.5], dtype=torch.float64))

    def test_untrained_is_identity_on_duplicates(self):
        synthesizer = Synthesizer(SynthesizerSpec(dim=3, hidden=(5,)))
        f = torch.randn(4, 3, dtype=torch.float64)
        with torch.no_grad():
            torch.testing.assert_close(synthesizer(f, f), f)

    def test_requires_frozen_classifier(self):
        x, labels = clusters(n=20)
        classifier = train_object_classifier(x, labels, 2, hidden=(4,), epochs=1)
        classifier.requires_grad_(True)
        with pytest.raises(OcImmuneError, match="frozen"):
            train_synthesizer(x, labels, classifier, hidden=(4,), epochs=1)

    def test_classifier_unchanged_by_synthesizer_training(self):
        x, labels = clusters(n=40)
        classifier = train_object_classifier(x, labels, 2, hidden=(4,), epochs=5)
        before = {k: v.clone() for k, v in classifier.state_dict().items()}
        train_synthesizer(x, labels, classifier, hidden=(4,), epochs=3)
        for name, tensor in classifier.state_dict().items():
            assert torch.equal(tensor, before[name])

    def test_checkpoint_round_trip(self, tmp_path):
        x, labels = clusters(n=40)
        checkpoint = fit_oc_immune(
            x, labels, 2, hidden=(4,), classifier_epochs=3, synthesizer_epochs=2, dup_prob=0.3
        )
        checkpoint.save(tmp_path / "synth.json")
        loaded = OcImmuneCheckpoint.load(tmp_path / "synth.json")
        torch.testing.assert_close(loaded.synthesizer(x, x.flip(0)), checkpoint.synthesizer(x, x.flip(0)))
        assert loaded.dup_prob == 0.3
        assert is_frozen(loaded.classifier) and is_frozen(loaded.synthesizer)


class TestSynthesizerObjective:
    @pytest.mark.parametrize("seed", range(20))
    def test_autograd_matches_finite_differences(self, seed):
        generator = torch.Generator().manual_seed(seed)
        classifier = ObjectClassifier(3, (4,), 2, seed=seed).requires_grad_(False)
        synthesizer = Synthesizer(SynthesizerSpec(dim=3, hidden=(5,), seed=seed))
        with torch.no_grad():
            for param in synthesizer.parameters():
                param.add_(0.3 * torch.randn(param.shape, generator=generator, dtype=torch.float64))
        f_a = torch.randn(5, 3, generator=generator, dtype=torch.float64)
        f_b = torch.randn(5, 3, generator=generator, dtype=torch.float64)
        categories = torch.randint(2, (5, 2), generator=generator)
        targets = torch.stack([synthesizer_target(int(a), int(b), 2) for a, b in categories])

        def objective() -> torch.Tensor:
            return synthesizer_loss(synthesizer, classifier, f_a, f_b, targets)

        assert gradient_check(objective, list(synthesizer.parameters())) < 1e-4

    def test_fused_features_split_between_categories(self):
        x, labels = clusters(n=200)
        classifier = train_object_classifier(x, labels, 2, hidden=(8,), epochs=30, lr=0.1, batch_size=16)
        synthesizer = train_synthesizer(x, labels, classifier, hidden=(16,), epochs=300, lr=0.05, batch_size=32)
        x_held, _ = clusters(seed=1)
        with torch.no_grad():
            p = torch.softmax(classifier(synthesizer(x_held[0::2], x_held[1::2])), dim=1)
        total_variation = 0.5 * (p - 0.5).abs().sum(dim=1)
        assert total_variation.mean().item() <= 0.15


class TestSimilarity:
    def test_shared_verb(self, vocabulary):
        table = build_similarity(vocabulary)
        assert table.is_similar(0, 1) and table.is_similar(1, 0)

    def test_isolated_category(self, vocabulary):
        assert build_similarity(vocabulary).similar[2] == frozenset({2})

    def test_asymmetric_rejected(self):
        with pytest.raises(OcImmuneError, match="symmetric"):
            SimilarityTable((frozenset({0, 1}), frozenset({1})))


class TestPartners:
    def test_full_duplication(self, pool, similarity):
        rng = np.random.default_rng(0)
        assert all(draw_partner(i, pool, similarity, 1.0, rng) == i for i in range(len(pool)))

    def test_duplicate_keeps_label(self, pool, similarity):
        synthesizer = Synthesizer(SynthesizerSpec(dim=3, hidden=(4,)))
        fused, label = synth_sample(0, pool, similarity, synthesizer, 1.0, np.random.default_rng(0))
        torch.testing.assert_close(label, pool.labels[0])
        torch.testing.assert_close(fused, synthesizer(pool.features[:1], pool.features[:1])[0].detach())

    def test_intermediate_label(self, pool, similarity):
        synthesizer = Synthesizer(SynthesizerSpec(dim=3, hidden=(4,)))
        _, label = synth_sample(0, pool, similarity, synthesizer, 0.0, np.random.default_rng(0))
        torch.testing.assert_close(label, torch.tensor([0.5, 0.0], dtype=torch.float64))

    def test_no_similar_record_falls_back_to_duplication(self, pool, similarity):
        assert draw_partner(3, pool, similarity, 0.0, np.random.default_rng(0)) == 3

    def test_partner_is_another_record(self, pool, similarity):
        rng = np.random.default_rng(1)
        assert {draw_partner(1, pool, similarity, 0.0, rng) for _ in range(20)} == {0}

    def test_partners_stay_within_similar_categories(self, pool):
        linked = SimilarityTable((frozenset({0, 1}), frozenset({0, 1}), frozenset({2})))
        rng = np.random.default_rng(2)
        assert {draw_partner(2, pool, linked, 0.0, rng) for _ in range(100)} == {0, 1}

    def test_invalid_dup_prob(self, pool, similarity):
        with pytest.raises(OcImmuneError):
            draw_partner(0, pool, similarity, 1.5, np.random.default_rng(0))

    def test_epoch_matches_per_sample_draws(self, pool, similarity):
        synthesizer = Synthesizer(SynthesizerSpec(dim=3, hidden=(4,)))
        x, y = synthesize_epoch(pool, similarity, synthesizer, 0.5, seed=3, epoch=2)
        for i in range(len(pool)):
            fused, label = synth_sample(i, pool, similarity, synthesizer, 0.5, np.random.default_rng([3, 2, i]))
            torch.testing.assert_close(x[i], fused)
            torch.testing.assert_close(y[i], label)


class TestObjectVerbStream:
    def test_deterministic(self, pool, similarity):
        synthesizer = Synthesizer(SynthesizerSpec(dim=3, hidden=(4,)))
        runs = []
        for _ in range(2):
            model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2, seed=1))
            history = train_object_verb_stream(model, pool, similarity, synthesizer, epochs=3, batch_size=2, seed=4)
            runs.append((history, model.s_head.weight.detach().clone()))
        assert runs[0][0] == runs[1][0]
        assert torch.equal(runs[0][1], runs[1][1])
        assert len(runs[0][0]) == 3

    def test_inference_uses_self_fusion(self, pool):
        synthesizer = Synthesizer(SynthesizerSpec(dim=3, hidden=(4,)))
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2))
        # untrained synthesizer maps (f, f) to f
        expected = forward(model, pool.features).s
        torch.testing.assert_close(infer_object_stream(model, synthesizer, pool.features).s, expected)
