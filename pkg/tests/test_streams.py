"""Tests for the stream MLPs, their loss and training."""

import json
import math

import numpy as np
import pytest
import torch

from hoigen.core import BBox, NumericError, Pose2D, ValidationError
from hoigen.models import (
    MlpSpec,
    StreamError,
    StreamNet,
    StreamOutput,
    backward,
    encode_spatial,
    forward,
    gradient_check,
    load_checkpoint,
    make_stream,
    save_checkpoint,
    sgd_step,
    train_stream,
    uncertainty_loss,
)
from hoigen.models.mlp import loss


def toy_batch(seed: int, n: int = 6, d: int = 3, v: int = 2) -> tuple[torch.Tensor, torch.Tensor]:
    generator = torch.Generator().manual_seed(seed)
    x = torch.randn(n, d, generator=generator, dtype=torch.float64)
    y = (torch.rand(n, v, generator=generator, dtype=torch.float64) > 0.5).to(torch.float64)
    return x, y


class TestEncodeSpatial:
    def test_union_box_normalizes_to_unit_square(self):
        vector = encode_spatial(BBox(0, 0, 4, 2), BBox(1, 0.5, 3, 1.5), None, n_keypoints=0)
        np.testing.assert_allclose(vector[:4], [0, 0, 1, 1])

    def test_hand_example(self):
        vector = encode_spatial(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3), Pose2D.from_list([[1, 1]]))
        np.testing.assert_allclose(vector, [0, 0, 2 / 3, 2 / 3, 1 / 3, 1 / 3, 1, 1, 1 / 3, 1 / 3])

    def test_translation_invariant(self):
        pose = Pose2D.from_list([[1, 1], [2, 0.5]])
        shifted = Pose2D.from_list([[11, 11], [12, 10.5]])
        a = encode_spatial(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3), pose)
        b = encode_spatial(BBox(10, 10, 12, 12), BBox(11, 11, 13, 13), shifted)
        np.testing.assert_allclose(a, b)

    def test_scale_invariant(self):
        a = encode_spatial(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3), Pose2D.from_list([[1, 1], [2, 0.5]]))
        b = encode_spatial(BBox(0, 0, 6, 6), BBox(3, 3, 9, 9), Pose2D.from_list([[3, 3], [6, 1.5]]))
        np.testing.assert_allclose(a, b)

    def test_length(self):
        assert encode_spatial(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3), None, n_keypoints=5).shape == (18,)

    def test_missing_pose_at_human_centre(self):
        vector = encode_spatial(BBox(0, 0, 2, 2), BBox(2, 2, 4, 4), None, n_keypoints=1)
        np.testing.assert_allclose(vector[-2:], [0.25, 0.25])

    def test_degenerate_box(self):
        with pytest.raises(ValidationError):
            encode_spatial(BBox(0, 0, 0, 2), BBox(1, 1, 3, 3), None, n_keypoints=0)

    def test_keypoint_count_checked(self):
        with pytest.raises(StreamError):
            encode_spatial(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3), Pose2D.from_list([[1, 1]]), n_keypoints=2)


def f64(value: float) -> torch.Tensor:
    return torch.tensor(value, dtype=torch.float64)


class TestUncertaintyLoss:
    @pytest.mark.parametrize(
        ("s", "y", "e", "expected"),
        [
            (0.0, 0.5, 0.0, 0.0),
            (0.0, 1.0, 0.0, 0.25),
            (0.0, 1.0, math.log(2.0), 0.0625 + math.log(2.0) / 2.0),
        ],
    )
    def test_hand_values(self, s, y, e, expected):
        assert uncertainty_loss(f64(s), f64(e), f64(y)).item() == pytest.approx(expected, abs=1e-9)

    def test_stationary_point_in_log_variance(self):
        # residual sigmoid(0) - 0.9 = -0.4, so the minimum sits at exp(2e) = 4 * 0.16
        e_star = 0.5 * math.log(4 * 0.4**2)
        e = f64(e_star).requires_grad_(True)
        value = uncertainty_loss(f64(0.0), e, f64(0.9))
        (grad,) = torch.autograd.grad(value, e)
        assert grad.item() == pytest.approx(0.0, abs=1e-12)
        for shift in (-0.1, 0.1):
            assert uncertainty_loss(f64(0.0), f64(e_star + shift), f64(0.9)).item() > value.item()

    def test_larger_residual_never_lowers_the_loss(self):
        values = [uncertainty_loss(f64(s), f64(0.3), f64(1.0)).item() for s in (3.0, 1.0, 0.0, -2.0)]
        assert values == sorted(values)

    def test_variance_is_penalised_on_exact_predictions(self):
        values = [uncertainty_loss(f64(0.0), f64(e), f64(0.5)).item() for e in (-1.0, 0.0, 1.0)]
        assert values[0] < values[1] < values[2]

    def test_log_variance_is_clamped(self):
        value = uncertainty_loss(torch.tensor(0.0), torch.tensor(-50.0), torch.tensor(0.5))
        assert value.item() == pytest.approx(-5.0)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            uncertainty_loss(torch.tensor(math.nan), torch.tensor(0.0), torch.tensor(1.0))


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_autograd_matches_finite_differences(self, seed):
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2, seed=seed))
        x, y = toy_batch(seed)
        error = gradient_check(lambda: loss(model, x, y), list(model.parameters()))
        assert error < 1e-4

    def test_without_uncertainty_head(self):
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4, 3), n_verbs=2, seed=1, uncertainty=False))
        x, y = toy_batch(1)
        assert model.e_head is None
        assert gradient_check(lambda: loss(model, x, y), list(model.parameters())) < 1e-4

    def test_zero_weights_give_finite_gradients(self):
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2))
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        grads = backward(model, *toy_batch(0))
        assert all(torch.isfinite(g).all() for g in grads.values())
        assert set(grads) == {name for name, _ in model.named_parameters()}


class TestStreamNet:
    def test_forward_shapes(self):
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2))
        output = forward(model, toy_batch(0)[0])
        assert isinstance(output, StreamOutput)
        assert (len(output), output.n_verbs) == (6, 2)

    def test_wrong_input_width(self):
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2))
        with pytest.raises(StreamError):
            forward(model, torch.zeros(2, 5, dtype=torch.float64))

    def test_invalid_spec(self):
        with pytest.raises(StreamError):
            MlpSpec(input_dim=3, hidden=(), n_verbs=2)

    def test_output_rejects_nan(self):
        with pytest.raises(NumericError):
            StreamOutput(torch.tensor([[math.nan]]), torch.zeros(1, 1))

    def test_same_seed_same_training(self):
        x, y = toy_batch(2, n=40)
        states = []
        for _ in range(2):
            model = StreamNet(MlpSpec(input_dim=3, hidden=(8,), n_verbs=2, seed=5))
            train_stream(model, x, y, epochs=5, lr=0.05, batch_size=8, seed=9)
            states.append(model.state_dict())
        for name, tensor in states[0].items():
            assert torch.equal(tensor, states[1][name])

    def test_training_reduces_loss(self):
        generator = torch.Generator().manual_seed(0)
        x = torch.randn(200, 3, generator=generator, dtype=torch.float64)
        y = torch.stack([(x[:, 0] > 0), (x[:, 1] < 0)], dim=1).to(torch.float64)
        model = StreamNet(MlpSpec(input_dim=3, hidden=(16,), n_verbs=2, seed=0))
        history = train_stream(model, x, y, epochs=30, lr=0.1, batch_size=16)
        assert history[-1] < history[0]

    def test_sgd_step_moves_against_gradient(self):
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2, seed=1))
        before = model.s_head.bias.detach().clone()
        grad = torch.ones_like(before)
        sgd_step(model, {"s_head.bias": grad}, lr=0.5)
        torch.testing.assert_close(model.s_head.bias.detach(), before - 0.5)

    def test_sgd_step_unknown_parameter(self):
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2))
        with pytest.raises(StreamError):
            sgd_step(model, {"missing.weight": torch.zeros(1)}, lr=0.1)

    def test_empty_dataset(self):
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2))
        with pytest.raises(StreamError):
            train_stream(model, torch.zeros(0, 3), torch.zeros(0, 2), epochs=1)


class TestCheckpoint:
    def test_save_and_load(self, tmp_path):
        model = StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2, seed=3))
        save_checkpoint(model, tmp_path / "m.json", extra={"stream": "human"})
        loaded, extra = load_checkpoint(tmp_path / "m.json")
        x = toy_batch(0)[0]
        torch.testing.assert_close(forward(loaded, x).s, forward(model, x).s)
        assert extra == {"stream": "human"}

    def test_layers_are_named_and_shaped(self, tmp_path):
        save_checkpoint(StreamNet(MlpSpec(input_dim=3, hidden=(4,), n_verbs=2)), tmp_path / "m.json")
        layers = json.loads((tmp_path / "m.json").read_text())["layers"]
        assert {row["name"]: row["shape"] for row in layers}["hidden.0.weight"] == [4, 3]


class TestStreams:
    def test_feature_stream_inputs(self, pair_record):
        assert make_stream("human").inputs([pair_record]).shape == (1, 4)

    def test_missing_features(self, pair_record):
        with pytest.raises(StreamError, match="no object features"):
            make_stream("object").inputs([pair_record])

    def test_spatial_stream(self, pair_record):
        assert make_stream("spatial", n_keypoints=2).inputs([pair_record]).shape == (1, 12)

    def test_unknown_stream(self):
        with pytest.raises(StreamError):
            make_stream("audio")
