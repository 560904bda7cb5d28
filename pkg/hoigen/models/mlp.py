"""Two-headed MLP verb classifier used by every stream.

The network maps a stream input to per-verb logits ``s`` and log-variances ``e``.
All parameters are float64; gradients come from autograd and are checked against central
finite differences by :func:`gradient_check`.
"""

from __future__ import annotations

import json
import logging
import math
import pathlib
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from ..core import FormatError, NumericError, ValidationError

logger = logging.getLogger(__name__)

E_CLAMP = 10.0


class StreamError(ValidationError):
    """Raised when a stream model is misconfigured or gets inputs of the wrong shape."""

    pass


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a stream classifier.

    Attributes:
        input_dim: Length of the input vector.
        hidden: Hidden layer widths, at least one layer.
        n_verbs: Number of verb outputs.
        seed: Seed of the weight initialisation.
        uncertainty: Whether the model has the log-variance head; without it ``e`` is fixed to 0
            and training uses plain binary cross-entropy.
    """

    input_dim: int
    hidden: tuple[int, ...]
    n_verbs: int
    seed: int = 0
    uncertainty: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.n_verbs < 1:
            raise StreamError(f"input_dim and n_verbs must be positive, got {self.input_dim}, {self.n_verbs}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise StreamError(f"need at least one positive hidden width, got {self.hidden}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self) | {"hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> MlpSpec:
        return cls(
            input_dim=int(data["input_dim"]),
            hidden=tuple(data["hidden"]),
            n_verbs=int(data["n_verbs"]),
            seed=int(data.get("seed", 0)),
            uncertainty=bool(data.get("uncertainty", True)),
        )


@dataclass(frozen=True)
class StreamOutput:
    """Per-verb logits ``s`` and log-variances ``e``, both (n, |V|)."""

    s: torch.Tensor
    e: torch.Tensor

    def __post_init__(self) -> None:
        if self.s.shape != self.e.shape or self.s.dim() != 2:
            shapes = f"{tuple(self.s.shape)}, {tuple(self.e.shape)}"
            raise StreamError(f"s and e must be matching (n, V) tensors, got {shapes}")
        if not (torch.isfinite(self.s).all() and torch.isfinite(self.e).all()):
            raise NumericError("stream output has non-finite entries")

    def __len__(self) -> int:
        return self.s.shape[0]

    @property
    def n_verbs(self) -> int:
        return self.s.shape[1]

    def detach(self) -> StreamOutput:
        return StreamOutput(self.s.detach(), self.e.detach())

    def select(self, index: torch.Tensor | Sequence[int]) -> StreamOutput:
        index = torch.as_tensor(index, dtype=torch.long)
        return StreamOutput(self.s[index], self.e[index])

    @staticmethod
    def concat(outputs: Sequence[StreamOutput]) -> StreamOutput:
        return StreamOutput(torch.cat([o.s for o in outputs]), torch.cat([o.e for o in outputs]))


def init_uniform_(layer: nn.Linear, generator: torch.Generator) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias."""
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_(
            (torch.rand(layer.weight.shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0) * bound
        )
        layer.bias.zero_()


class StreamNet(nn.Module):
    """ReLU MLP with a verb-logit head and, when enabled, a log-variance head.

    Args:
        spec: Architecture and initialisation seed.
    """

    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        generator = torch.Generator().manual_seed(spec.seed)
        widths = (spec.input_dim, *spec.hidden)
        self.hidden = nn.ModuleList(
            nn.Linear(a, b, dtype=torch.float64) for a, b in zip(widths[:-1], widths[1:], strict=True)
        )
        self.s_head = nn.Linear(widths[-1], spec.n_verbs, dtype=torch.float64)
        self.e_head = nn.Linear(widths[-1], spec.n_verbs, dtype=torch.float64) if spec.uncertainty else None
        for layer in self.linear_layers():
            init_uniform_(layer, generator)

    def linear_layers(self) -> list[nn.Linear]:
        layers = [*self.hidden, self.s_head]
        if self.e_head is not None:
            layers.append(self.e_head)
        return layers

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = x
        for layer in self.hidden:
            h = F.relu(layer(h))
        s = self.s_head(h)
        e = self.e_head(h) if self.e_head is not None else torch.zeros_like(s)
        return s, e


def _check_input(model: StreamNet, x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.dim() != 2 or x.shape[1] != model.spec.input_dim:
        raise StreamError(f"expected input of shape (n, {model.spec.input_dim}), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise NumericError("stream input has non-finite entries")
    return x


def forward(model: StreamNet, x: torch.Tensor) -> StreamOutput:
    """Run the model without tracking gradients."""
    x = _check_input(model, x)
    with torch.no_grad():
        s, e = model(x)
    return StreamOutput(s, e)


def uncertainty_loss(s: torch.Tensor, e: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Elementwise ((sigmoid(s) - y) / exp(e))^2 + e / 2 for logits ``s`` and log-variances ``e``.

    ``e`` is clamped to [-10, 10] before use. ``y`` may be fractional (intermediate labels of
    synthesized samples).

    Raises:
        NumericError: If any input is NaN or infinite.
    """
    for name, t in (("s", s), ("e", e), ("y", y)):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values in {name}")
    e = e.clamp(-E_CLAMP, E_CLAMP)
    return ((torch.sigmoid(s) - y) / torch.exp(e)) ** 2 + e / 2.0


def stream_loss(model: StreamNet, s: torch.Tensor, e: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean per-verb training loss: uncertainty loss, or BCE on logits when the e head is off."""
    if model.spec.uncertainty:
        return uncertainty_loss(s, e, y).mean()
    if not torch.isfinite(s).all():
        raise NumericError("non-finite logits")
    return F.binary_cross_entropy_with_logits(s, y)


def loss(model: StreamNet, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Differentiable loss of ``model`` on the batch (x, y)."""
    x = _check_input(model, x)
    y = torch.as_tensor(y, dtype=torch.float64)
    if y.shape != (x.shape[0], model.spec.n_verbs):
        raise StreamError(f"labels must have shape ({x.shape[0]}, {model.spec.n_verbs}), got {tuple(y.shape)}")
    s, e = model(x)
    return stream_loss(model, s, e, y)


def backward(model: StreamNet, x: torch.Tensor, y: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of the mean per-verb loss, keyed by parameter name."""
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    value = loss(model, x, y)
    grads = torch.autograd.grad(value, [p for _, p in named])
    for (name, _), g in zip(named, grads, strict=True):
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    return {name: g for (name, _), g in zip(named, grads, strict=True)}


def sgd_step(model: nn.Module, grads: Mapping[str, torch.Tensor], lr: float) -> nn.Module:
    """In-place plain SGD update ``p -= lr * grad`` for every parameter present in ``grads``."""
    params = dict(model.named_parameters())
    unknown = set(grads) - set(params)
    if unknown:
        raise StreamError(f"gradients for unknown parameters {sorted(unknown)}")
    with torch.no_grad():
        for name, g in grads.items():
            params[name].sub_(lr * g)
    return model


def gradient_check(
    loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-6, floor: float = 1e-4
) -> float:
    """Max relative error between autograd gradients and central finite differences.

    Args:
        loss_fn: Closure evaluating a scalar loss from the current parameter values.
        params: Leaf tensors to differentiate with respect to.
        eps: Finite-difference step.
        floor: Lower bound on the denominator of the relative error.

    Returns:
        float: max |analytic - numeric| / max(|analytic| + |numeric|, floor) over all entries.
    """
    analytic = torch.autograd.grad(loss_fn(), list(params))
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic, strict=True):
            flat = p.view(-1)
            grad = g.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                plus = loss_fn().item()
                flat[i] = original - eps
                minus = loss_fn().item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * eps)
                a = grad[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), floor))
    return worst


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #


def state_rows(module: nn.Module) -> list[dict[str, Any]]:
    """Layer name, shape and row-major weights of every tensor in the module's state dict."""
    return [
        {"name": name, "shape": list(t.shape), "weights": t.detach().reshape(-1).tolist()}
        for name, t in module.state_dict().items()
    ]


def load_state_rows(module: nn.Module, rows: Sequence[Mapping[str, Any]]) -> nn.Module:
    """Inverse of state_rows; shapes and names must match the module exactly."""
    try:
        state = {
            row["name"]: torch.tensor(row["weights"], dtype=torch.float64).reshape(row["shape"]) for row in rows
        }
        module.load_state_dict(state)
    except (KeyError, TypeError, RuntimeError) as e:
        raise FormatError(f"malformed checkpoint layers: {e}") from e
    for name, t in module.state_dict().items():
        if not torch.isfinite(t).all():
            raise NumericError(f"checkpoint weights {name} are not finite")
    return module


def model_to_dict(model: StreamNet) -> dict[str, Any]:
    return {"spec": model.spec.to_dict(), "layers": state_rows(model)}


def model_from_dict(data: Mapping[str, Any]) -> StreamNet:
    try:
        model = StreamNet(MlpSpec.from_dict(data["spec"]))
        rows = data["layers"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed stream checkpoint: {e}") from e
    load_state_rows(model, rows)
    return model


def save_checkpoint(model: StreamNet, path: str | pathlib.Path, extra: Mapping[str, Any] | None = None) -> None:
    """Write spec, layer names, shapes and row-major weights as JSON."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = model_to_dict(model) | dict(extra or {})
    path.write_text(json.dumps(data, allow_nan=False) + "\n", encoding="utf-8")
    logger.info("Saved checkpoint to %s", path)


def load_checkpoint(path: str | pathlib.Path) -> tuple[StreamNet, dict[str, Any]]:
    """Read a checkpoint written by save_checkpoint.

    Returns:
        tuple[StreamNet, dict[str, Any]]: The model and any extra top-level fields.
    """
    path = pathlib.Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot open {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON: {e.msg}") from e
    extra = {k: v for k, v in data.items() if k not in ("spec", "layers")}
    return model_from_dict(data), extra
