"""Calibration-aware unified inference.

Each stream's logits are Platt-scaled per verb and divided by the predicted standard
deviation, then multiplied by the detector confidences:

    p* = sigmoid((w* s* + c*) / exp(e*)) * det_h * det_o

The three calibrated streams are fused with weights on the probability simplex. Scaling
and fusion parameters are fitted on the validation split with the stream models frozen.
"""

from __future__ import annotations

import json
import logging
import pathlib
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from .core import FormatError, NumericError, Split, ValidationError
from .formats import ScoreRow
from .models.mlp import E_CLAMP, StreamOutput
from .uncertainty import bce

logger = logging.getLogger(__name__)

STREAMS = ("human", "object", "spatial")
SIMPLEX_TOLERANCE = 1e-6
DEFAULT_BETA = 1.0
DEFAULT_GAMMA = 0.1
DEFAULT_EPOCHS = 2
DEFAULT_LR = 1e-3


class CalibrationError(ValidationError):
    """Raised on invalid calibration inputs or parameters."""

    pass


class Agreement(StrEnum):
    """Stream agreement term: per-verb mean outcomes, per-sample outcomes, or none."""

    DISTRIBUTIONAL = "distributional"
    POINT = "point"
    NONE = "none"


def _as_det(det: torch.Tensor | float) -> torch.Tensor:
    det = torch.as_tensor(det, dtype=torch.float64)
    if not torch.isfinite(det).all() or (det < 0).any() or (det > 1).any():
        raise CalibrationError("detector confidences must lie in [0, 1]")
    return det.unsqueeze(-1) if det.dim() == 1 else det


def calibrate_stream(
    s: torch.Tensor,
    e: torch.Tensor,
    w: torch.Tensor | float,
    c: torch.Tensor | float,
    det_h: torch.Tensor | float = 1.0,
    det_o: torch.Tensor | float = 1.0,
) -> torch.Tensor:
    """sigmoid((w * s + c) / exp(e)) * det_h * det_o, elementwise over (n, |V|).

    ``w`` and ``c`` broadcast per verb; ``det_h`` and ``det_o`` are scalars or (n,) vectors.
    ``e`` is clamped to [-10, 10].
    """
    s = torch.as_tensor(s, dtype=torch.float64)
    e = torch.as_tensor(e, dtype=torch.float64)
    if not (torch.isfinite(s).all() and torch.isfinite(e).all()):
        raise NumericError("non-finite stream outputs")
    logit = (w * s + c) / torch.exp(e.clamp(-E_CLAMP, E_CLAMP))
    return torch.sigmoid(logit) * _as_det(det_h) * _as_det(det_o)


def agreement_loss(p_h: torch.Tensor, p_o: torch.Tensor, p_sp: torch.Tensor) -> torch.Tensor:
    """Mean over verbs of the pairwise absolute differences of per-verb sample means.

    Zero iff the streams share identical per-verb means; invariant to permuting samples
    within a stream.
    """
    if not p_h.shape == p_o.shape == p_sp.shape:
        raise CalibrationError(f"stream shapes differ: {tuple(p_h.shape)}, {tuple(p_o.shape)}, {tuple(p_sp.shape)}")
    m_h, m_o, m_sp = p_h.mean(dim=0), p_o.mean(dim=0), p_sp.mean(dim=0)
    return ((m_h - m_o).abs() + (m_o - m_sp).abs() + (m_sp - m_h).abs()).mean()


def point_agreement_loss(p_h: torch.Tensor, p_o: torch.Tensor, p_sp: torch.Tensor) -> torch.Tensor:
    """Per-sample variant: mean over samples and verbs of the pairwise absolute differences."""
    if not p_h.shape == p_o.shape == p_sp.shape:
        raise CalibrationError(f"stream shapes differ: {tuple(p_h.shape)}, {tuple(p_o.shape)}, {tuple(p_sp.shape)}")
    return ((p_h - p_o).abs() + (p_o - p_sp).abs() + (p_sp - p_h).abs()).mean()


def check_simplex(fusion: Sequence[float] | torch.Tensor) -> torch.Tensor:
    fusion = torch.as_tensor(fusion, dtype=torch.float64)
    if fusion.shape != (3,):
        raise CalibrationError(f"fusion needs 3 weights, got shape {tuple(fusion.shape)}")
    if (fusion < -SIMPLEX_TOLERANCE).any() or abs(float(fusion.sum()) - 1.0) > SIMPLEX_TOLERANCE:
        raise CalibrationError(f"fusion weights {fusion.tolist()} are not on the simplex")
    return fusion


def fuse(
    p_h: torch.Tensor, p_o: torch.Tensor, p_sp: torch.Tensor, fusion: Sequence[float] | torch.Tensor
) -> torch.Tensor:
    """Convex combination f_h p_h + f_o p_o + f_sp p_sp."""
    f = check_simplex(fusion)
    return f[0] * p_h + f[1] * p_o + f[2] * p_sp


def calibration_loss(
    p_h: torch.Tensor,
    p_o: torch.Tensor,
    p_sp: torch.Tensor,
    fused: torch.Tensor,
    labels: torch.Tensor,
    beta: float = DEFAULT_BETA,
    gamma: float = DEFAULT_GAMMA,
    agreement: Agreement = Agreement.DISTRIBUTIONAL,
) -> torch.Tensor:
    """beta * (L^h + L^o + L^sp) + gamma * L_agree + L_uni, each BCE term a mean over samples and verbs."""
    streams = bce(p_h, labels).mean() + bce(p_o, labels).mean() + bce(p_sp, labels).mean()
    match Agreement(agreement):
        case Agreement.DISTRIBUTIONAL:
            agree = agreement_loss(p_h, p_o, p_sp)
        case Agreement.POINT:
            agree = point_agreement_loss(p_h, p_o, p_sp)
        case Agreement.NONE:
            agree = torch.zeros((), dtype=torch.float64)
    return beta * streams + gamma * agree + bce(fused, labels).mean()


@dataclass
class CalibrationParams:
    """Fitted calibration.

    Attributes:
        w: Per-stream (|V|,) scale vectors.
        c: Per-stream (|V|,) offset vectors.
        fusion: Fusion weights (human, object, spatial) on the simplex.
        beta: Weight of the per-stream terms used when fitting.
        gamma: Weight of the agreement term used when fitting.
        agreement: Agreement variant used when fitting.
    """

    w: dict[str, torch.Tensor]
    c: dict[str, torch.Tensor]
    fusion: tuple[float, float, float]
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    agreement: Agreement = Agreement.DISTRIBUTIONAL
    history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        check_simplex(self.fusion)
        for name in STREAMS:
            if name not in self.w or name not in self.c:
                raise CalibrationError(f"missing parameters for the {name} stream")
            if not (torch.isfinite(self.w[name]).all() and torch.isfinite(self.c[name]).all()):
                raise NumericError(f"non-finite calibration parameters for the {name} stream")

    @property
    def n_verbs(self) -> int:
        return len(self.w[STREAMS[0]])

    @staticmethod
    def identity(n_verbs: int, fusion: Sequence[float] = (1 / 3, 1 / 3, 1 / 3)) -> CalibrationParams:
        return CalibrationParams(
            w={name: torch.ones(n_verbs, dtype=torch.float64) for name in STREAMS},
            c={name: torch.zeros(n_verbs, dtype=torch.float64) for name in STREAMS},
            fusion=tuple(float(f) for f in fusion),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "w": {name: self.w[name].tolist() for name in STREAMS},
            "c": {name: self.c[name].tolist() for name in STREAMS},
            "fusion": dict(zip(STREAMS, self.fusion, strict=True)),
            "beta": self.beta,
            "gamma": self.gamma,
            "agreement": str(self.agreement),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CalibrationParams:
        try:
            return cls(
                w={name: torch.tensor(data["w"][name], dtype=torch.float64) for name in STREAMS},
                c={name: torch.tensor(data["c"][name], dtype=torch.float64) for name in STREAMS},
                fusion=tuple(float(data["fusion"][name]) for name in STREAMS),
                beta=float(data.get("beta", DEFAULT_BETA)),
                gamma=float(data.get("gamma", DEFAULT_GAMMA)),
                agreement=Agreement(data.get("agreement", Agreement.DISTRIBUTIONAL)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed calibration parameters: {e}") from e


@dataclass(frozen=True)
class CalibratedPrediction:
    p_h: torch.Tensor
    p_o: torch.Tensor
    p_sp: torch.Tensor
    fused: torch.Tensor

    def stream(self, name: str) -> torch.Tensor:
        return {"human": self.p_h, "object": self.p_o, "spatial": self.p_sp, "fused": self.fused}[name]


class UnifiedCalibrator(nn.Module):
    """Learnable w, c per stream and verb plus softmax-parameterised fusion weights."""

    def __init__(self, n_verbs: int):
        super().__init__()
        self.w = nn.Parameter(torch.ones(len(STREAMS), n_verbs, dtype=torch.float64))
        self.c = nn.Parameter(torch.zeros(len(STREAMS), n_verbs, dtype=torch.float64))
        self.fusion_logits = nn.Parameter(torch.zeros(len(STREAMS), dtype=torch.float64))

    @property
    def fusion(self) -> torch.Tensor:
        return F.softmax(self.fusion_logits, dim=0)

    def forward(
        self, s: torch.Tensor, e: torch.Tensor, det_h: torch.Tensor, det_o: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Calibrated per-stream probabilities (3, n, |V|) and the fused prediction (n, |V|)."""
        p = torch.stack(
            [calibrate_stream(s[k], e[k], self.w[k], self.c[k], det_h, det_o) for k in range(len(STREAMS))]
        )
        return p, torch.einsum("k,knv->nv", self.fusion, p)

    def params(self, beta: float, gamma: float, agreement: Agreement, history: list[float]) -> CalibrationParams:
        with torch.no_grad():
            return CalibrationParams(
                w={name: self.w[k].detach().clone() for k, name in enumerate(STREAMS)},
                c={name: self.c[k].detach().clone() for k, name in enumerate(STREAMS)},
                fusion=tuple(float(f) for f in self.fusion),
                beta=beta,
                gamma=gamma,
                agreement=agreement,
                history=history,
            )


def _stack_outputs(outputs: Mapping[str, StreamOutput]) -> tuple[torch.Tensor, torch.Tensor]:
    missing = [name for name in STREAMS if name not in outputs]
    if missing:
        raise CalibrationError(f"missing stream outputs {missing}")
    shapes = {tuple(outputs[name].s.shape) for name in STREAMS}
    if len(shapes) != 1:
        raise CalibrationError(f"stream outputs have different shapes {sorted(shapes)}")
    s = torch.stack([outputs[name].s.detach() for name in STREAMS])
    e = torch.stack([outputs[name].e.detach() for name in STREAMS])
    return s, e


def fit_calibration(
    outputs: Mapping[str, StreamOutput],
    labels: torch.Tensor,
    det_h: torch.Tensor | float = 1.0,
    det_o: torch.Tensor | float = 1.0,
    beta: float = DEFAULT_BETA,
    gamma: float = DEFAULT_GAMMA,
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LR,
    batch_size: int | None = None,
    seed: int = 0,
    splits: Sequence[Split] | None = None,
    agreement: Agreement = Agreement.DISTRIBUTIONAL,
    on_step: Callable[[int, float, tuple[float, float, float]], None] | None = None,
) -> CalibrationParams:
    """Fit calibration and fusion parameters with SGD on validation outputs.

    Args:
        outputs: Frozen stream outputs keyed by "human", "object", "spatial".
        labels: (n, |V|) validation labels.
        det_h: Human detector confidences, scalar or (n,).
        det_o: Object detector confidences, scalar or (n,).
        beta: Weight of the per-stream BCE terms.
        gamma: Weight of the agreement term.
        epochs: Passes over the validation data.
        lr: SGD learning rate.
        batch_size: Mini-batch size, full batch when None.
        seed: Shuffling seed.
        splits: Split tag of every row; all must be validation when given.
        agreement: Agreement variant.
        on_step: Callback receiving the step index, the loss and the current fusion weights.

    Returns:
        CalibrationParams: Fitted parameters, with the per-epoch loss history.

    Raises:
        CalibrationError: On empty input, non-validation rows or mismatched shapes.
    """
    if splits is not None:
        leaked = sorted({str(split) for split in splits if split is not Split.VAL})
        if leaked:
            raise CalibrationError(f"calibration must only see validation records, got {leaked}")
    s, e = _stack_outputs(outputs)
    n, n_verbs = s.shape[1], s.shape[2]
    if n == 0:
        raise CalibrationError("empty validation set")
    labels = torch.as_tensor(labels, dtype=torch.float64)
    if labels.shape != (n, n_verbs):
        raise CalibrationError(f"labels have shape {tuple(labels.shape)}, expected {(n, n_verbs)}")
    det_h = torch.as_tensor(det_h, dtype=torch.float64).expand(n)
    det_o = torch.as_tensor(det_o, dtype=torch.float64).expand(n)

    model = UnifiedCalibrator(n_verbs)
    optimizer = torch.optim.SGD(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    history, step = [], 0
    for epoch in range(epochs):
        order = torch.randperm(n, generator=generator)
        total = 0.0
        for index in order.split(batch_size or n):
            optimizer.zero_grad()
            p, fused = model(s[:, index], e[:, index], det_h[index], det_o[index])
            value = calibration_loss(p[0], p[1], p[2], fused, labels[index], beta, gamma, agreement)
            if not torch.isfinite(value):
                raise NumericError(f"calibration loss became non-finite at step {step}")
            value.backward()
            optimizer.step()
            total += value.item() * len(index)
            if on_step is not None:
                on_step(step, value.item(), tuple(float(f) for f in model.fusion.detach()))
            step += 1
        history.append(total / n)
        logger.debug("Calibration epoch %d loss %.6f", epoch, history[-1])
    params = model.params(beta, gamma, Agreement(agreement), history)
    logger.info(
        "Calibrated %d validation pairs over %d epochs, fusion %s",
        n,
        epochs,
        ", ".join(f"{name}={f:.4f}" for name, f in zip(STREAMS, params.fusion, strict=True)),
    )
    return params


def predict(
    params: CalibrationParams,
    outputs: Mapping[str, StreamOutput],
    det_h: torch.Tensor | float = 1.0,
    det_o: torch.Tensor | float = 1.0,
) -> CalibratedPrediction:
    s, e = _stack_outputs(outputs)
    if s.shape[2] != params.n_verbs:
        raise CalibrationError(f"outputs have {s.shape[2]} verbs, parameters {params.n_verbs}")
    p = [calibrate_stream(s[k], e[k], params.w[name], params.c[name], det_h, det_o) for k, name in enumerate(STREAMS)]
    return CalibratedPrediction(*p, fused=fuse(*p, params.fusion))


def uncalibrated_fusion(
    outputs: Mapping[str, StreamOutput], det_h: torch.Tensor | float = 1.0, det_o: torch.Tensor | float = 1.0
) -> CalibratedPrediction:
    """Plain sigmoids times detector confidences, fused uniformly (no calibration, no uncertainty)."""
    s, _ = _stack_outputs(outputs)
    det = _as_det(det_h) * _as_det(det_o)
    p = [torch.sigmoid(s[k]) * det for k in range(len(STREAMS))]
    return CalibratedPrediction(*p, fused=fuse(*p, (1 / 3, 1 / 3, 1 / 3)))


def collect_outputs(rows: Sequence[ScoreRow], pair_ids: Sequence[str]) -> dict[str, StreamOutput]:
    """Arrange score-file rows into per-stream outputs ordered like ``pair_ids``."""
    by_key = {(r.stream, r.pair_id): r for r in rows}
    outputs = {}
    for name in STREAMS:
        missing = [pair_id for pair_id in pair_ids if (name, pair_id) not in by_key]
        if missing:
            raise CalibrationError(f"no {name} scores for pairs {missing[:5]}")
        picked = [by_key[(name, pair_id)] for pair_id in pair_ids]
        outputs[name] = StreamOutput(
            torch.tensor([r.s for r in picked], dtype=torch.float64),
            torch.tensor([r.e for r in picked], dtype=torch.float64),
        )
    return outputs


def emit_calibration(params: CalibrationParams, path: str | pathlib.Path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(params.to_dict(), sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def load_calibration(path: str | pathlib.Path) -> CalibrationParams:
    path = pathlib.Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot open {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON: {e.msg}") from e
    return CalibrationParams.from_dict(data)
