"""Uncertainty-guided training with unlabeled data.

For every verb, a mixed batch's labeled half yields thresholds on the predicted probability
(``p_p``, ``p_n``, their midpoint ``p_m``) and on the predicted variance (``eps``). Each
unlabeled (sample, verb) then gets a pseudo verdict:

* confident positive (sigma(s) > p_p) or negative (sigma(s) < p_n);
* "true" when its variance exp(e) is below eps, "false" otherwise;
* unfamiliar when sigma(s) lies inside [p_n, p_p], or when the verb had no labeled positive
  or no labeled negative in the batch.

TP/TN samples are trained towards 1/0 with BCE; FP/FN samples towards p_m with a reward for
admitting uncertainty; unfamiliar samples get no loss.
"""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import Any

import torch

from .core import NumericError, ValidationError
from .models.mlp import E_CLAMP, StreamNet, StreamOutput, sgd_step, uncertainty_loss
from .models.streams import DEFAULT_LR

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
DEFAULT_ALPHA = 0.1


class UncertaintyError(ValidationError):
    """Raised on invalid inputs to uncertainty-guided training."""

    pass


class Verdict(StrEnum):
    TP = "TP"
    FP = "FP"
    TN = "TN"
    FN = "FN"
    UNFAMILIAR = "unfamiliar"


# index order of the codes returned by unlabeled_losses
VERDICTS = (Verdict.TP, Verdict.FP, Verdict.TN, Verdict.FN, Verdict.UNFAMILIAR)


@dataclass(frozen=True)
class BatchThresholds:
    """Thresholds of one verb on one mixed batch."""

    p_p: float
    p_n: float
    p_m: float
    eps: float


@dataclass(frozen=True)
class ThresholdTable:
    """Per-verb thresholds as (|V|,) tensors; ``valid`` is False for skipped verbs."""

    p_p: torch.Tensor
    p_n: torch.Tensor
    p_m: torch.Tensor
    eps: torch.Tensor
    valid: torch.Tensor

    def for_verb(self, verb: int) -> BatchThresholds | None:
        if not bool(self.valid[verb]):
            return None
        return BatchThresholds(
            p_p=float(self.p_p[verb]), p_n=float(self.p_n[verb]), p_m=float(self.p_m[verb]), eps=float(self.eps[verb])
        )


def batch_thresholds(outputs: StreamOutput, labels: torch.Tensor) -> ThresholdTable:
    """Thresholds of every verb from the labeled part of a batch.

    ``p_p = max(mean sigma(s) over positives, max sigma(s) over negatives)``,
    ``p_n = min(mean sigma(s) over negatives, min sigma(s) over positives)``,
    ``p_m = (p_p + p_n) / 2`` and ``eps`` = mean exp(e) over all labeled samples.
    Positives are labels equal to 1 and negatives labels equal to 0. Verbs lacking either are
    marked invalid. Thresholds carry no gradient.
    """
    s = outputs.s.detach()
    e = outputs.e.detach().clamp(-E_CLAMP, E_CLAMP)
    labels = torch.as_tensor(labels, dtype=torch.float64)
    if labels.shape != s.shape:
        raise UncertaintyError(f"labels have shape {tuple(labels.shape)}, outputs {tuple(s.shape)}")
    p = torch.sigmoid(s)
    pos, neg = labels == 1.0, labels == 0.0
    n_pos, n_neg = pos.sum(dim=0), neg.sum(dim=0)
    valid = (n_pos > 0) & (n_neg > 0)

    mean_pos = torch.where(pos, p, 0.0).sum(dim=0) / n_pos.clamp(min=1)
    mean_neg = torch.where(neg, p, 0.0).sum(dim=0) / n_neg.clamp(min=1)
    max_neg = torch.where(neg, p, -torch.inf).amax(dim=0) if len(p) else torch.zeros(p.shape[1])
    min_pos = torch.where(pos, p, torch.inf).amin(dim=0) if len(p) else torch.zeros(p.shape[1])
    p_p = torch.where(valid, torch.maximum(mean_pos, max_neg), 0.0)
    p_n = torch.where(valid, torch.minimum(mean_neg, min_pos), 0.0)
    eps = torch.exp(e).mean(dim=0) if len(e) else torch.ones(p.shape[1], dtype=torch.float64)
    return ThresholdTable(p_p=p_p, p_n=p_n, p_m=(p_p + p_n) / 2.0, eps=eps, valid=valid)


def compute_thresholds(outputs: StreamOutput, labels: torch.Tensor, verb: int) -> BatchThresholds | None:
    """Thresholds of ``verb``, or None when the batch lacks labeled positives or negatives."""
    return batch_thresholds(outputs, labels).for_verb(verb)


def bce(p: torch.Tensor | float, y: torch.Tensor | float) -> torch.Tensor:
    """-(log(1 - p)(1 - y) + log(p) y) with p clamped to [1e-7, 1 - 1e-7]; y may be fractional."""
    p = torch.as_tensor(p, dtype=torch.float64).clamp(BCE_EPS, 1.0 - BCE_EPS)
    y = torch.as_tensor(y, dtype=torch.float64)
    return -(torch.log1p(-p) * (1.0 - y) + torch.log(p) * y)


def unlabeled_losses(
    s_u: torch.Tensor, e_u: torch.Tensor, thresholds: ThresholdTable
) -> tuple[torch.Tensor, torch.Tensor]:
    """Verdict codes (indices into VERDICTS) and differentiable losses for an (n, |V|) unlabeled batch.

    Boundaries are strict: sigma(s) equal to p_p or p_n is unfamiliar, and exp(e) equal to
    eps is a "false" verdict.
    """
    if not (torch.isfinite(s_u).all() and torch.isfinite(e_u).all()):
        raise NumericError("non-finite unlabeled outputs")
    e = e_u.clamp(-E_CLAMP, E_CLAMP)
    p = torch.sigmoid(s_u)
    valid = thresholds.valid.unsqueeze(0)
    positive = valid & (p > thresholds.p_p)
    negative = valid & (p < thresholds.p_n)
    certain = torch.exp(e) < thresholds.eps

    codes = torch.full(p.shape, VERDICTS.index(Verdict.UNFAMILIAR), dtype=torch.long)
    codes[positive & certain] = VERDICTS.index(Verdict.TP)
    codes[positive & ~certain] = VERDICTS.index(Verdict.FP)
    codes[negative & certain] = VERDICTS.index(Verdict.TN)
    codes[negative & ~certain] = VERDICTS.index(Verdict.FN)

    uncertain_loss = bce(p, thresholds.p_m.expand_as(p)) - e
    loss = torch.where(
        positive & certain,
        bce(p, 1.0),
        torch.where(negative & certain, bce(p, 0.0), torch.where(positive | negative, uncertain_loss, 0.0)),
    )
    return codes, loss


def unlabeled_loss(s_u: float, e_u: float, thresholds: BatchThresholds | None) -> tuple[Verdict, float]:
    """Verdict and loss of one unlabeled (sample, verb); skipped verbs are unfamiliar with zero loss."""
    if thresholds is None:
        return Verdict.UNFAMILIAR, 0.0
    table = ThresholdTable(
        p_p=torch.tensor([thresholds.p_p], dtype=torch.float64),
        p_n=torch.tensor([thresholds.p_n], dtype=torch.float64),
        p_m=torch.tensor([thresholds.p_m], dtype=torch.float64),
        eps=torch.tensor([thresholds.eps], dtype=torch.float64),
        valid=torch.tensor([True]),
    )
    codes, loss = unlabeled_losses(
        torch.tensor([[s_u]], dtype=torch.float64), torch.tensor([[e_u]], dtype=torch.float64), table
    )
    return VERDICTS[int(codes[0, 0])], float(loss[0, 0])


def labeled_loss(outputs: StreamOutput, labels: torch.Tensor, uncertainty: bool = True) -> torch.Tensor:
    """Elementwise supervised loss: uncertainty loss, or BCE on sigmoid(s) without the e head."""
    if uncertainty:
        return uncertainty_loss(outputs.s, outputs.e, labels)
    return bce(torch.sigmoid(outputs.s), labels)


def batch_loss(
    labeled_out: StreamOutput,
    labels: torch.Tensor,
    unlabeled_out: StreamOutput | None,
    alpha: float = DEFAULT_ALPHA,
    uncertainty: bool = True,
) -> torch.Tensor:
    """Mixed-batch objective ``sum(L^s) / (|B^s| |V|) + alpha * sum(L^u) / (|B^u| |V|)``.

    Raises:
        UncertaintyError: If the labeled batch is empty or alpha is negative.
    """
    if len(labeled_out) == 0:
        raise UncertaintyError("mixed batch has no labeled samples")
    if alpha < 0:
        raise UncertaintyError(f"alpha={alpha} must be non-negative")
    labels = torch.as_tensor(labels, dtype=torch.float64)
    n_verbs = labeled_out.n_verbs
    total = labeled_loss(labeled_out, labels, uncertainty).sum() / (len(labeled_out) * n_verbs)
    if unlabeled_out is not None and len(unlabeled_out) > 0 and alpha > 0:
        _, loss_u = unlabeled_losses(unlabeled_out.s, unlabeled_out.e, batch_thresholds(labeled_out, labels))
        total = total + alpha * loss_u.sum() / (len(unlabeled_out) * n_verbs)
    return total


# --------------------------------------------------------------------------- #
# Pseudo labels
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class VerdictRecord:
    pair_id: str
    verb: int
    verdict: Verdict
    sigma_s: float
    var: float
    loss: float

    def to_row(self) -> dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "verb": self.verb,
            "verdict": str(self.verdict),
            "sigma_s": self.sigma_s,
            "var": self.var,
            "loss": self.loss,
        }

    @classmethod
    def from_row(cls, row: Mapping[str, Any]) -> VerdictRecord:
        return cls(
            pair_id=str(row["pair_id"]),
            verb=int(row["verb"]),
            verdict=Verdict(row["verdict"]),
            sigma_s=float(row["sigma_s"]),
            var=float(row["var"]),
            loss=float(row["loss"]),
        )


def pseudo_label(
    labeled_out: StreamOutput,
    labels: torch.Tensor,
    unlabeled_out: StreamOutput,
    pair_ids: Sequence[str],
    batch_size: int | None = None,
) -> list[VerdictRecord]:
    """Verdicts of every unlabeled (pair, verb).

    With ``batch_size`` the data are cut into consecutive mixed batches of ``batch_size``
    labeled and ``batch_size`` unlabeled rows (the labeled rows cycle when they run out),
    and thresholds are recomputed per batch. Without it the whole labeled set is one batch.
    """
    if len(pair_ids) != len(unlabeled_out):
        raise UncertaintyError(f"{len(pair_ids)} pair ids for {len(unlabeled_out)} unlabeled outputs")
    if len(labeled_out) == 0:
        raise UncertaintyError("pseudo-labeling needs labeled outputs")
    labels = torch.as_tensor(labels, dtype=torch.float64)
    size = batch_size or len(unlabeled_out) or 1
    records = []
    for batch_index, start in enumerate(range(0, len(unlabeled_out), size)):
        u_index = torch.arange(start, min(start + size, len(unlabeled_out)))
        if batch_size:
            l_index = (torch.arange(batch_size) + batch_index * batch_size) % len(labeled_out)
        else:
            l_index = torch.arange(len(labeled_out))
        thresholds = batch_thresholds(labeled_out.select(l_index), labels[l_index])
        batch = unlabeled_out.select(u_index)
        codes, loss = unlabeled_losses(batch.s, batch.e, thresholds)
        sigma = torch.sigmoid(batch.s)
        var = torch.exp(batch.e.clamp(-E_CLAMP, E_CLAMP))
        for row, index in enumerate(u_index.tolist()):
            for verb in range(batch.n_verbs):
                records.append(
                    VerdictRecord(
                        pair_id=pair_ids[index],
                        verb=verb,
                        verdict=VERDICTS[int(codes[row, verb])],
                        sigma_s=float(sigma[row, verb]),
                        var=float(var[row, verb]),
                        loss=float(loss[row, verb]),
                    )
                )
    return records


def verdict_counts(records: Sequence[VerdictRecord]) -> dict[str, int]:
    counts = Counter(r.verdict for r in records)
    return {str(v): counts.get(v, 0) for v in VERDICTS}


def pseudo_label_quality(
    records: Sequence[VerdictRecord], true_labels: Mapping[str, Sequence[float]]
) -> dict[str, dict[str, float]]:
    """Share of ground-truth positives and negatives within each pseudo verdict.

    Args:
        records: Verdicts from pseudo_label.
        true_labels: Ground-truth verb labels per pair_id; pairs missing here are ignored.

    Returns:
        dict[str, dict[str, float]]: For every verdict with at least one record,
            ``{"n", "gt_positive_pct", "gt_negative_pct"}``.
    """
    tallies: dict[Verdict, list[int]] = {v: [0, 0] for v in VERDICTS}
    for record in records:
        labels = true_labels.get(record.pair_id)
        if labels is None:
            continue
        tallies[record.verdict][0 if labels[record.verb] >= 0.5 else 1] += 1
    quality = {}
    for verdict, (positives, negatives) in tallies.items():
        n = positives + negatives
        if n:
            quality[str(verdict)] = {
                "n": n,
                "gt_positive_pct": 100.0 * positives / n,
                "gt_negative_pct": 100.0 * negatives / n,
            }
    return quality


# --------------------------------------------------------------------------- #
# Training loop
# --------------------------------------------------------------------------- #


def mixed_batches(
    n_labeled: int, n_unlabeled: int, batch_size: int, unlabeled_ratio: float, generator: torch.Generator
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Shuffled (labeled, unlabeled) index batches; unlabeled rows are drawn in order and cycle."""
    labeled_order = torch.randperm(n_labeled, generator=generator)
    unlabeled_order = torch.randperm(n_unlabeled, generator=generator)
    result, cursor = [], 0
    for labeled in labeled_order.split(batch_size):
        take = round(len(labeled) * unlabeled_ratio) if n_unlabeled else 0
        unlabeled = unlabeled_order[(torch.arange(take) + cursor) % max(n_unlabeled, 1)]
        cursor += take
        result.append((labeled, unlabeled))
    return result


def train_uncertainty_guided(
    model: StreamNet,
    x_labeled: torch.Tensor,
    y_labeled: torch.Tensor,
    x_unlabeled: torch.Tensor,
    epochs: int,
    lr: float = DEFAULT_LR,
    batch_size: int = 32,
    unlabeled_ratio: float = 1.0,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
    resample: Callable[[int], tuple[torch.Tensor, torch.Tensor]] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Train a stream on mixed labeled/unlabeled batches.

    Args:
        model: Stream classifier, updated in place.
        x_labeled: Labeled inputs.
        y_labeled: Labels of ``x_labeled``.
        x_unlabeled: Unlabeled inputs.
        epochs: Number of passes over the labeled data.
        lr: SGD learning rate.
        batch_size: Labeled rows per mixed batch.
        unlabeled_ratio: Unlabeled rows per labeled row in a mixed batch.
        alpha: Weight of the unlabeled loss.
        seed: Shuffling seed.
        resample: Optional ``epoch -> (x, y)`` replacing the labeled data every epoch
            (synthesized object features).
        on_epoch: Callback receiving the epoch index and mean batch loss.

    Returns:
        list[float]: Mean batch loss of every epoch.
    """
    if unlabeled_ratio < 0:
        raise UncertaintyError(f"unlabeled_ratio={unlabeled_ratio} must be non-negative")
    generator = torch.Generator().manual_seed(seed)
    x_u = torch.as_tensor(x_unlabeled, dtype=torch.float64)
    params = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    history = []
    for epoch in range(epochs):
        x_l, y_l = resample(epoch) if resample is not None else (x_labeled, y_labeled)
        x_l = torch.as_tensor(x_l, dtype=torch.float64)
        y_l = torch.as_tensor(y_l, dtype=torch.float64)
        if len(x_l) == 0:
            raise UncertaintyError("no labeled samples to train on")
        losses = []
        for labeled, unlabeled in mixed_batches(len(x_l), len(x_u), batch_size, unlabeled_ratio, generator):
            s_l, e_l = model(x_l[labeled])
            out_u = StreamOutput(*model(x_u[unlabeled])) if len(unlabeled) else None
            value = batch_loss(StreamOutput(s_l, e_l), y_l[labeled], out_u, alpha, model.spec.uncertainty)
            grads = torch.autograd.grad(value, [p for _, p in params])
            sgd_step(model, {name: g for (name, _), g in zip(params, grads, strict=True)}, lr)
            losses.append(value.item())
        mean_loss = sum(losses) / len(losses)
        history.append(mean_loss)
        logger.debug("Uncertainty-guided epoch %d loss %.6f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    if history:
        logger.info("Uncertainty-guided training: %d epochs, final loss %.6f", epochs, history[-1])
    return history
