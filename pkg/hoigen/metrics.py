"""Per-composition AP, mAP over composition subsets, and mean Performance Degradation (mPD)."""

from __future__ import annotations

import logging
import os
from collections import defaultdict
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from .core import Detection, GtAnnotation, ValidationError, Vocabulary, iou

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.5


class MetricsError(ValidationError):
    """Raised when a metric is undefined for its inputs."""

    pass


class EvalMode(StrEnum):
    """Default evaluates every image; KnownObject only images whose GT contains the composition's object."""

    DEFAULT = "default"
    KNOWN_OBJECT = "known"


class Subset(StrEnum):
    FULL = "full"
    RARE = "rare"
    NON_RARE = "non_rare"
    SEEN = "seen"
    UNSEEN = "unseen"


@dataclass(frozen=True)
class ApResult:
    """AP of one composition plus its precision/recall curve (in ranked-detection order)."""

    ap: float | None
    precision: np.ndarray
    recall: np.ndarray
    n_gt: int


@dataclass
class ApTable:
    """AP per composition.

    Attributes:
        ap: composition_id to AP, only for compositions with ground truth.
        n_gt: composition_id to number of GT instances (0 marks an absent composition).
        mode: Evaluation mode the table was computed under.
    """

    ap: dict[int, float]
    n_gt: dict[int, int] = field(default_factory=dict)
    mode: EvalMode = EvalMode.DEFAULT

    @property
    def absent(self) -> list[int]:
        return sorted(c for c, n in self.n_gt.items() if n == 0)

    def to_dict(self) -> dict[str, object]:
        return {
            "mode": str(self.mode),
            "ap": {str(c): self.ap[c] for c in sorted(self.ap)},
            "n_gt": {str(c): self.n_gt[c] for c in sorted(self.n_gt)},
        }


@dataclass(frozen=True)
class VerbDegradation:
    o_max: int
    ap_max: float
    mean_ap: float
    degradation: float


@dataclass
class MpdReport:
    """mPD and its per-verb breakdown.

    Attributes:
        mpd: Mean degradation over contributing verbs.
        per_verb: verb_id to its best object, best AP, mean AP over O_v and degradation.
        excluded: verb_id to the reason it was left out (best AP of zero).
    """

    mpd: float
    per_verb: dict[int, VerbDegradation]
    excluded: dict[int, str] = field(default_factory=dict)

    def to_dict(self, vocabulary: Vocabulary | None = None) -> dict[str, object]:
        def name(verb_id: int) -> str:
            return vocabulary.verbs[verb_id] if vocabulary is not None else str(verb_id)

        return {
            "mpd": self.mpd,
            "per_verb": {
                name(v): {
                    "o_max": vocabulary.objects[d.o_max] if vocabulary is not None else d.o_max,
                    "ap_max": d.ap_max,
                    "mean_ap": d.mean_ap,
                    "degradation": d.degradation,
                }
                for v, d in sorted(self.per_verb.items())
            },
            "excluded": {name(v): reason for v, reason in sorted(self.excluded.items())},
        }


def _pair_iou(det: Detection, gt: GtAnnotation) -> float:
    return min(iou(det.human_box, gt.human_box), iou(det.object_box, gt.object_box))


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated area under the PR curve (precision envelope made non-increasing)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_detections(
    detections: Sequence[Detection], gt: Sequence[GtAnnotation], iou_threshold: float = DEFAULT_IOU_THRESHOLD
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy TP/FP assignment of detections to GT pairs.

    Detections are visited by descending score (stable, so ties keep input order). Each takes
    the still-unmatched GT pair of its image with the largest min(human IoU, object IoU),
    provided it reaches ``iou_threshold``.

    Returns:
        tuple[np.ndarray, np.ndarray]: The visiting order and a boolean TP flag per visited detection.
    """
    by_image: dict[str, list[int]] = defaultdict(list)
    for index, annotation in enumerate(gt):
        by_image[annotation.image_id].append(index)

    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    matched = np.zeros(len(gt), dtype=bool)
    tp = np.zeros(len(detections), dtype=bool)
    for rank, det_index in enumerate(order):
        det = detections[det_index]
        best, best_iou = -1, iou_threshold
        for gt_index in by_image.get(det.image_id, ()):
            if matched[gt_index]:
                continue
            overlap = _pair_iou(det, gt[gt_index])
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = gt_index, overlap
        if best >= 0:
            matched[best] = True
            tp[rank] = True
    return order, tp


def compute_ap(
    detections: Sequence[Detection],
    gt: Sequence[GtAnnotation],
    composition_id: int,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> ApResult:
    """AP of one composition.

    Args:
        detections: Detections (other compositions are ignored).
        gt: Ground truth (other compositions are ignored).
        composition_id: Composition to evaluate.
        iou_threshold: Minimum min(human IoU, object IoU) for a true positive.

    Returns:
        ApResult: ``ap`` is None when the composition has no GT instance.
    """
    dets = [d for d in detections if d.composition_id == composition_id]
    gts = [g for g in gt if g.composition_id == composition_id]
    if not gts:
        return ApResult(ap=None, precision=np.zeros(0), recall=np.zeros(0), n_gt=0)

    _, tp = match_detections(dets, gts, iou_threshold)
    tp_cum = np.cumsum(tp, dtype=np.float64)
    fp_cum = np.cumsum(~tp, dtype=np.float64)
    recall = tp_cum / len(gts)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return ApResult(ap=average_precision(recall, precision), precision=precision, recall=recall, n_gt=len(gts))


def _known_object_images(gt: Sequence[GtAnnotation], vocabulary: Vocabulary) -> dict[int, set[str]]:
    images: dict[int, set[str]] = defaultdict(set)
    for annotation in gt:
        images[vocabulary.object_of(annotation.composition_id)].add(annotation.image_id)
    return images


def default_num_workers() -> int:
    """Worker count from HOIGEN_NUM_THREADS, falling back to available parallelism."""
    value = os.getenv("HOIGEN_NUM_THREADS", "")
    return int(value) if value.isdigit() and int(value) > 0 else (os.cpu_count() or 1)


def evaluate(
    detections: Sequence[Detection],
    gt: Sequence[GtAnnotation],
    vocabulary: Vocabulary,
    mode: EvalMode = EvalMode.DEFAULT,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    num_workers: int | None = None,
) -> ApTable:
    """Compute the AP of every composition of ``vocabulary``.

    Compositions are evaluated independently in a thread pool; results are collected in
    composition-index order so the table does not depend on the worker count.
    """
    dets_by_comp: dict[int, list[Detection]] = defaultdict(list)
    gt_by_comp: dict[int, list[GtAnnotation]] = defaultdict(list)
    for d in detections:
        dets_by_comp[d.composition_id].append(d)
    for g in gt:
        gt_by_comp[g.composition_id].append(g)

    images_with_object = _known_object_images(gt, vocabulary) if mode is EvalMode.KNOWN_OBJECT else {}

    def evaluate_one(composition_id: int) -> ApResult:
        dets = dets_by_comp.get(composition_id, [])
        gts = gt_by_comp.get(composition_id, [])
        if mode is EvalMode.KNOWN_OBJECT:
            allowed = images_with_object.get(vocabulary.object_of(composition_id), set())
            dets = [d for d in dets if d.image_id in allowed]
        return compute_ap(dets, gts, composition_id, iou_threshold)

    composition_ids = list(range(vocabulary.n_compositions))
    with ThreadPoolExecutor(max_workers=num_workers or default_num_workers()) as ex:
        results = list(ex.map(evaluate_one, composition_ids))

    table = ApTable(ap={}, n_gt={}, mode=mode)
    for composition_id, result in zip(composition_ids, results, strict=True):
        table.n_gt[composition_id] = result.n_gt
        if result.ap is not None:
            table.ap[composition_id] = result.ap
    logger.debug("Evaluated %d compositions (%s mode), %d with GT", len(composition_ids), mode, len(table.ap))
    return table


def subset_members(vocabulary: Vocabulary, subset: Subset) -> list[int]:
    """Composition ids belonging to ``subset``."""
    all_ids = range(vocabulary.n_compositions)
    match subset:
        case Subset.FULL:
            return list(all_ids)
        case Subset.RARE:
            return [c for c in all_ids if c in vocabulary.rare]
        case Subset.NON_RARE:
            return [c for c in all_ids if c not in vocabulary.rare]
        case Subset.SEEN:
            return [c for c in all_ids if c not in vocabulary.unseen]
        case Subset.UNSEEN:
            return [c for c in all_ids if c in vocabulary.unseen]
    raise MetricsError(f"unknown subset {subset}")


def compute_map(
    ap_table: ApTable,
    vocabulary: Vocabulary,
    mode: EvalMode = EvalMode.DEFAULT,
    subset: Subset = Subset.FULL,
) -> float:
    """Mean AP over the compositions of ``subset`` that have ground truth.

    Raises:
        MetricsError: If the table was computed under another mode or the subset has no
            evaluated composition.
    """
    if ap_table.mode is not EvalMode(mode):
        raise MetricsError(f"AP table was computed in {ap_table.mode} mode, not {mode}; re-run evaluate")
    values = [ap_table.ap[c] for c in subset_members(vocabulary, Subset(subset)) if c in ap_table.ap]
    if not values:
        raise MetricsError(f"subset {subset} has no evaluated composition")
    return float(np.mean(values))


def compute_mpd(ap_table: ApTable, vocabulary: Vocabulary) -> MpdReport:
    """Mean Performance Degradation.

    For every verb with at least two evaluated objects, degradation is
    (AP_max - mean AP over its objects) / AP_max. mPD is the uniform mean over verbs.
    Verbs whose best AP is zero are excluded and listed in ``excluded``.

    Raises:
        MetricsError: If no verb contributes.
    """
    per_verb: dict[int, VerbDegradation] = {}
    excluded: dict[int, str] = {}
    for verb_id in range(vocabulary.n_verbs):
        evaluated = [
            (vocabulary.object_of(c), ap_table.ap[c])
            for c in vocabulary.compositions_of_verb(verb_id)
            if c in ap_table.ap
        ]
        if len(evaluated) < 2:
            continue
        aps = np.array([ap for _, ap in evaluated])
        best = int(np.argmax(aps))
        ap_max = float(aps[best])
        if ap_max <= 0.0:
            excluded[verb_id] = "best AP is zero, degradation undefined"
            logger.warning("Verb %s excluded from mPD: best AP is zero", vocabulary.verbs[verb_id])
            continue
        mean_ap = float(np.mean(aps))
        per_verb[verb_id] = VerbDegradation(
            o_max=evaluated[best][0], ap_max=ap_max, mean_ap=mean_ap, degradation=(ap_max - mean_ap) / ap_max
        )
    if not per_verb:
        raise MetricsError("no verb with at least two evaluated objects and a positive best AP")
    mpd = float(np.mean([per_verb[v].degradation for v in sorted(per_verb)]))
    return MpdReport(mpd=mpd, per_verb=per_verb, excluded=excluded)


def summarize(tables: dict[EvalMode, ApTable], vocabulary: Vocabulary) -> dict[str, object]:
    """mAP for every available mode/subset plus mPD (default mode), as a report section."""
    summary: dict[str, object] = {}
    for mode, table in sorted(tables.items()):
        maps = {}
        for subset in Subset:
            try:
                maps[str(subset)] = compute_map(table, vocabulary, mode, subset)
            except MetricsError:
                continue
        summary[f"map_{mode}"] = maps
    default = tables.get(EvalMode.DEFAULT)
    if default is not None:
        try:
            summary.update(compute_mpd(default, vocabulary).to_dict(vocabulary))
        except MetricsError as e:
            logger.warning("mPD undefined: %s", e)
            summary["mpd"] = None
    return summary
