"""Synthetic HOI benchmark generator.

Datasets have a verb signal shared across objects, an object-identity signal whose
predictiveness of the verb is controlled by ``spurious_strength``, a long-tailed training
distribution, per-verb spatial layouts, and optional zero-shot hold-outs that only appear in
the test split.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from sklearn.metrics import mutual_info_score

from .config import ConfigBase
from .core import BBox, GtAnnotation, PairRecord, Pose2D, Split, ValidationError, Vocabulary
from .formats import DatasetBundle

logger = logging.getLogger(__name__)

IMAGE_SLOT_WIDTH = 1000.0


class GeneratorError(ValidationError):
    """Raised when a generator config is infeasible."""

    pass


class HoldoutStrategy(StrEnum):
    NON_RARE_FIRST = "non-rare-first"
    RARE_FIRST = "rare-first"
    RANDOM = "random"


@dataclass(frozen=True)
class GeneratorConfig(ConfigBase):
    """Synthetic benchmark parameters.

    Attributes:
        n_verbs: Number of verbs.
        n_objects: Number of object categories.
        composition_density: Fraction of (verb, object) pairs that are legal compositions.
        spurious_strength: How strongly object identity predicts the verb in training data
            (0 = not at all) and how strongly category identity shows in object features.
        latent_dim: Dimension of the verb signal.
        human_dim: Human feature dimension.
        object_dim: Object feature dimension.
        n_keypoints: Keypoints per pose.
        max_samples_per_composition: Training samples of the most frequent (verb, object).
        long_tail_exponent: Power-law exponent of the verb and object frequencies.
        rare_threshold: Compositions with fewer training samples are flagged rare.
        unseen_fraction: Fraction of compositions held out of training and validation.
        unseen_strategy: Hold-out selection order.
        val_fraction: Share of the labeled samples moved to the validation split.
        n_unlabeled: Unlabeled pairs, spread uniformly over seen compositions.
        test_per_composition: Test pairs per composition (balanced).
        object_confusion: Probability that the detected object category is wrong.
        object_verb_signal: Weight of the verb signal in object features.
        centroid_gain: Extra object-centroid weight per unit of spurious strength.
        feature_noise: Std of the additive feature noise.
        seed: Generator seed.
    """

    n_verbs: int = 6
    n_objects: int = 5
    composition_density: float = 0.7
    spurious_strength: float = 0.7
    latent_dim: int = 8
    human_dim: int = 16
    object_dim: int = 16
    n_keypoints: int = 5
    max_samples_per_composition: int = 60
    long_tail_exponent: float = 1.0
    rare_threshold: int = 10
    unseen_fraction: float = 0.0
    unseen_strategy: str = HoldoutStrategy.NON_RARE_FIRST.value
    val_fraction: float = 0.4
    n_unlabeled: int = 200
    test_per_composition: int = 10
    object_confusion: float = 0.05
    object_verb_signal: float = 0.5
    centroid_gain: float = 2.0
    feature_noise: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        problems = []
        if self.n_verbs < 1 or self.n_objects < 1:
            problems.append("n_verbs and n_objects must be positive")
        if not 0.0 < self.composition_density <= 1.0:
            problems.append(f"composition_density={self.composition_density} not in (0, 1]")
        if not 0.0 <= self.spurious_strength <= 1.0:
            problems.append(f"spurious_strength={self.spurious_strength} not in [0, 1]")
        if not 0.0 <= self.unseen_fraction < 1.0:
            problems.append(f"unseen_fraction={self.unseen_fraction} not in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            problems.append(f"val_fraction={self.val_fraction} not in [0, 1)")
        if not 0.0 <= self.object_confusion <= 1.0:
            problems.append(f"object_confusion={self.object_confusion} not in [0, 1]")
        if min(self.latent_dim, self.human_dim, self.object_dim, self.max_samples_per_composition) < 1:
            problems.append("dimensions and max_samples_per_composition must be positive")
        if self.n_keypoints < 0 or self.n_unlabeled < 0 or self.test_per_composition < 1:
            problems.append("n_keypoints and n_unlabeled must be >= 0, test_per_composition >= 1")
        try:
            HoldoutStrategy(self.unseen_strategy)
        except ValueError:
            problems.append(f"unknown unseen_strategy {self.unseen_strategy!r}")
        if problems:
            raise GeneratorError("; ".join(problems))


# --------------------------------------------------------------------------- #
# Vocabulary and counts
# --------------------------------------------------------------------------- #


def make_vocabulary(config: GeneratorConfig, rng: np.random.Generator) -> Vocabulary:
    """Random legal composition set; every verb gets at least min(2, n_objects) objects."""
    legal = rng.random((config.n_verbs, config.n_objects)) < config.composition_density
    for v in range(config.n_verbs):
        need = min(2, config.n_objects) - int(legal[v].sum())
        if need > 0:
            legal[v, rng.choice(np.flatnonzero(~legal[v]), size=need, replace=False)] = True
    for o in range(config.n_objects):
        if not legal[:, o].any():
            legal[int(rng.integers(config.n_verbs)), o] = True
    compositions = tuple((int(v), int(o)) for v, o in zip(*np.nonzero(legal), strict=True))
    return Vocabulary(
        verbs=tuple(f"verb_{v:02d}" for v in range(config.n_verbs)),
        objects=tuple(f"obj_{o:02d}" for o in range(config.n_objects)),
        compositions=compositions,
    )


def power_law(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    """Frequencies (rank + 1)^-exponent over a random ranking; the most frequent entry is 1."""
    ranks = rng.permutation(n)
    return (ranks + 1.0) ** -exponent


def training_counts(
    vocabulary: Vocabulary, config: GeneratorConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Labeled sample count per composition and each object's preferred verb.

    Without spurious correlation counts factorise as ``max * n_v * q_o``. With strength rho,
    each object's verb distribution is mixed with a point mass on its preferred verb:
    ``P(v | o) = (1 - rho) * n_v / sum(n) + rho * [v == preferred(o)]`` at constant object total.
    Every composition keeps at least one sample.
    """
    n_v = power_law(vocabulary.n_verbs, config.long_tail_exponent, rng)
    q_o = power_law(vocabulary.n_objects, config.long_tail_exponent, rng)
    preferred = np.array(
        [rng.choice(vocabulary.verbs_for_object(o)) for o in range(vocabulary.n_objects)], dtype=np.int64
    )
    counts = np.zeros(vocabulary.n_compositions, dtype=np.int64)
    rho = config.spurious_strength
    for o in range(vocabulary.n_objects):
        verbs = vocabulary.verbs_for_object(o)
        base = n_v[verbs] / n_v[verbs].sum()
        total = config.max_samples_per_composition * q_o[o] * n_v[verbs].sum()
        mixed = (1.0 - rho) * base + rho * (np.array(verbs) == preferred[o])
        for v, p in zip(verbs, mixed, strict=True):
            counts[vocabulary.composition_id(v, o)] = max(1, round(total * p))
    return counts, preferred


def holdout_split(
    vocabulary: Vocabulary,
    fraction: float,
    strategy: HoldoutStrategy | str = HoldoutStrategy.NON_RARE_FIRST,
    seed: int = 0,
    counts: np.ndarray | None = None,
) -> frozenset[int]:
    """Pick ``round(fraction * |C|)`` compositions to hold out for zero-shot evaluation.

    Candidates are visited by descending training count (non-rare-first), ascending count
    (rare-first), or in random order; ties keep composition order. A composition is skipped
    when it is the last seen composition of its verb.

    Raises:
        GeneratorError: If the fraction is out of range or cannot be met.
    """
    if not 0.0 <= fraction < 1.0:
        raise GeneratorError(f"unseen fraction {fraction} not in [0, 1)")
    target = round(fraction * vocabulary.n_compositions)
    if target == 0:
        return frozenset()
    strategy = HoldoutStrategy(strategy)
    if counts is None:
        counts = np.ones(vocabulary.n_compositions)
    counts = np.asarray(counts)
    match strategy:
        case HoldoutStrategy.NON_RARE_FIRST:
            order = np.argsort(-counts, kind="stable")
        case HoldoutStrategy.RARE_FIRST:
            order = np.argsort(counts, kind="stable")
        case HoldoutStrategy.RANDOM:
            order = np.random.default_rng(seed).permutation(vocabulary.n_compositions)

    seen_per_verb = Counter(v for v, _ in vocabulary.compositions)
    unseen: set[int] = set()
    for composition_id in order.tolist():
        if len(unseen) == target:
            break
        verb = vocabulary.verb_of(composition_id)
        if seen_per_verb[verb] <= 1:
            continue
        seen_per_verb[verb] -= 1
        unseen.add(composition_id)
    if len(unseen) < target:
        raise GeneratorError(
            f"cannot hold out {target} of {vocabulary.n_compositions} compositions while keeping one seen per verb"
        )
    return frozenset(unseen)


# --------------------------------------------------------------------------- #
# Samples
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class _World:
    """Fixed random structure shared by every sample of one dataset."""

    verb_signal: np.ndarray  # (V, latent)
    human_projection: np.ndarray  # (human_dim, latent)
    object_projection: np.ndarray  # (object_dim, latent)
    centroids: np.ndarray  # (O, object_dim)
    offsets: np.ndarray  # (V, 2) object centre relative to the human centre, in human widths
    sizes: np.ndarray  # (V,) object width relative to the human width
    poses: np.ndarray  # (V, k, 2) keypoints relative to the human box


def _make_world(config: GeneratorConfig, rng: np.random.Generator) -> _World:
    latent = config.latent_dim
    return _World(
        verb_signal=rng.normal(size=(config.n_verbs, latent)),
        human_projection=rng.normal(size=(config.human_dim, latent)) / math.sqrt(latent),
        object_projection=rng.normal(size=(config.object_dim, latent)) / math.sqrt(latent),
        centroids=rng.normal(size=(config.n_objects, config.object_dim)),
        offsets=rng.uniform(-1.0, 1.0, size=(config.n_verbs, 2)),
        sizes=rng.uniform(0.2, 0.8, size=config.n_verbs),
        poses=rng.uniform(0.05, 0.95, size=(config.n_verbs, config.n_keypoints, 2)),
    )


@dataclass(frozen=True)
class _Sample:
    verb: int
    obj: int
    detected_obj: int
    human_box: BBox
    object_box: BBox
    pose: Pose2D
    human: tuple[float, ...]
    object: tuple[float, ...]
    det_h: float
    det_o: float


def _layout(world: _World, verb: int, rng: np.random.Generator) -> tuple[BBox, BBox, Pose2D]:
    x0 = rng.uniform(300.0, 500.0)
    y0 = rng.uniform(200.0, 300.0)
    w = rng.uniform(80.0, 160.0)
    h = w * rng.uniform(1.8, 2.4)
    human = BBox(x0, y0, x0 + w, y0 + h)
    centre = np.array([x0 + w / 2, y0 + h / 2]) + (world.offsets[verb] + rng.normal(scale=0.05, size=2)) * w
    size = max(4.0, (world.sizes[verb] + rng.normal(scale=0.03)) * w)
    obj = BBox(centre[0] - size / 2, centre[1] - size / 2, centre[0] + size / 2, centre[1] + size / 2)
    keypoints = world.poses[verb] + rng.normal(scale=0.02, size=world.poses[verb].shape)
    pose = Pose2D(tuple((float(x0 + kx * w), float(y0 + ky * h)) for kx, ky in keypoints))
    return human, obj, pose


def _features(
    world: _World, config: GeneratorConfig, verb: int, obj: int, rng: np.random.Generator
) -> tuple[tuple[float, ...], tuple[float, ...]]:
    signal = world.verb_signal[verb] + rng.normal(scale=0.3, size=config.latent_dim)
    human = world.human_projection @ signal + rng.normal(scale=config.feature_noise, size=config.human_dim)
    # per-instance amplitude: category identity alone cannot rank pairs of one object
    amplitude = rng.uniform(0.5, 1.5) * (1.0 + config.centroid_gain * config.spurious_strength)
    obj_feature = (
        amplitude * world.centroids[obj]
        + config.object_verb_signal * (world.object_projection @ signal)
        + rng.normal(scale=config.feature_noise, size=config.object_dim)
    )
    return tuple(human.tolist()), tuple(obj_feature.tolist())


def _sample(world: _World, config: GeneratorConfig, verb: int, obj: int, rng: np.random.Generator) -> _Sample:
    human_box, object_box, pose = _layout(world, verb, rng)
    human, obj_feature = _features(world, config, verb, obj, rng)
    detected = obj
    if config.n_objects > 1 and rng.random() < config.object_confusion:
        detected = int(rng.choice([o for o in range(config.n_objects) if o != obj]))
    return _Sample(
        verb=verb,
        obj=obj,
        detected_obj=detected,
        human_box=human_box,
        object_box=object_box,
        pose=pose,
        human=human,
        object=obj_feature,
        det_h=float(rng.uniform(0.6, 1.0)),
        det_o=float(rng.uniform(0.6, 1.0)),
    )


def _shift(box: BBox, dx: float) -> BBox:
    return BBox(box.x1 + dx, box.y1, box.x2 + dx, box.y2)


def _jitter(box: BBox, rng: np.random.Generator) -> BBox:
    noise = rng.normal(scale=1.0, size=4)
    return BBox(box.x1 + noise[0], box.y1 + noise[1], box.x2 + noise[2], box.y2 + noise[3])


def _emit(
    samples: list[tuple[Split, _Sample]], vocabulary: Vocabulary, rng: np.random.Generator
) -> tuple[list[PairRecord], list[GtAnnotation], dict[str, Split]]:
    """Group each split's samples into images of 1 to 3 pairs placed side by side."""
    records, gt, splits = [], [], {}
    for split in Split:
        part = [sample for tag, sample in samples if tag is split]
        image, start = 0, 0
        while start < len(part):
            size = int(rng.integers(1, 4))
            image_id = f"{split}_{image:05d}"
            for slot, sample in enumerate(part[start : start + size]):
                dx = slot * IMAGE_SLOT_WIDTH
                hbox, obox = _shift(sample.human_box, dx), _shift(sample.object_box, dx)
                pair_id = f"p{len(records):06d}"
                labels = None
                if split is not Split.UNLABELED:
                    labels = tuple(1.0 if v == sample.verb else 0.0 for v in range(vocabulary.n_verbs))
                records.append(
                    PairRecord(
                        pair_id=pair_id,
                        image_id=image_id,
                        human_box=_jitter(hbox, rng),
                        object_box=_jitter(obox, rng),
                        object_category=sample.detected_obj,
                        det_h=sample.det_h,
                        det_o=sample.det_o,
                        pose=Pose2D(tuple((x + dx, y) for x, y in sample.pose.keypoints)),
                        features={"human": sample.human, "object": sample.object},
                        verb_labels=labels,
                    )
                )
                composition_id = vocabulary.composition_id(sample.verb, sample.obj)
                gt.append(GtAnnotation(image_id, hbox, obox, composition_id))
                splits[pair_id] = split
            image, start = image + 1, start + size
    return records, gt, splits


def generate(config: GeneratorConfig) -> DatasetBundle:
    """Generate a synthetic dataset bundle.

    Train and validation hold the long-tailed labeled samples of seen compositions (split
    ``1 - val_fraction : val_fraction`` per composition), the unlabeled split covers seen
    compositions uniformly, and the test split has ``test_per_composition`` pairs of every
    composition, unseen ones included. The same config always yields the same bundle.
    """
    rng = np.random.default_rng(config.seed)
    vocabulary = make_vocabulary(config, rng)
    counts, _ = training_counts(vocabulary, config, rng)
    unseen = holdout_split(vocabulary, config.unseen_fraction, config.unseen_strategy, config.seed, counts)
    world = _make_world(config, rng)

    seen = [c for c in range(vocabulary.n_compositions) if c not in unseen]
    train_counts = np.zeros(vocabulary.n_compositions, dtype=np.int64)
    plan: dict[Split, list[int]] = {split: [] for split in Split}
    for composition_id in seen:
        count = int(counts[composition_id])
        n_val = min(count - 1, round(count * config.val_fraction))
        train_counts[composition_id] = count - n_val
        plan[Split.TRAIN] += [composition_id] * (count - n_val)
        plan[Split.VAL] += [composition_id] * n_val
    if seen:
        plan[Split.UNLABELED] = rng.choice(seen, size=config.n_unlabeled).tolist()
    plan[Split.TEST] = [c for c in range(vocabulary.n_compositions) for _ in range(config.test_per_composition)]

    samples = []
    for split in Split:
        for composition_id in rng.permutation(plan[split]).tolist():
            verb, obj = vocabulary.compositions[composition_id]
            samples.append((split, _sample(world, config, verb, obj, rng)))

    rare = {c for c in seen if train_counts[c] < config.rare_threshold}
    vocabulary = vocabulary.with_flags(rare=rare, unseen=unseen)
    records, gt, splits = _emit(samples, vocabulary, rng)
    logger.info(
        "Generated %d pairs (%s); %d compositions, %d rare, %d unseen",
        len(records),
        ", ".join(f"{split}={len(plan[split])}" for split in Split),
        vocabulary.n_compositions,
        len(rare),
        len(unseen),
    )
    return DatasetBundle(
        vocabulary=vocabulary, gt_annotations=gt, pair_records=records, splits=splits, n_keypoints=config.n_keypoints
    )


def _closest_gt(record: PairRecord, candidates: list[GtAnnotation]) -> GtAnnotation:
    if not candidates:
        raise GeneratorError(f"pair {record.pair_id} has no ground truth in image {record.image_id}")

    def distance(annotation: GtAnnotation) -> float:
        return abs(annotation.human_box.x1 - record.human_box.x1) + abs(annotation.object_box.x1 - record.object_box.x1)

    return min(candidates, key=distance)


def true_compositions(bundle: DatasetBundle, records: list[PairRecord]) -> list[int]:
    """Ground-truth composition of every record (its nearest GT pair in the same image)."""
    gt_by_image: dict[str, list[GtAnnotation]] = {}
    for annotation in bundle.gt_annotations:
        gt_by_image.setdefault(annotation.image_id, []).append(annotation)
    return [_closest_gt(r, gt_by_image.get(r.image_id, [])).composition_id for r in records]


def true_labels(bundle: DatasetBundle, records: list[PairRecord]) -> dict[str, tuple[float, ...]]:
    """One-hot verb labels recovered from the ground truth, also for unlabeled pairs."""
    n_verbs = bundle.vocabulary.n_verbs
    labels = {}
    for record, composition_id in zip(records, true_compositions(bundle, records), strict=True):
        verb = bundle.vocabulary.verb_of(composition_id)
        labels[record.pair_id] = tuple(1.0 if v == verb else 0.0 for v in range(n_verbs))
    return labels


def mutual_information(bundle: DatasetBundle, split: Split = Split.TRAIN) -> float:
    """Mutual information (nats) between the true object category and the verb of a split's pairs."""
    records = bundle.records(split)
    if not records:
        raise GeneratorError(f"split {split} is empty")
    pairs = [bundle.vocabulary.compositions[c] for c in true_compositions(bundle, records)]
    return float(mutual_info_score([o for _, o in pairs], [v for v, _ in pairs]))


def composition_counts(bundle: DatasetBundle, split: Split = Split.TRAIN) -> dict[int, int]:
    """Number of pairs of every composition in ``split``."""
    records = bundle.records(split)
    counts = Counter(true_compositions(bundle, records))
    return {c: counts.get(c, 0) for c in range(bundle.vocabulary.n_compositions)}
