"""Domain types, vocabulary, box geometry and dataset validation."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any


class HoiGenError(Exception):
    """Base exception for hoigen errors."""

    pass


class ValidationError(HoiGenError):
    """Raised when a value or record violates a domain invariant."""

    pass


class FormatError(HoiGenError):
    """Raised when an artifact file cannot be read or is malformed."""

    pass


class NumericError(HoiGenError):
    """Raised when NaN or infinite values are detected."""

    pass


class Split(StrEnum):
    """Dataset split a pair record belongs to."""

    TRAIN = "train"
    VAL = "val"
    UNLABELED = "unlabeled"
    TEST = "test"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in corner format (pixels)."""

    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def from_list(cls, values: Sequence[float]) -> BBox:
        """Build a box from ``[x1, y1, x2, y2]`` without validating it."""
        if len(values) != 4:
            raise ValidationError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def violations(self) -> list[str]:
        """List every invariant this box breaks (empty when valid)."""
        problems = []
        if not all(math.isfinite(v) for v in self.to_list()):
            problems.append(f"non-finite coordinates {self.to_list()}")
            return problems
        if self.x1 >= self.x2:
            problems.append(f"x1={self.x1} >= x2={self.x2}")
        if self.y1 >= self.y2:
            problems.append(f"y1={self.y1} >= y2={self.y2}")
        return problems

    def validate(self) -> BBox:
        """Return the box itself, raising ValidationError if it is degenerate or non-finite."""
        problems = self.violations()
        if problems:
            raise ValidationError(f"invalid box: {'; '.join(problems)}")
        return self

    def union(self, other: BBox) -> BBox:
        """Tight box containing both boxes."""
        return BBox(min(self.x1, other.x1), min(self.y1, other.y1), max(self.x2, other.x2), max(self.y2, other.y2))


@dataclass(frozen=True)
class Pose2D:
    """2D human pose: k keypoints in pixels."""

    keypoints: tuple[tuple[float, float], ...]

    @classmethod
    def from_list(cls, values: Sequence[Sequence[float]]) -> Pose2D:
        points = []
        for point in values:
            if len(point) != 2:
                raise ValidationError(f"keypoint needs 2 coordinates, got {list(point)}")
            points.append((float(point[0]), float(point[1])))
        return cls(tuple(points))

    def to_list(self) -> list[list[float]]:
        return [[x, y] for x, y in self.keypoints]

    def __len__(self) -> int:
        return len(self.keypoints)

    def violations(self, n_keypoints: int | None = None) -> list[str]:
        problems = []
        if n_keypoints is not None and len(self.keypoints) != n_keypoints:
            problems.append(f"expected {n_keypoints} keypoints, got {len(self.keypoints)}")
        if not all(math.isfinite(c) for point in self.keypoints for c in point):
            problems.append("non-finite keypoint coordinates")
        return problems


@dataclass(frozen=True)
class PairRecord:
    """One human-object candidate pair.

    Attributes:
        pair_id: Unique pair identifier, also the key of feature files.
        image_id: Image the pair was detected in.
        human_box: Human box.
        object_box: Object box.
        pose: Optional 2D pose of the human.
        object_category: Detected object category id.
        det_h: Human detector confidence in [0, 1].
        det_o: Object detector confidence in [0, 1].
        features: Stream name to feature vector.
        verb_labels: Binary label per verb, None for unlabeled pairs.
    """

    pair_id: str
    image_id: str
    human_box: BBox
    object_box: BBox
    object_category: int
    det_h: float = 1.0
    det_o: float = 1.0
    pose: Pose2D | None = None
    features: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    verb_labels: tuple[float, ...] | None = None

    @property
    def labeled(self) -> bool:
        return self.verb_labels is not None


@dataclass(frozen=True)
class GtAnnotation:
    """Ground-truth HOI instance."""

    image_id: str
    human_box: BBox
    object_box: BBox
    composition_id: int


@dataclass(frozen=True)
class Detection:
    """Scored HOI detection."""

    image_id: str
    human_box: BBox
    object_box: BBox
    composition_id: int
    score: float


@dataclass(frozen=True)
class Vocabulary:
    """Verbs, object categories and the legal composition set.

    Composition ids are indices into ``compositions``. ``rare`` and ``unseen`` hold the
    composition ids flagged rare and held out for zero-shot evaluation.
    """

    verbs: tuple[str, ...]
    objects: tuple[str, ...]
    compositions: tuple[tuple[int, int], ...]
    rare: frozenset[int] = frozenset()
    unseen: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        problems = self.violations()
        if problems:
            raise ValidationError(f"invalid vocabulary: {'; '.join(problems)}")

    def violations(self) -> list[str]:
        problems = []
        if len(set(self.verbs)) != len(self.verbs):
            problems.append("duplicate verb names")
        if len(set(self.objects)) != len(self.objects):
            problems.append("duplicate object names")
        if len(set(self.compositions)) != len(self.compositions):
            problems.append("duplicate compositions")
        for index, (verb_id, object_id) in enumerate(self.compositions):
            if not 0 <= verb_id < len(self.verbs):
                problems.append(f"composition {index} references unknown verb {verb_id}")
            if not 0 <= object_id < len(self.objects):
                problems.append(f"composition {index} references unknown object {object_id}")
        for name, flags in (("rare", self.rare), ("unseen", self.unseen)):
            unknown = sorted(c for c in flags if not 0 <= c < len(self.compositions))
            if unknown:
                problems.append(f"{name} flags reference unknown compositions {unknown}")
        return problems

    @property
    def n_verbs(self) -> int:
        return len(self.verbs)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_compositions(self) -> int:
        return len(self.compositions)

    def has_composition(self, composition_id: int) -> bool:
        return 0 <= composition_id < len(self.compositions)

    def composition_id(self, verb_id: int, object_id: int) -> int | None:
        """Id of the composition (verb, object), None when it is not legal."""
        return self._index.get((verb_id, object_id))

    @property
    def _index(self) -> dict[tuple[int, int], int]:
        # frozen dataclass: cache through object.__setattr__
        cached = self.__dict__.get("_composition_index")
        if cached is None:
            cached = {pair: index for index, pair in enumerate(self.compositions)}
            object.__setattr__(self, "_composition_index", cached)
        return cached

    def verb_of(self, composition_id: int) -> int:
        return self.compositions[composition_id][0]

    def object_of(self, composition_id: int) -> int:
        return self.compositions[composition_id][1]

    def objects_for_verb(self, verb_id: int) -> list[int]:
        """O_v: object categories available for ``verb_id``, in composition order."""
        return [o for v, o in self.compositions if v == verb_id]

    def verbs_for_object(self, object_id: int) -> list[int]:
        return [v for v, o in self.compositions if o == object_id]

    def compositions_of_verb(self, verb_id: int) -> list[int]:
        return [index for index, (v, _) in enumerate(self.compositions) if v == verb_id]

    def with_flags(self, rare: Iterable[int] | None = None, unseen: Iterable[int] | None = None) -> Vocabulary:
        """Copy of the vocabulary with replaced rare and/or unseen flags."""
        return Vocabulary(
            verbs=self.verbs,
            objects=self.objects,
            compositions=self.compositions,
            rare=frozenset(self.rare if rare is None else rare),
            unseen=frozenset(self.unseen if unseen is None else unseen),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "verbs": list(self.verbs),
            "objects": list(self.objects),
            "compositions": [[v, o] for v, o in self.compositions],
            "rare": sorted(self.rare),
            "unseen": sorted(self.unseen),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Vocabulary:
        missing = [key for key in ("verbs", "objects", "compositions") if key not in data]
        if missing:
            raise ValidationError(f"vocabulary is missing fields {missing}")
        compositions = []
        for entry in data["compositions"]:
            if len(entry) != 2:
                raise ValidationError(f"composition must be [verb_id, object_id], got {entry}")
            compositions.append((int(entry[0]), int(entry[1])))
        return cls(
            verbs=tuple(str(v) for v in data["verbs"]),
            objects=tuple(str(o) for o in data["objects"]),
            compositions=tuple(compositions),
            rare=frozenset(int(c) for c in data.get("rare", [])),
            unseen=frozenset(int(c) for c in data.get("unseen", [])),
        )


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two valid boxes.

    Raises:
        ValidationError: If either box is degenerate or non-finite.
    """
    a.validate()
    b.validate()
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class ValidationIssue:
    """One invariant violation found by validate_dataset."""

    index: int
    field: str
    message: str

    def __str__(self) -> str:
        return f"record {self.index}: {self.field}: {self.message}"


def _check_confidence(value: float) -> str | None:
    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        return f"{value} is not in [0, 1]"
    return None


def _record_issues(  # noqa: C901
    record: PairRecord | GtAnnotation | Detection,
    vocabulary: Vocabulary,
    feature_dims: Mapping[str, int] | None,
    n_keypoints: int | None,
) -> list[tuple[str, str]]:
    issues: list[tuple[str, str]] = []
    for name in ("human_box", "object_box"):
        for problem in getattr(record, name).violations():
            issues.append((name, problem))

    match record:
        case PairRecord():
            if not 0 <= record.object_category < vocabulary.n_objects:
                issues.append(("object_category", f"unknown object category {record.object_category}"))
            for name in ("det_h", "det_o"):
                problem = _check_confidence(getattr(record, name))
                if problem:
                    issues.append((name, problem))
            if record.pose is not None:
                for problem in record.pose.violations(n_keypoints):
                    issues.append(("pose", problem))
            if record.verb_labels is not None:
                if len(record.verb_labels) != vocabulary.n_verbs:
                    issues.append(
                        ("verb_labels", f"length {len(record.verb_labels)} != {vocabulary.n_verbs} verbs")
                    )
                if not all(0.0 <= y <= 1.0 for y in record.verb_labels):
                    issues.append(("verb_labels", "labels outside [0, 1]"))
            for stream, vector in record.features.items():
                if feature_dims is not None and stream in feature_dims and len(vector) != feature_dims[stream]:
                    expected = feature_dims[stream]
                    issues.append(("features", f"stream {stream} has dim {len(vector)}, expected {expected}"))
                if not all(math.isfinite(v) for v in vector):
                    issues.append(("features", f"stream {stream} has non-finite entries"))
        case GtAnnotation() | Detection():
            if not vocabulary.has_composition(record.composition_id):
                issues.append(("composition_id", f"composition {record.composition_id} not in vocabulary"))
            if isinstance(record, Detection) and (not math.isfinite(record.score) or record.score <= 0):
                issues.append(("score", f"score {record.score} must be finite and positive"))
    return issues


def validate_dataset(
    records: Iterable[PairRecord | GtAnnotation | Detection],
    vocabulary: Vocabulary,
    feature_dims: Mapping[str, int] | None = None,
    n_keypoints: int | None = None,
) -> list[ValidationIssue]:
    """Check every record against the domain invariants.

    Args:
        records: Pair records, ground-truth annotations and/or detections.
        vocabulary: Vocabulary the records refer to.
        feature_dims: Expected feature dimension per stream, unchecked when None.
        n_keypoints: Expected keypoint count per pose, unchecked when None.

    Returns:
        list[ValidationIssue]: Every violation with its record index. Empty iff the dataset is valid.
    """
    report = []
    for index, record in enumerate(records):
        for field_name, message in _record_issues(record, vocabulary, feature_dims, n_keypoints):
            report.append(ValidationIssue(index, field_name, message))
    return report
