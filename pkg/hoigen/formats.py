"""Readers and writers for every on-disk artifact.

All record files are JSON-lines (one object per line, blank lines ignored). Feature files
may also be numpy ``.npz`` archives. Reports are deterministic JSON.
"""

from __future__ import annotations

import json
import logging
import math
import pathlib
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Any, TypeVar

import numpy as np
import torch
from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

from .core import (
    BBox,
    Detection,
    FormatError,
    GtAnnotation,
    NumericError,
    PairRecord,
    Pose2D,
    Split,
    ValidationError,
    Vocabulary,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")

REPORT_DECIMALS = 6


class ParseError(FormatError):
    """Raised when a line of an artifact file cannot be parsed.

    Attributes:
        path: File being parsed.
        line: 1-based line number, 0 when the error is not tied to a line.
    """

    def __init__(self, path: str | pathlib.Path, line: int, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line else self.path
        super().__init__(f"{where}: {message}")


class InvalidRecordError(ParseError, ValidationError):
    """Raised when a well-formed line holds a record that violates a domain invariant."""

    pass


@dataclass
class DatasetBundle:
    """Everything a run needs: vocabulary, ground truth, pair records and split tags.

    Attributes:
        vocabulary: Verb/object vocabulary.
        gt_annotations: Ground-truth HOI instances used for evaluation.
        pair_records: Candidate human-object pairs with features and (optional) labels.
        splits: Split tag for every pair_id.
        n_keypoints: Keypoints per pose.
    """

    vocabulary: Vocabulary
    gt_annotations: list[GtAnnotation]
    pair_records: list[PairRecord]
    splits: dict[str, Split] = field(default_factory=dict)
    n_keypoints: int = 0

    def __post_init__(self) -> None:
        ids = [r.pair_id for r in self.pair_records]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate pair ids in bundle")
        if set(ids) != set(self.splits):
            raise ValidationError("split tags must cover exactly the pair records")
        for record in self.pair_records:
            if self.splits[record.pair_id] is Split.UNLABELED and record.labeled:
                raise ValidationError(f"unlabeled pair {record.pair_id} carries verb labels")

    def records(self, split: Split) -> list[PairRecord]:
        return [r for r in self.pair_records if self.splits[r.pair_id] is split]

    def split_of(self, record: PairRecord) -> Split:
        return self.splits[record.pair_id]

    def gt_for(self, records: Sequence[PairRecord]) -> list[GtAnnotation]:
        """Ground-truth annotations that belong to the images of ``records``."""
        images = {r.image_id for r in records}
        return [g for g in self.gt_annotations if g.image_id in images]


def labels_matrix(records: Sequence[PairRecord], n_verbs: int) -> torch.Tensor:
    """Stack verb labels into an (n, |V|) float64 tensor."""
    if not records:
        return torch.zeros((0, n_verbs), dtype=torch.float64)
    missing = [r.pair_id for r in records if r.verb_labels is None]
    if missing:
        raise ValidationError(f"pairs without labels: {missing[:5]}")
    return torch.tensor([r.verb_labels for r in records], dtype=torch.float64)


def features_matrix(records: Sequence[PairRecord], stream: str, dim: int | None = None) -> torch.Tensor:
    """Stack one stream's feature vectors into an (n, d) float64 tensor."""
    if not records:
        return torch.zeros((0, dim or 0), dtype=torch.float64)
    missing = [r.pair_id for r in records if stream not in r.features]
    if missing:
        raise ValidationError(f"pairs without {stream} features: {missing[:5]}")
    return torch.tensor([r.features[stream] for r in records], dtype=torch.float64)


# --------------------------------------------------------------------------- #
# JSON-lines plumbing
# --------------------------------------------------------------------------- #


def _read_lines(path: str | pathlib.Path) -> Iterator[tuple[int, dict[str, Any]]]:
    path = pathlib.Path(path)
    try:
        handle = path.open("r", encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot open {path}: {e}") from e
    with handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, number, f"malformed JSON: {e.msg}") from e
            if not isinstance(row, dict):
                raise ParseError(path, number, "expected a JSON object")
            yield number, row


def _parse_file(path: str | pathlib.Path, parse_row: Callable[[dict[str, Any]], T]) -> list[T]:
    items = []
    for number, row in _read_lines(path):
        try:
            items.append(parse_row(row))
        except ParseError:
            raise
        except ValidationError as e:
            raise InvalidRecordError(path, number, str(e)) from e
        except (KeyError, TypeError, ValueError) as e:
            detail = f"missing field {e}" if isinstance(e, KeyError) else str(e)
            raise ParseError(path, number, detail) from e
    return items


def _write_lines(rows: Iterator[dict[str, Any]] | Sequence[dict[str, Any]], path: str | pathlib.Path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as out:
        for row in rows:
            out.write(json.dumps(row, sort_keys=True, allow_nan=False) + "\n")


def _finite_vector(values: Sequence[float], what: str) -> tuple[float, ...]:
    vector = tuple(float(v) for v in values)
    if not all(math.isfinite(v) for v in vector):
        raise ValueError(f"{what} has non-finite entries")
    return vector


# --------------------------------------------------------------------------- #
# Vocabulary
# --------------------------------------------------------------------------- #


def load_vocabulary(path: str | pathlib.Path) -> Vocabulary:
    """Read a vocabulary JSON file (fields ``verbs``, ``objects``, ``compositions``, ``rare``, ``unseen``)."""
    path = pathlib.Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot open {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, f"malformed JSON: {e.msg}") from e
    try:
        return Vocabulary.from_dict(data)
    except (TypeError, ValueError) as e:
        raise ParseError(path, 0, str(e)) from e


def emit_vocabulary(vocabulary: Vocabulary, path: str | pathlib.Path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(vocabulary.to_dict(), indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- #
# Ground truth and detections
# --------------------------------------------------------------------------- #


def _check_composition(composition_id: int, vocabulary: Vocabulary | None) -> int:
    if vocabulary is not None and not vocabulary.has_composition(composition_id):
        raise ValidationError(f"unknown composition {composition_id}")
    return composition_id


def parse_gt(path: str | pathlib.Path, vocabulary: Vocabulary | None = None) -> list[GtAnnotation]:
    """Read ground-truth annotations ``{"image_id", "hbox", "obox", "hoi"}``."""

    def parse_row(row: dict[str, Any]) -> GtAnnotation:
        return GtAnnotation(
            image_id=str(row["image_id"]),
            human_box=BBox.from_list(row["hbox"]).validate(),
            object_box=BBox.from_list(row["obox"]).validate(),
            composition_id=_check_composition(int(row["hoi"]), vocabulary),
        )

    return _parse_file(path, parse_row)


def parse_detections(path: str | pathlib.Path, vocabulary: Vocabulary | None = None) -> list[Detection]:
    """Read detections ``{"image_id", "hbox", "obox", "hoi", "score"}`` in file order.

    Raises:
        ParseError: On a malformed line. The error carries the line number.
        InvalidRecordError: On a non-positive or non-finite score, a degenerate box or an unknown
            composition, also carrying the line number.
    """

    def parse_row(row: dict[str, Any]) -> Detection:
        score = float(row["score"])
        if not math.isfinite(score) or score <= 0:
            raise ValidationError(f"score {score} must be finite and positive")
        return Detection(
            image_id=str(row["image_id"]),
            human_box=BBox.from_list(row["hbox"]).validate(),
            object_box=BBox.from_list(row["obox"]).validate(),
            composition_id=_check_composition(int(row["hoi"]), vocabulary),
            score=score,
        )

    return _parse_file(path, parse_row)


def _gt_row(annotation: GtAnnotation) -> dict[str, Any]:
    return {
        "image_id": annotation.image_id,
        "hbox": annotation.human_box.to_list(),
        "obox": annotation.object_box.to_list(),
        "hoi": annotation.composition_id,
    }


def emit_gt(annotations: Sequence[GtAnnotation], path: str | pathlib.Path) -> None:
    _write_lines([_gt_row(a) for a in annotations], path)


def emit_detections(detections: Sequence[Detection], path: str | pathlib.Path) -> None:
    _write_lines(
        [
            {
                "image_id": d.image_id,
                "hbox": d.human_box.to_list(),
                "obox": d.object_box.to_list(),
                "hoi": d.composition_id,
                "score": d.score,
            }
            for d in detections
        ],
        path,
    )


# --------------------------------------------------------------------------- #
# Features
# --------------------------------------------------------------------------- #


def parse_features(
    path: str | pathlib.Path, expected_dim: int | None = None, stream: str | None = None
) -> dict[str, tuple[float, ...]]:
    """Read feature vectors keyed by pair_id.

    JSON-lines files hold ``{"pair_id", "stream", "vec"}`` rows; ``.npz`` archives hold arrays
    ``pair_id`` and ``vec`` (and optionally ``stream``).

    Args:
        path: Feature file.
        expected_dim: Required vector length, unchecked when None.
        stream: Only keep rows of this stream when given.

    Raises:
        ParseError: On NaN/inf entries or a malformed line.
        InvalidRecordError: On a dimension mismatch, naming the pair_id.
    """
    path = pathlib.Path(path)
    if path.suffix == ".npz":
        return _parse_npz_features(path, expected_dim, stream)

    features: dict[str, tuple[float, ...]] = {}
    for number, row in _read_lines(path):
        if stream is not None and row.get("stream") != stream:
            continue
        _, pair_id, vector = _feature_row(path, number, row)
        if expected_dim is not None and len(vector) != expected_dim:
            raise InvalidRecordError(path, number, f"pair {pair_id} has dim {len(vector)}, expected {expected_dim}")
        features[pair_id] = vector
    return features


def parse_stream_features(path: str | pathlib.Path) -> dict[str, dict[str, tuple[float, ...]]]:
    """Read a JSON-lines feature file holding every stream, as stream -> pair_id -> vector.

    Raises:
        ParseError: On a malformed line, a missing ``stream`` field or NaN/inf entries.
        InvalidRecordError: When a vector's length differs from the first vector of its stream.
    """
    features: dict[str, dict[str, tuple[float, ...]]] = {}
    dims: dict[str, int] = {}
    for number, row in _read_lines(path):
        stream, pair_id, vector = _feature_row(path, number, row, require_stream=True)
        expected = dims.setdefault(stream, len(vector))
        if len(vector) != expected:
            raise InvalidRecordError(
                path, number, f"pair {pair_id} has {stream} dim {len(vector)}, expected {expected}"
            )
        features.setdefault(stream, {})[pair_id] = vector
    return features


def _feature_row(
    path: str | pathlib.Path, number: int, row: dict[str, Any], require_stream: bool = False
) -> tuple[str | None, str, tuple[float, ...]]:
    try:
        stream = str(row["stream"]) if require_stream else row.get("stream")
        pair_id = str(row["pair_id"])
        vector = _finite_vector(row["vec"], f"pair {pair_id}")
    except KeyError as e:
        raise ParseError(path, number, f"missing field {e}") from e
    except (TypeError, ValueError) as e:
        raise ParseError(path, number, str(e)) from e
    return stream, pair_id, vector


def _parse_npz_features(
    path: pathlib.Path, expected_dim: int | None, stream: str | None
) -> dict[str, tuple[float, ...]]:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot open {path}: {e}") from e
    with archive:
        pair_ids = archive["pair_id"]
        vectors = np.asarray(archive["vec"], dtype=np.float64)
        streams = archive["stream"] if "stream" in archive.files else None
    if vectors.ndim != 2 or len(vectors) != len(pair_ids):
        raise ParseError(path, 0, "vec must be a 2-D array with one row per pair_id")
    features = {}
    for index, (pair_id, vector) in enumerate(zip(pair_ids, vectors, strict=True)):
        if stream is not None and streams is not None and str(streams[index]) != stream:
            continue
        if expected_dim is not None and vector.shape[0] != expected_dim:
            raise InvalidRecordError(path, 0, f"pair {pair_id} has dim {vector.shape[0]}, expected {expected_dim}")
        if not np.all(np.isfinite(vector)):
            raise ParseError(path, 0, f"pair {pair_id} has non-finite entries")
        features[str(pair_id)] = tuple(float(v) for v in vector)
    return features


def emit_features(records: Sequence[PairRecord], path: str | pathlib.Path) -> None:
    """Write every stream feature of ``records`` as JSON-lines, streams in sorted order."""
    _write_lines(
        [
            {"pair_id": r.pair_id, "stream": stream, "vec": list(r.features[stream])}
            for r in records
            for stream in sorted(r.features)
        ],
        path,
    )


# --------------------------------------------------------------------------- #
# Pair records and splits
# --------------------------------------------------------------------------- #


def _pair_row(record: PairRecord) -> dict[str, Any]:
    return {
        "pair_id": record.pair_id,
        "image_id": record.image_id,
        "hbox": record.human_box.to_list(),
        "obox": record.object_box.to_list(),
        "pose": record.pose.to_list() if record.pose is not None else None,
        "obj": record.object_category,
        "det_h": record.det_h,
        "det_o": record.det_o,
        "verbs": list(record.verb_labels) if record.verb_labels is not None else None,
    }


def parse_pairs(path: str | pathlib.Path, vocabulary: Vocabulary | None = None) -> list[PairRecord]:
    """Read pair records (without features; see attach_features)."""

    def parse_row(row: dict[str, Any]) -> PairRecord:
        object_category = int(row["obj"])
        if vocabulary is not None and not 0 <= object_category < vocabulary.n_objects:
            raise ValidationError(f"unknown object category {object_category}")
        verbs = row.get("verbs")
        labels = _finite_vector(verbs, "verbs") if verbs is not None else None
        if labels is not None and vocabulary is not None and len(labels) != vocabulary.n_verbs:
            raise ValidationError(f"verbs has length {len(labels)}, expected {vocabulary.n_verbs}")
        det_h, det_o = float(row.get("det_h", 1.0)), float(row.get("det_o", 1.0))
        for name, value in (("det_h", det_h), ("det_o", det_o)):
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name}={value} not in [0, 1]")
        pose = row.get("pose")
        return PairRecord(
            pair_id=str(row["pair_id"]),
            image_id=str(row["image_id"]),
            human_box=BBox.from_list(row["hbox"]).validate(),
            object_box=BBox.from_list(row["obox"]).validate(),
            object_category=object_category,
            det_h=det_h,
            det_o=det_o,
            pose=Pose2D.from_list(pose) if pose is not None else None,
            verb_labels=labels,
        )

    return _parse_file(path, parse_row)


def emit_pairs(records: Sequence[PairRecord], path: str | pathlib.Path) -> None:
    _write_lines([_pair_row(r) for r in records], path)


def parse_splits(path: str | pathlib.Path) -> dict[str, Split]:
    def parse_row(row: dict[str, Any]) -> tuple[str, Split]:
        return str(row["pair_id"]), Split(row["split"])

    return dict(_parse_file(path, parse_row))


def emit_splits(splits: Mapping[str, Split], path: str | pathlib.Path) -> None:
    _write_lines([{"pair_id": pair_id, "split": str(split)} for pair_id, split in splits.items()], path)


def attach_features(
    records: Sequence[PairRecord], features: Mapping[str, Mapping[str, tuple[float, ...]]]
) -> list[PairRecord]:
    """Return copies of ``records`` with ``features[stream][pair_id]`` attached for every stream."""
    attached = []
    for record in records:
        vectors = dict(record.features)
        for stream, by_pair in features.items():
            if record.pair_id in by_pair:
                vectors[stream] = by_pair[record.pair_id]
        attached.append(replace(record, features=vectors))
    return attached


BUNDLE_FILES = {
    "vocabulary": "vocab.json",
    "pairs": "pairs.jsonl",
    "features": "features.jsonl",
    "gt": "gt.jsonl",
    "splits": "splits.jsonl",
    "meta": "meta.json",
}


def emit_bundle(bundle: DatasetBundle, out_dir: str | pathlib.Path) -> dict[str, pathlib.Path]:
    """Write a bundle as vocabulary, pairs, features, GT and split files.

    Returns:
        dict[str, pathlib.Path]: Path of every written file keyed by artifact name.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / filename for name, filename in BUNDLE_FILES.items()}
    emit_vocabulary(bundle.vocabulary, paths["vocabulary"])
    emit_pairs(bundle.pair_records, paths["pairs"])
    emit_features(bundle.pair_records, paths["features"])
    emit_gt(bundle.gt_annotations, paths["gt"])
    emit_splits(bundle.splits, paths["splits"])
    paths["meta"].write_text(json.dumps({"n_keypoints": bundle.n_keypoints}) + "\n", encoding="utf-8")
    logger.info(
        "Wrote %d pairs and %d GT annotations to %s", len(bundle.pair_records), len(bundle.gt_annotations), out_dir
    )
    return paths


def load_bundle(data_dir: str | pathlib.Path) -> DatasetBundle:
    """Read a bundle written by emit_bundle.

    Raises:
        FormatError: When a file is missing, unreadable or malformed.
        ValidationError: When a record violates a domain invariant.
    """
    data_dir = pathlib.Path(data_dir)
    vocabulary = load_vocabulary(data_dir / BUNDLE_FILES["vocabulary"])
    records = parse_pairs(data_dir / BUNDLE_FILES["pairs"], vocabulary)
    features = parse_stream_features(data_dir / BUNDLE_FILES["features"])
    meta_path = data_dir / BUNDLE_FILES["meta"]
    n_keypoints = _read_n_keypoints(meta_path) if meta_path.exists() else 0
    return DatasetBundle(
        vocabulary=vocabulary,
        gt_annotations=parse_gt(data_dir / BUNDLE_FILES["gt"], vocabulary),
        pair_records=attach_features(records, features),
        splits=parse_splits(data_dir / BUNDLE_FILES["splits"]),
        n_keypoints=n_keypoints,
    )


def _read_n_keypoints(path: pathlib.Path) -> int:
    meta = read_json(path)
    try:
        n_keypoints = meta["n_keypoints"]
    except (KeyError, TypeError) as e:
        raise ParseError(path, 0, "expected an object with n_keypoints") from e
    if not isinstance(n_keypoints, int) or isinstance(n_keypoints, bool) or n_keypoints < 0:
        raise InvalidRecordError(path, 0, f"n_keypoints must be a non-negative integer, got {n_keypoints!r}")
    return n_keypoints


# --------------------------------------------------------------------------- #
# Stream outputs, labels, verdicts
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ScoreRow:
    """One stream's output for one pair, as stored in score files."""

    pair_id: str
    stream: str
    s: tuple[float, ...]
    e: tuple[float, ...]


def parse_stream_outputs(path: str | pathlib.Path) -> list[ScoreRow]:
    def parse_row(row: dict[str, Any]) -> ScoreRow:
        s = _finite_vector(row["s"], "s")
        e = _finite_vector(row["e"], "e")
        if len(s) != len(e):
            raise ValueError(f"s has length {len(s)} but e has length {len(e)}")
        return ScoreRow(pair_id=str(row["pair_id"]), stream=str(row["stream"]), s=s, e=e)

    return _parse_file(path, parse_row)


def emit_stream_outputs(rows: Sequence[ScoreRow], path: str | pathlib.Path) -> None:
    _write_lines([{"pair_id": r.pair_id, "stream": r.stream, "s": list(r.s), "e": list(r.e)} for r in rows], path)


@dataclass(frozen=True)
class LabelRow:
    """Verb labels (and optional detector confidences / split) of one pair."""

    pair_id: str
    verbs: tuple[float, ...]
    det_h: float = 1.0
    det_o: float = 1.0
    split: Split | None = None


def parse_labels(path: str | pathlib.Path) -> list[LabelRow]:
    """Read ``{"pair_id", "verbs"}`` rows; pair files are accepted too (extra fields are read when present)."""

    def parse_row(row: dict[str, Any]) -> LabelRow:
        return LabelRow(
            pair_id=str(row["pair_id"]),
            verbs=_finite_vector(row["verbs"], "verbs"),
            det_h=float(row.get("det_h", 1.0)),
            det_o=float(row.get("det_o", 1.0)),
            split=Split(row["split"]) if row.get("split") is not None else None,
        )

    return _parse_file(path, parse_row)


def emit_labels(rows: Sequence[LabelRow], path: str | pathlib.Path) -> None:
    _write_lines(
        [
            {"pair_id": r.pair_id, "verbs": list(r.verbs), "det_h": r.det_h, "det_o": r.det_o}
            | ({"split": str(r.split)} if r.split is not None else {})
            for r in rows
        ],
        path,
    )


def emit_verdicts(rows: Sequence[Mapping[str, Any]], path: str | pathlib.Path) -> None:
    """Write a pseudo-label verdict report (``pair_id, verb, verdict, sigma_s, var, loss`` rows)."""
    _write_lines(rows, path)


def parse_verdicts(path: str | pathlib.Path) -> list[dict[str, Any]]:
    def parse_row(row: dict[str, Any]) -> dict[str, Any]:
        for key in ("pair_id", "verb", "verdict", "sigma_s", "var", "loss"):
            if key not in row:
                raise KeyError(key)
        return row

    return _parse_file(path, parse_row)


# --------------------------------------------------------------------------- #
# Reports and configs
# --------------------------------------------------------------------------- #


def _rounded(value: Any) -> Any:
    match value:
        case bool() | None | str() | int():
            return value
        case float():
            if not math.isfinite(value):
                raise NumericError(f"non-finite value {value} in report")
            rounded = round(value, REPORT_DECIMALS)
            return 0.0 if rounded == 0 else rounded
        case torch.Tensor() | np.ndarray():
            return _rounded(value.tolist())
        case np.generic():
            return _rounded(value.item())
        case Mapping():
            return {str(k): _rounded(v) for k, v in value.items()}
        case list() | tuple():
            return [_rounded(v) for v in value]
    raise FormatError(f"cannot serialise {type(value).__name__} in report")


def dumps_report(metrics: Mapping[str, Any]) -> str:
    """Serialise a report deterministically: sorted keys, floats rounded to 6 decimals."""
    return json.dumps(_rounded(metrics), sort_keys=True, indent=2, allow_nan=False) + "\n"


def emit_report(metrics: Mapping[str, Any], path: str | pathlib.Path) -> None:
    """Write ``metrics`` as deterministic JSON; the same input always yields identical bytes."""
    path = pathlib.Path(path)
    text = dumps_report(metrics)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot write report to {path}: {e}") from e


def write_json(data: Mapping[str, Any], path: str | pathlib.Path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def read_json(path: str | pathlib.Path) -> dict[str, Any]:
    path = pathlib.Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot open {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, f"malformed JSON: {e.msg}") from e


def load_config_file(path: str | pathlib.Path) -> dict[str, Any]:
    """Read a YAML (or JSON) config file into plain Python containers."""
    path = pathlib.Path(path)
    yaml = YAML(typ="safe", pure=True)
    try:
        with path.open("r", encoding="utf-8") as f:
            data = yaml.load(f)
    except OSError as e:
        raise FormatError(f"cannot open {path}: {e}") from e
    except YAMLError as e:
        raise ParseError(path, 0, f"malformed config: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ParseError(path, 0, "config must be a mapping")
    return data
