"""End-to-end experiment: data, three streams, pseudo labels, calibration and evaluation."""

from __future__ import annotations

import logging
import pathlib
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any

import torch

from .benchmark import GeneratorConfig, GeneratorError, generate, mutual_information, true_labels
from .calibration import (
    STREAMS,
    Agreement,
    CalibratedPrediction,
    CalibrationParams,
    emit_calibration,
    fit_calibration,
    predict,
    uncalibrated_fusion,
)
from .config import ConfigBase
from .core import Detection, HoiGenError, PairRecord, Split, ValidationError, Vocabulary
from .formats import (
    DatasetBundle,
    ScoreRow,
    emit_detections,
    emit_stream_outputs,
    emit_verdicts,
    labels_matrix,
    load_bundle,
)
from .metrics import EvalMode, MetricsError, Subset, compute_map, compute_mpd, evaluate, summarize
from .models.mlp import StreamNet, StreamOutput, forward
from .models.streams import VerbStream, make_stream, train_stream
from .oc_immune import (
    OcImmuneCheckpoint,
    ObjectPool,
    build_similarity,
    fit_oc_immune,
    infer_object_stream,
    synthesize_epoch,
    train_object_verb_stream,
)
from .uncertainty import pseudo_label, pseudo_label_quality, train_uncertainty_guided, verdict_counts

logger = logging.getLogger(__name__)


class StageError(HoiGenError):
    """Raised when a pipeline stage fails; the original error is chained as ``__cause__``.

    Attributes:
        stage: Name of the failing stage.
    """

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage} failed: {message}")


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info("Stage %s", name)
    try:
        yield
    except StageError:
        raise
    except (HoiGenError, OSError) as e:
        raise StageError(name, str(e)) from e


@dataclass(frozen=True)
class ExperimentConfig(ConfigBase):
    """Experiment toggles and hyperparameters.

    Attributes:
        data_dir: Bundle directory to load; a synthetic bundle is generated when None.
        out_dir: Directory for intermediate artifacts (scores, calibration, verdicts,
            detections); nothing is written when None.
        oil: Train the object stream with the object-category immune stages.
        uqm: Give every stream an uncertainty head (off: BCE-trained logits only).
        cui: Calibration-aware unified inference (off: uniform fusion of plain sigmoids).
        extra_data: Use the unlabeled split in uncertainty-guided training (needs uqm).
        compare: Also run the same experiment with oil off and report both.
        agreement: Agreement term used during calibration.
    """

    data_dir: str | None = None
    out_dir: str | None = None
    oil: bool = True
    uqm: bool = True
    cui: bool = True
    extra_data: bool = True
    compare: bool = False
    agreement: str = Agreement.DISTRIBUTIONAL.value
    hidden: tuple[int, ...] = (64,)
    lr: float = 7e-3
    epochs_human: int = 50
    epochs_object: int = 40
    epochs_spatial: int = 40
    batch_size: int = 32
    alpha: float = 0.1
    unlabeled_ratio: float = 1.0
    dup_prob: float = 0.5
    classifier_epochs: int = 60
    synthesizer_epochs: int = 40
    synthesizer_lr: float = 0.05
    beta: float = 1.0
    gamma: float = 0.1
    calibration_epochs: int = 2
    calibration_lr: float = 1e-3
    calibration_batch_size: int | None = None
    pseudo_batch_size: int | None = None
    iou_threshold: float = 0.5
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self) -> None:
        try:
            Agreement(self.agreement)
        except ValueError as e:
            raise ValidationError(f"unknown agreement {self.agreement!r}") from e
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValidationError(f"hidden widths must be positive, got {self.hidden}")
        if min(self.epochs_human, self.epochs_object, self.epochs_spatial, self.calibration_epochs) < 0:
            raise ValidationError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")

    @classmethod
    def _nested(cls) -> dict[str, type[ConfigBase]]:
        return {"generator": GeneratorConfig}

    def epochs(self, stream: str) -> int:
        return {"human": self.epochs_human, "object": self.epochs_object, "spatial": self.epochs_spatial}[stream]

    def stream_seed(self, stream: str) -> int:
        return self.seed * 100 + STREAMS.index(stream)


# --------------------------------------------------------------------------- #
# Streams
# --------------------------------------------------------------------------- #


@dataclass
class TrainedStream:
    """A trained verb stream, with the synthesizer checkpoint when trained object-category immune."""

    name: str
    stream: VerbStream
    model: StreamNet
    oc: OcImmuneCheckpoint | None = None
    history: list[float] = field(default_factory=list)

    def outputs(self, records: Sequence[PairRecord]) -> StreamOutput:
        x = self.stream.inputs(records)
        if self.oc is not None:
            return infer_object_stream(self.model, self.oc.synthesizer, x)
        return forward(self.model, x)


def fit_synthesizer(bundle: DatasetBundle, config: ExperimentConfig) -> OcImmuneCheckpoint:
    """Object classifier and synthesizer trained on the training split's object features."""
    records = bundle.records(Split.TRAIN)
    x = make_stream("object").inputs(records)
    return fit_oc_immune(
        x,
        [r.object_category for r in records],
        bundle.vocabulary.n_objects,
        hidden=config.hidden,
        classifier_epochs=config.classifier_epochs,
        synthesizer_epochs=config.synthesizer_epochs,
        lr=config.synthesizer_lr,
        dup_prob=config.dup_prob,
        seed=config.stream_seed("object"),
    )


def train_one_stream(
    bundle: DatasetBundle,
    name: str,
    config: ExperimentConfig,
    oc: OcImmuneCheckpoint | None = None,
) -> TrainedStream:
    """Train one stream on the training split.

    With ``oc`` (object stream only) the model learns from synthesized features. With uqm and
    extra_data on and a non-empty unlabeled split, training is uncertainty-guided.
    """
    stream = make_stream(name, bundle.n_keypoints)
    train = bundle.records(Split.TRAIN)
    unlabeled = bundle.records(Split.UNLABELED) if config.uqm and config.extra_data else []
    x = stream.inputs(train)
    y = labels_matrix(train, bundle.vocabulary.n_verbs)
    seed = config.stream_seed(name)
    model = StreamNet(stream.spec(x.shape[1], config.hidden, bundle.vocabulary.n_verbs, seed, config.uqm))
    epochs, common = config.epochs(name), {"lr": config.lr, "batch_size": config.batch_size, "seed": seed}

    if oc is not None:
        if name != "object":
            raise ValidationError(f"synthesized training only applies to the object stream, not {name}")
        pool = ObjectPool(x, y, tuple(r.object_category for r in train))
        similarity = build_similarity(bundle.vocabulary)
        if unlabeled:
            with torch.no_grad():
                x_u = stream.inputs(unlabeled)
                x_u = oc.synthesizer(x_u, x_u)

            def resample(epoch: int) -> tuple[torch.Tensor, torch.Tensor]:
                return synthesize_epoch(pool, similarity, oc.synthesizer, oc.dup_prob, seed, epoch)

            history = train_uncertainty_guided(
                model,
                x,
                y,
                x_u,
                epochs,
                alpha=config.alpha,
                unlabeled_ratio=config.unlabeled_ratio,
                resample=resample,
                **common,
            )
        else:
            history = train_object_verb_stream(
                model, pool, similarity, oc.synthesizer, epochs, dup_prob=oc.dup_prob, **common
            )
    elif unlabeled:
        history = train_uncertainty_guided(
            model,
            x,
            y,
            stream.inputs(unlabeled),
            epochs,
            alpha=config.alpha,
            unlabeled_ratio=config.unlabeled_ratio,
            **common,
        )
    else:
        history = train_stream(model, x, y, epochs, **common)
    return TrainedStream(name=name, stream=stream, model=model, oc=oc, history=history)


def score_rows(name: str, records: Sequence[PairRecord], outputs: StreamOutput) -> list[ScoreRow]:
    return [
        ScoreRow(pair_id=r.pair_id, stream=name, s=tuple(outputs.s[i].tolist()), e=tuple(outputs.e[i].tolist()))
        for i, r in enumerate(records)
    ]


# --------------------------------------------------------------------------- #
# Detections and evaluation
# --------------------------------------------------------------------------- #


def detections_from_scores(
    records: Sequence[PairRecord], scores: torch.Tensor, vocabulary: Vocabulary
) -> list[Detection]:
    """One detection per (pair, legal composition of its detected object), scored by that verb's column.

    Pairs with a non-positive score for a composition emit nothing for it.
    """
    detections = []
    for i, record in enumerate(records):
        for verb in vocabulary.verbs_for_object(record.object_category):
            score = float(scores[i, verb])
            if score > 0.0:
                detections.append(
                    Detection(
                        image_id=record.image_id,
                        human_box=record.human_box,
                        object_box=record.object_box,
                        composition_id=vocabulary.composition_id(verb, record.object_category),
                        score=min(score, 1.0),
                    )
                )
    return detections


def evaluate_scores(
    bundle: DatasetBundle, records: Sequence[PairRecord], scores: torch.Tensor, iou_threshold: float
) -> tuple[dict[EvalMode, Any], list[Detection]]:
    detections = detections_from_scores(records, scores, bundle.vocabulary)
    gt = bundle.gt_for(records)
    tables = {mode: evaluate(detections, gt, bundle.vocabulary, mode, iou_threshold) for mode in EvalMode}
    return tables, detections


def _stream_row(bundle: DatasetBundle, tables: Mapping[EvalMode, Any]) -> dict[str, Any]:
    table = tables[EvalMode.DEFAULT]
    row: dict[str, Any] = {"map": compute_map(table, bundle.vocabulary, EvalMode.DEFAULT, Subset.FULL)}
    try:
        row["mpd"] = compute_mpd(table, bundle.vocabulary).mpd
    except MetricsError:
        row["mpd"] = None
    return row


# --------------------------------------------------------------------------- #
# Pipeline
# --------------------------------------------------------------------------- #


@dataclass
class PipelineResult:
    report: dict[str, Any]
    streams: dict[str, TrainedStream]
    calibration: CalibrationParams | None
    prediction: CalibratedPrediction
    detections: list[Detection]


def load_data(config: ExperimentConfig) -> DatasetBundle:
    if config.data_dir is not None:
        return load_bundle(config.data_dir)
    return generate(config.generator)


def run_experiment(config: ExperimentConfig, bundle: DatasetBundle) -> PipelineResult:
    """Train, pseudo-label, calibrate and evaluate on an already loaded bundle."""
    vocabulary = bundle.vocabulary
    out_dir = pathlib.Path(config.out_dir) if config.out_dir is not None else None
    report: dict[str, Any] = {}

    with stage("train"):
        oc = fit_synthesizer(bundle, config) if config.oil else None
        if oc is not None and out_dir is not None:
            oc.save(out_dir / "synth.json")
        streams = {
            name: train_one_stream(bundle, name, config, oc if name == "object" else None) for name in STREAMS
        }

    unlabeled = bundle.records(Split.UNLABELED)
    if config.uqm and unlabeled:
        with stage("pseudo"):
            train = bundle.records(Split.TRAIN)
            y = labels_matrix(train, vocabulary.n_verbs)
            try:
                truth = true_labels(bundle, unlabeled)
            except GeneratorError:
                logger.warning("Unlabeled pairs have no ground truth; skipping pseudo-label quality")
                truth = {}
            verdicts, quality = {}, {}
            for name, trained in streams.items():
                records = pseudo_label(
                    trained.outputs(train),
                    y,
                    trained.outputs(unlabeled),
                    [r.pair_id for r in unlabeled],
                    config.pseudo_batch_size,
                )
                verdicts[name] = verdict_counts(records)
                quality[name] = pseudo_label_quality(records, truth)
                if out_dir is not None:
                    emit_verdicts([r.to_row() for r in records], out_dir / f"verdicts_{name}.jsonl")
            report["verdict_counts"] = verdicts
            report["pseudo_label_quality"] = quality

    with stage("calibrate"):
        val = bundle.records(Split.VAL)
        params = None
        if config.cui:
            outputs = {name: trained.outputs(val) for name, trained in streams.items()}
            params = fit_calibration(
                outputs,
                labels_matrix(val, vocabulary.n_verbs),
                torch.tensor([r.det_h for r in val], dtype=torch.float64),
                torch.tensor([r.det_o for r in val], dtype=torch.float64),
                beta=config.beta,
                gamma=config.gamma,
                epochs=config.calibration_epochs,
                lr=config.calibration_lr,
                batch_size=config.calibration_batch_size,
                seed=config.seed,
                splits=[bundle.split_of(r) for r in val],
                agreement=Agreement(config.agreement),
            )
            if out_dir is not None:
                emit_calibration(params, out_dir / "calibration.json")
        report["calibration"] = params.to_dict() if params is not None else None

    with stage("eval"):
        test = bundle.records(Split.TEST)
        outputs = {name: trained.outputs(test) for name, trained in streams.items()}
        det_h = torch.tensor([r.det_h for r in test], dtype=torch.float64)
        det_o = torch.tensor([r.det_o for r in test], dtype=torch.float64)
        if params is not None:
            prediction = predict(params, outputs, det_h, det_o)
        else:
            prediction = uncalibrated_fusion(outputs, det_h, det_o)
        tables, detections = evaluate_scores(bundle, test, prediction.fused, config.iou_threshold)
        report["metrics"] = summarize(tables, vocabulary)
        report["streams"] = {
            name: _stream_row(bundle, evaluate_scores(bundle, test, prediction.stream(name), config.iou_threshold)[0])
            for name in STREAMS
        }
        if out_dir is not None:
            emit_detections(detections, out_dir / "detections.jsonl")
            for name, trained in streams.items():
                emit_stream_outputs(score_rows(name, test, outputs[name]), out_dir / f"scores_{name}.jsonl")

    return PipelineResult(report, streams, params, prediction, detections)


def _dataset_summary(bundle: DatasetBundle) -> dict[str, Any]:
    summary: dict[str, Any] = {
        "pairs": {str(split): len(bundle.records(split)) for split in Split},
        "compositions": bundle.vocabulary.n_compositions,
        "rare": len(bundle.vocabulary.rare),
        "unseen": len(bundle.vocabulary.unseen),
    }
    if bundle.records(Split.TRAIN):
        summary["train_mutual_information"] = mutual_information(bundle, Split.TRAIN)
    return summary


def run_pipeline(config: ExperimentConfig) -> dict[str, Any]:
    """Run the whole experiment and return the report.

    With ``compare`` the experiment is repeated with oil off on the same data; the report
    then holds a ``baseline`` section and the mAP/mPD differences.

    Raises:
        StageError: When a stage fails, chained to the original error.
    """
    with stage("data"):
        bundle = load_data(config)
        dataset = _dataset_summary(bundle)

    result = run_experiment(config, bundle)
    report = {"config": config.to_dict(), "dataset": dataset, **result.report}
    if config.compare:
        baseline_config = config.with_overrides(oil=False, compare=False)
        if config.out_dir is not None:
            baseline_config = baseline_config.with_overrides(out_dir=str(pathlib.Path(config.out_dir) / "baseline"))
        baseline = run_experiment(baseline_config, bundle).report
        report["baseline"] = baseline
        report["comparison"] = _compare(result.report["metrics"], baseline["metrics"])
    return report


def _compare(metrics: Mapping[str, Any], baseline: Mapping[str, Any]) -> dict[str, Any]:
    """Differences (run minus baseline) of full mAP and mPD."""
    comparison: dict[str, Any] = {}
    full, base_full = metrics.get("map_default", {}).get("full"), baseline.get("map_default", {}).get("full")
    if full is not None and base_full is not None:
        comparison["map_full_delta"] = full - base_full
    if metrics.get("mpd") is not None and baseline.get("mpd") is not None:
        comparison["mpd_delta"] = metrics["mpd"] - baseline["mpd"]
    return comparison
