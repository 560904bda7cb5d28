"""Command-line interface.

Subcommands:
    gen:        generate a synthetic dataset bundle
    synth:      train the object classifier and feature synthesizer
    train:      train one verb stream and write its checkpoint and scores
    pseudo:     pseudo-label unlabeled stream outputs
    calibrate:  fit calibration and fusion on validation scores
    eval:       compute AP, mAP and mPD from detection and GT files
    pipeline:   run the whole experiment and write its report

Exit codes: 0 success, 1 validation error, 2 I/O or format error, 3 numeric error.

Example:
    hoigen pipeline --config experiment.yaml --compare --out report.json
"""

from __future__ import annotations

import argparse
import logging
import os
import pathlib
import sys
from collections.abc import Sequence

import torch

from .benchmark import GeneratorConfig, generate
from .calibration import STREAMS, Agreement, collect_outputs, emit_calibration, fit_calibration
from .core import FormatError, HoiGenError, NumericError, Split, ValidationError
from .formats import (
    emit_bundle,
    emit_report,
    emit_stream_outputs,
    emit_verdicts,
    load_bundle,
    load_vocabulary,
    parse_detections,
    parse_features,
    parse_gt,
    parse_labels,
    parse_pairs,
    parse_splits,
    parse_stream_outputs,
    write_json,
)
from .metrics import EvalMode, evaluate, summarize
from .models.mlp import StreamOutput, save_checkpoint
from .oc_immune import OcImmuneCheckpoint, fit_oc_immune
from .pipeline import ExperimentConfig, StageError, run_pipeline, score_rows, train_one_stream
from .uncertainty import pseudo_label, pseudo_label_quality, verdict_counts

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


def exit_code(error: BaseException) -> int:
    """Exit code of an error, looking through StageError to its cause.

    Records that parse but break an invariant are validation failures, even inside artifact files.
    """
    while isinstance(error, StageError) and error.__cause__ is not None:
        error = error.__cause__
    match error:
        case NumericError():
            return EXIT_NUMERIC
        case ValidationError():
            return EXIT_VALIDATION
        case FormatError() | OSError():
            return EXIT_IO
        case _:
            return EXIT_VALIDATION


def configure_threads() -> None:
    value = os.getenv("HOIGEN_NUM_THREADS", "")
    if value.isdigit() and int(value) > 0:
        torch.set_num_threads(int(value))


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def cmd_gen(args: argparse.Namespace) -> None:
    config = GeneratorConfig.from_file(args.config) if args.config else GeneratorConfig()
    config = config.with_overrides(seed=args.seed)
    bundle = generate(config)
    emit_bundle(bundle, args.out_dir)
    write_json(config.to_dict(), pathlib.Path(args.out_dir) / "generator.json")


def cmd_synth(args: argparse.Namespace) -> None:
    vocabulary = load_vocabulary(args.vocab)
    features = parse_features(args.features, stream="object")
    records = [r for r in parse_pairs(args.pairs, vocabulary) if r.pair_id in features]
    if args.splits is not None:
        splits = parse_splits(args.splits)
        records = [r for r in records if splits.get(r.pair_id) is Split.TRAIN]
    if not records:
        raise ValidationError(f"no pair in {args.pairs} has object features in {args.features}")
    x = torch.tensor([features[r.pair_id] for r in records], dtype=torch.float64)
    checkpoint = fit_oc_immune(
        x,
        [r.object_category for r in records],
        vocabulary.n_objects,
        hidden=args.hidden,
        classifier_epochs=args.classifier_epochs,
        synthesizer_epochs=args.synthesizer_epochs,
        lr=args.lr,
        dup_prob=args.dup_prob,
        seed=args.seed,
    )
    checkpoint.save(args.out)


def cmd_train(args: argparse.Namespace) -> None:
    bundle = load_bundle(args.data)
    config = ExperimentConfig().with_overrides(
        lr=args.lr,
        seed=args.seed,
        hidden=tuple(args.hidden) if args.hidden else None,
        batch_size=args.batch_size,
        alpha=args.alpha,
        uqm=not args.no_uqm,
        extra_data=args.extra_data,
        **{f"epochs_{args.stream}": args.epochs},
    )
    oc = None
    if args.synth is not None:
        if args.stream != "object":
            raise ValidationError("--synth only applies to the object stream")
        oc = OcImmuneCheckpoint.load(args.synth)
    trained = train_one_stream(bundle, args.stream, config, oc)
    save_checkpoint(
        trained.model,
        args.out,
        extra={"stream": args.stream, "n_keypoints": bundle.n_keypoints, "history": trained.history},
    )
    if args.scores_out is not None:
        records = [r for r in bundle.pair_records if bundle.split_of(r) is not Split.TRAIN]
        emit_stream_outputs(score_rows(args.stream, records, trained.outputs(records)), args.scores_out)


def _stream_output(
    path: pathlib.Path, stream: str, pair_ids: Sequence[str] | None = None
) -> tuple[list[str], StreamOutput]:
    rows = [r for r in parse_stream_outputs(path) if r.stream == stream]
    if pair_ids is not None:
        by_id = {r.pair_id: r for r in rows}
        missing = [p for p in pair_ids if p not in by_id]
        if missing:
            raise ValidationError(f"{path} has no {stream} scores for {missing[:5]}")
        rows = [by_id[p] for p in pair_ids]
    if not rows:
        raise ValidationError(f"{path} has no {stream} scores")
    output = StreamOutput(
        torch.tensor([r.s for r in rows], dtype=torch.float64), torch.tensor([r.e for r in rows], dtype=torch.float64)
    )
    return [r.pair_id for r in rows], output


def cmd_pseudo(args: argparse.Namespace) -> None:
    labels = parse_labels(args.labels)
    labeled_ids = {r.pair_id for r in parse_stream_outputs(args.labeled_scores) if r.stream == args.stream}
    label_rows = [r for r in labels if r.pair_id in labeled_ids]
    _, labeled = _stream_output(args.labeled_scores, args.stream, [r.pair_id for r in label_rows])
    y = torch.tensor([r.verbs for r in label_rows], dtype=torch.float64)
    unlabeled_ids, unlabeled = _stream_output(args.unlabeled_scores, args.stream)
    records = pseudo_label(labeled, y, unlabeled, unlabeled_ids, args.batch_size)
    emit_verdicts([r.to_row() for r in records], args.out)
    counts = verdict_counts(records)
    logger.info("Verdicts: %s", ", ".join(f"{k}={v}" for k, v in counts.items()))
    if args.report is not None:
        report: dict[str, object] = {"stream": args.stream, "verdict_counts": counts}
        if args.truth is not None:
            truth = {r.pair_id: r.verbs for r in parse_labels(args.truth)}
            report["pseudo_label_quality"] = pseudo_label_quality(records, truth)
        emit_report(report, args.report)


def cmd_calibrate(args: argparse.Namespace) -> None:
    labels = parse_labels(args.labels)
    pair_ids = [r.pair_id for r in labels]
    rows = [row for path in args.val_scores for row in parse_stream_outputs(path)]
    outputs = collect_outputs(rows, pair_ids)
    splits = [r.split for r in labels] if all(r.split is not None for r in labels) else None
    params = fit_calibration(
        outputs,
        torch.tensor([r.verbs for r in labels], dtype=torch.float64),
        torch.tensor([r.det_h for r in labels], dtype=torch.float64),
        torch.tensor([r.det_o for r in labels], dtype=torch.float64),
        beta=args.beta,
        gamma=args.gamma,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        splits=splits,
        agreement=Agreement(args.agreement),
    )
    emit_calibration(params, args.out)


def cmd_eval(args: argparse.Namespace) -> None:
    vocabulary = load_vocabulary(args.vocab)
    gt = parse_gt(args.gt, vocabulary)
    detections = parse_detections(args.det, vocabulary)
    mode = EvalMode(args.mode)
    table = evaluate(detections, gt, vocabulary, mode, args.iou, args.workers)
    # mPD is only reported for default-mode tables
    report = summarize({mode: table}, vocabulary) | {"ap": table.to_dict()}
    emit_report(report, args.out)


def cmd_pipeline(args: argparse.Namespace) -> None:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    config = config.with_overrides(
        compare=True if args.compare else None,
        oil=False if args.no_oil else None,
        uqm=False if args.no_uqm else None,
        cui=False if args.no_cui else None,
        extra_data=False if args.no_extra_data else None,
        agreement=args.agreement,
        seed=args.seed,
        data_dir=args.data,
        out_dir=args.artifacts_dir,
    )
    report = run_pipeline(config)
    emit_report(report, args.out)
    metrics = report.get("metrics", {})
    logger.info("mAP %s, mPD %s", metrics.get("map_default", {}).get("full"), metrics.get("mpd"))


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hoigen", description="HOI generalization toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        return p

    p = add("gen", "generate a synthetic dataset bundle")
    p.add_argument("--config", type=pathlib.Path, help="generator config (YAML or JSON)")
    p.add_argument("--out-dir", type=pathlib.Path, required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = add("synth", "train the object classifier and feature synthesizer")
    p.add_argument("--features", type=pathlib.Path, required=True, help="object feature file (.jsonl or .npz)")
    p.add_argument("--vocab", type=pathlib.Path, required=True)
    p.add_argument("--pairs", type=pathlib.Path, required=True, help="pair file with object categories")
    p.add_argument("--splits", type=pathlib.Path, help="split file; only training pairs are used when given")
    p.add_argument("--dup-prob", type=float, default=0.5)
    p.add_argument("--hidden", type=int, nargs="+", default=[64])
    p.add_argument("--classifier-epochs", type=int, default=60)
    p.add_argument("--synthesizer-epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=pathlib.Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = add("train", "train one verb stream")
    p.add_argument("--data", type=pathlib.Path, required=True, help="dataset bundle directory")
    p.add_argument("--stream", choices=STREAMS, required=True)
    p.add_argument("--lr", type=float, default=7e-3)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-uqm", action="store_true", help="train without the uncertainty head")
    p.add_argument("--extra-data", action="store_true", help="uncertainty-guided training on the unlabeled split")
    p.add_argument("--alpha", type=float)
    p.add_argument("--synth", type=pathlib.Path, help="synthesizer checkpoint (object stream)")
    p.add_argument("--out", type=pathlib.Path, required=True, help="checkpoint path")
    p.add_argument("--scores-out", type=pathlib.Path, help="write scores of all non-training pairs")
    p.set_defaults(func=cmd_train)

    p = add("pseudo", "pseudo-label unlabeled stream outputs")
    p.add_argument("--labeled-scores", type=pathlib.Path, required=True)
    p.add_argument("--labels", type=pathlib.Path, required=True)
    p.add_argument("--unlabeled-scores", type=pathlib.Path, required=True)
    p.add_argument("--stream", choices=STREAMS, required=True)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--truth", type=pathlib.Path, help="ground-truth labels of the unlabeled pairs")
    p.add_argument("--report", type=pathlib.Path, help="verdict counts and quality report")
    p.add_argument("--out", type=pathlib.Path, required=True)
    p.set_defaults(func=cmd_pseudo)

    p = add("calibrate", "fit calibration and fusion parameters")
    p.add_argument("--val-scores", type=pathlib.Path, nargs="+", required=True, help="score files of the three streams")
    p.add_argument("--labels", type=pathlib.Path, required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--agreement", choices=[a.value for a in Agreement], default=Agreement.DISTRIBUTIONAL.value)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=pathlib.Path, required=True)
    p.set_defaults(func=cmd_calibrate)

    p = add("eval", "evaluate detections against ground truth")
    p.add_argument("--gt", type=pathlib.Path, required=True)
    p.add_argument("--det", type=pathlib.Path, required=True)
    p.add_argument("--vocab", type=pathlib.Path, required=True)
    p.add_argument("--mode", choices=[m.value for m in EvalMode], default=EvalMode.DEFAULT.value)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", type=pathlib.Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = add("pipeline", "run the whole experiment")
    p.add_argument("--config", type=pathlib.Path, help="experiment config (YAML or JSON)")
    p.add_argument("--data", type=str, help="dataset bundle directory (default: generate)")
    p.add_argument("--artifacts-dir", type=str, help="write intermediate artifacts here")
    p.add_argument("--compare", action="store_true", help="also run without object-category immunity")
    p.add_argument("--no-oil", action="store_true")
    p.add_argument("--no-uqm", action="store_true")
    p.add_argument("--no-cui", action="store_true")
    p.add_argument("--no-extra-data", action="store_true")
    p.add_argument("--agreement", choices=[a.value for a in Agreement])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=pathlib.Path, required=True)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level), format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    configure_threads()
    try:
        args.func(args)
    except (HoiGenError, OSError) as e:
        logger.error("%s", e)
        return exit_code(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
