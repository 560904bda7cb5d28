"""Tests for the command-line interface and its exit codes."""

import json

import pytest

from hoigen.calibration import load_calibration
from hoigen.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, exit_code, main
from hoigen.core import FormatError, NumericError, Split
from hoigen.formats import (
    InvalidRecordError,
    LabelRow,
    ParseError,
    emit_detections,
    emit_gt,
    emit_labels,
    emit_stream_outputs,
    emit_vocabulary,
    load_bundle,
    parse_stream_outputs,
)
from hoigen.models import load_checkpoint
from hoigen.pipeline import StageError, stage


@pytest.fixture
def bundle_dir(tmp_path, tiny_generator):
    config = tmp_path / "gen.json"
    config.write_text(json.dumps(tiny_generator.to_dict()), encoding="utf-8")
    assert main(["gen", "--config", str(config), "--out-dir", str(tmp_path / "data")]) == EXIT_OK
    return tmp_path / "data"


@pytest.fixture
def eval_files(tmp_path, vocabulary, gt_instance):
    emit_vocabulary(vocabulary, tmp_path / "vocab.json")
    emit_gt([gt_instance], tmp_path / "gt.jsonl")
    return tmp_path


def train(bundle_dir, stream, out_dir):
    argv = ["train", "--data", str(bundle_dir), "--stream", stream, "--epochs", "1", "--hidden", "4"]
    argv += ["--out", str(out_dir / f"{stream}.json"), "--scores-out", str(out_dir / f"scores_{stream}.jsonl")]
    return main(argv)


class TestExitCode:
    @pytest.mark.parametrize(
        ("error", "code"),
        [
            (NumericError("nan"), EXIT_NUMERIC),
            (FormatError("bad line"), EXIT_IO),
            (ParseError("det.jsonl", 2, "malformed JSON"), EXIT_IO),
            (InvalidRecordError("det.jsonl", 2, "score -1.0 must be finite and positive"), EXIT_VALIDATION),
            (FileNotFoundError("x"), EXIT_IO),
            (StageError("eval", "failed"), EXIT_VALIDATION),
        ],
    )
    def test_mapping(self, error, code):
        assert exit_code(error) == code

    def test_looks_through_stage_errors(self):
        with pytest.raises(StageError) as info:
            with stage("calibrate"):
                raise NumericError("calibration loss became non-finite")
        assert exit_code(info.value) == EXIT_NUMERIC


class TestGen:
    def test_bundle_written(self, bundle_dir, tiny_generator):
        bundle = load_bundle(bundle_dir)
        assert bundle.vocabulary.n_verbs == 4
        assert json.loads((bundle_dir / "generator.json").read_text())["seed"] == tiny_generator.seed

    def test_infeasible_config(self, tmp_path):
        config = tmp_path / "gen.yaml"
        config.write_text("spurious_strength: 1.5\n", encoding="utf-8")
        assert main(["gen", "--config", str(config), "--out-dir", str(tmp_path / "data")]) == EXIT_VALIDATION


class TestEval:
    def test_perfect_detection(self, eval_files, make_detection):
        emit_detections([make_detection("img0", 0.9)], eval_files / "det.jsonl")
        argv = ["eval", "--gt", str(eval_files / "gt.jsonl"), "--det", str(eval_files / "det.jsonl")]
        argv += ["--vocab", str(eval_files / "vocab.json"), "--out", str(eval_files / "report.json")]
        assert main(argv) == EXIT_OK
        report = json.loads((eval_files / "report.json").read_text())
        assert report["map_default"]["full"] == 1.0

    def test_missing_detections(self, eval_files):
        argv = ["eval", "--gt", str(eval_files / "gt.jsonl"), "--det", str(eval_files / "missing.jsonl")]
        argv += ["--vocab", str(eval_files / "vocab.json"), "--out", str(eval_files / "report.json")]
        assert main(argv) == EXIT_IO

    def test_negative_score(self, eval_files, make_detection):
        row = {"image_id": "img0", "hbox": [0, 0, 2, 2], "obox": [0, 0, 2, 2], "hoi": 0, "score": -1.0}
        (eval_files / "det.jsonl").write_text(json.dumps(row) + "\n", encoding="utf-8")
        assert main(self.argv(eval_files)) == EXIT_VALIDATION
        assert not (eval_files / "report.json").exists()

    def test_unknown_composition(self, eval_files):
        row = {"image_id": "img0", "hbox": [0, 0, 2, 2], "obox": [0, 0, 2, 2], "hoi": 99, "score": 0.5}
        (eval_files / "det.jsonl").write_text(json.dumps(row) + "\n", encoding="utf-8")
        assert main(self.argv(eval_files)) == EXIT_VALIDATION

    def test_malformed_detections(self, eval_files):
        (eval_files / "det.jsonl").write_text('{"image_id": "img0", "hbox": [0, 0\n', encoding="utf-8")
        assert main(self.argv(eval_files)) == EXIT_IO

    @staticmethod
    def argv(eval_files):
        argv = ["eval", "--gt", str(eval_files / "gt.jsonl"), "--det", str(eval_files / "det.jsonl")]
        return argv + ["--vocab", str(eval_files / "vocab.json"), "--out", str(eval_files / "report.json")]


class TestCorruptBundle:
    def rewrite_features(self, bundle_dir, edit):
        path = bundle_dir / "features.jsonl"
        rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
        edit(rows[0])
        path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")

    def train_exit(self, bundle_dir, tmp_path):
        return main(["train", "--data", str(bundle_dir), "--stream", "human", "--out", str(tmp_path / "m.json")])

    def test_feature_row_without_stream(self, bundle_dir, tmp_path):
        self.rewrite_features(bundle_dir, lambda row: row.pop("stream"))
        assert self.train_exit(bundle_dir, tmp_path) == EXIT_IO

    def test_non_finite_feature(self, bundle_dir, tmp_path):
        self.rewrite_features(bundle_dir, lambda row: row["vec"].__setitem__(0, float("nan")))
        assert self.train_exit(bundle_dir, tmp_path) == EXIT_IO

    def test_feature_dimension_mismatch(self, bundle_dir, tmp_path):
        self.rewrite_features(bundle_dir, lambda row: row["vec"].append(0.0))
        assert self.train_exit(bundle_dir, tmp_path) == EXIT_VALIDATION

    def test_corrupt_meta(self, bundle_dir, tmp_path):
        (bundle_dir / "meta.json").write_text("{not json", encoding="utf-8")
        assert self.train_exit(bundle_dir, tmp_path) == EXIT_IO


class TestStepByStep:
    def test_train_calibrate_pseudo(self, bundle_dir, tmp_path):
        out = tmp_path / "out"
        for stream in ("human", "object", "spatial"):
            assert train(bundle_dir, stream, out) == EXIT_OK
        _, extra = load_checkpoint(out / "human.json")
        assert extra["stream"] == "human" and len(extra["history"]) == 1

        bundle = load_bundle(bundle_dir)
        val = bundle.records(Split.VAL)
        emit_labels([LabelRow(r.pair_id, r.verb_labels, r.det_h, r.det_o, Split.VAL) for r in val], out / "val.jsonl")
        scores = [str(out / f"scores_{stream}.jsonl") for stream in ("human", "object", "spatial")]
        argv = ["calibrate", "--val-scores", *scores, "--labels", str(out / "val.jsonl")]
        assert main([*argv, "--out", str(out / "calibration.json")]) == EXIT_OK
        assert sum(load_calibration(out / "calibration.json").fusion) == pytest.approx(1.0)

        unlabeled = {r.pair_id for r in bundle.records(Split.UNLABELED)}
        rows = [r for r in parse_stream_outputs(out / "scores_human.jsonl") if r.pair_id in unlabeled]
        emit_stream_outputs(rows, out / "unlabeled_human.jsonl")
        argv = ["pseudo", "--labeled-scores", scores[0], "--labels", str(out / "val.jsonl")]
        argv += ["--unlabeled-scores", str(out / "unlabeled_human.jsonl"), "--stream", "human"]
        argv += ["--report", str(out / "pseudo.json"), "--out", str(out / "verdicts.jsonl")]
        assert main(argv) == EXIT_OK
        report = json.loads((out / "pseudo.json").read_text())
        assert sum(report["verdict_counts"].values()) == 30 * 4

    def test_synthesized_training_needs_object_stream(self, bundle_dir, tmp_path):
        argv = ["train", "--data", str(bundle_dir), "--stream", "human", "--synth", str(tmp_path / "synth.json")]
        assert main([*argv, "--out", str(tmp_path / "m.json")]) == EXIT_VALIDATION

    def test_synth_on_training_pairs(self, bundle_dir, tmp_path):
        argv = ["synth", "--features", str(bundle_dir / "features.jsonl"), "--vocab", str(bundle_dir / "vocab.json")]
        argv += ["--pairs", str(bundle_dir / "pairs.jsonl"), "--splits", str(bundle_dir / "splits.jsonl")]
        argv += ["--hidden", "4", "--classifier-epochs", "2", "--synthesizer-epochs", "1"]
        assert main([*argv, "--out", str(tmp_path / "synth.json")]) == EXIT_OK
        assert (tmp_path / "synth.json").is_file()

    def test_calibration_rejects_training_rows(self, bundle_dir, tmp_path):
        out = tmp_path / "out"
        for stream in ("human", "object", "spatial"):
            assert train(bundle_dir, stream, out) == EXIT_OK
        val = load_bundle(bundle_dir).records(Split.VAL)
        emit_labels([LabelRow(r.pair_id, r.verb_labels, split=Split.TRAIN) for r in val], out / "val.jsonl")
        scores = [str(out / f"scores_{stream}.jsonl") for stream in ("human", "object", "spatial")]
        argv = ["calibrate", "--val-scores", *scores, "--labels", str(out / "val.jsonl")]
        assert main([*argv, "--out", str(out / "calibration.json")]) == EXIT_VALIDATION


class TestPipeline:
    def test_report_written(self, tmp_path, tiny_experiment):
        config = tmp_path / "experiment.json"
        config.write_text(json.dumps(tiny_experiment.to_dict()), encoding="utf-8")
        argv = ["pipeline", "--config", str(config), "--no-oil", "--out", str(tmp_path / "report.json")]
        assert main(argv) == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["config"]["oil"] is False
        assert "map_default" in report["metrics"]

    def test_missing_bundle(self, tmp_path):
        argv = ["pipeline", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "report.json")]
        assert main(argv) == EXIT_IO
