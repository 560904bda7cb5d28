"""Generalizable human-object interaction detection.

Modules:
    core: Domain types, vocabulary, box geometry and dataset validation.
    formats: JSON-lines artifact codecs, dataset bundles and reports.
    config: Config mixin for YAML/JSON files with flag overrides.
    metrics: Per-composition AP, mAP subsets and mPD.
    models: Verb stream MLPs with uncertainty heads.
    oc_immune: Object classifier, feature synthesizer and synthesized stream training.
    uncertainty: Pseudo-labeling and uncertainty-guided training.
    calibration: Per-stream calibration and fused inference.
    benchmark: Synthetic long-tail benchmark generator and zero-shot holdouts.
    pipeline: End-to-end experiment runner.
    cli: Command-line entry point.
"""

from .core import FormatError, HoiGenError, NumericError, ValidationError, Vocabulary
from .pipeline import ExperimentConfig, StageError, run_pipeline

__all__ = [
    "ExperimentConfig",
    "FormatError",
    "HoiGenError",
    "NumericError",
    "StageError",
    "ValidationError",
    "Vocabulary",
    "run_pipeline",
]
