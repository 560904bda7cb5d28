from collections.abc import Callable

import pytest

from hoigen.benchmark import GeneratorConfig
from hoigen.core import BBox, Detection, GtAnnotation, PairRecord, Vocabulary
from hoigen.pipeline import ExperimentConfig


@pytest.fixture
def vocabulary() -> Vocabulary:
    """Three verbs over three objects; eat/cut share apple and banana, ride only bike."""
    return Vocabulary(
        verbs=("eat", "cut", "ride"),
        objects=("apple", "banana", "bike"),
        compositions=((0, 0), (0, 1), (1, 0), (1, 1), (2, 2)),
        rare=frozenset({4}),
    )


@pytest.fixture
def box() -> BBox:
    return BBox(0.0, 0.0, 2.0, 2.0)


@pytest.fixture
def pair_record(box: BBox) -> PairRecord:
    return PairRecord(
        pair_id="p0",
        image_id="img0",
        human_box=box,
        object_box=BBox(1.0, 1.0, 3.0, 3.0),
        object_category=0,
        det_h=0.9,
        det_o=0.8,
        features={"human": (1.0, 2.0, 3.0, 4.0)},
        verb_labels=(1.0, 0.0, 0.0),
    )


@pytest.fixture
def gt_instance(box: BBox) -> GtAnnotation:
    return GtAnnotation(image_id="img0", human_box=box, object_box=box, composition_id=0)


@pytest.fixture
def make_detection() -> Callable[..., Detection]:
    """Factory for detections whose boxes are the 2x2 box at the origin shifted by ``offset`` pixels."""

    def make(image_id: str, score: float, composition_id: int = 0, offset: float = 0.0) -> Detection:
        shifted = BBox(offset, offset, offset + 2.0, offset + 2.0)
        return Detection(
            image_id=image_id, human_box=shifted, object_box=shifted, composition_id=composition_id, score=score
        )

    return make


@pytest.fixture
def tiny_generator() -> GeneratorConfig:
    return GeneratorConfig(
        n_verbs=4,
        n_objects=4,
        composition_density=0.8,
        latent_dim=4,
        human_dim=6,
        object_dim=6,
        n_keypoints=3,
        max_samples_per_composition=20,
        n_unlabeled=30,
        test_per_composition=4,
        seed=3,
    )


@pytest.fixture
def tiny_experiment(tiny_generator: GeneratorConfig) -> ExperimentConfig:
    return ExperimentConfig(
        hidden=(8,),
        epochs_human=2,
        epochs_object=2,
        epochs_spatial=2,
        classifier_epochs=3,
        synthesizer_epochs=2,
        calibration_epochs=2,
        generator=tiny_generator,
    )
