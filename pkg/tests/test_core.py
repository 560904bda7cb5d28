"""Tests for domain types, geometry and dataset validation."""

import dataclasses
import math

import pytest

from hoigen.core import (
    BBox,
    Detection,
    GtAnnotation,
    PairRecord,
    Pose2D,
    ValidationError,
    Vocabulary,
    iou,
    validate_dataset,
)


class TestIou:
    def test_identical_boxes(self):
        assert iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0

    def test_disjoint_boxes(self):
        assert iou(BBox(0, 0, 2, 2), BBox(2, 2, 4, 4)) == 0.0

    def test_partial_overlap(self):
        # intersection 1, union 7
        assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_symmetric(self):
        a, b = BBox(0, 0, 3, 1), BBox(1, 0, 5, 4)
        assert iou(a, b) == pytest.approx(iou(b, a))

    @pytest.mark.parametrize("bad", [BBox(2, 0, 1, 2), BBox(0, 0, 0, 2), BBox(0, math.nan, 1, 1)])
    def test_invalid_box_rejected(self, bad):
        with pytest.raises(ValidationError):
            iou(bad, BBox(0, 0, 1, 1))


class TestBBox:
    def test_from_list_needs_four_values(self):
        with pytest.raises(ValidationError):
            BBox.from_list([0, 0, 1])

    def test_union(self):
        assert BBox(0, 0, 2, 2).union(BBox(1, -1, 3, 1)) == BBox(0, -1, 3, 2)

    def test_area(self):
        assert BBox(1, 1, 4, 3).area == 6


class TestVocabulary:
    def test_lookups(self, vocabulary):
        assert vocabulary.n_compositions == 5
        assert vocabulary.composition_id(1, 1) == 3
        assert vocabulary.composition_id(2, 0) is None
        assert vocabulary.objects_for_verb(0) == [0, 1]
        assert vocabulary.verbs_for_object(2) == [2]
        assert vocabulary.compositions_of_verb(1) == [2, 3]

    def test_dict_round_trip(self, vocabulary):
        assert Vocabulary.from_dict(vocabulary.to_dict()) == vocabulary

    def test_duplicate_composition_rejected(self):
        with pytest.raises(ValidationError, match="duplicate compositions"):
            Vocabulary(verbs=("a",), objects=("x",), compositions=((0, 0), (0, 0)))

    def test_flags_must_reference_compositions(self, vocabulary):
        with pytest.raises(ValidationError, match="unseen"):
            vocabulary.with_flags(unseen=[7])

    def test_with_flags_keeps_other_flags(self, vocabulary):
        flagged = vocabulary.with_flags(unseen=[0])
        assert flagged.rare == vocabulary.rare
        assert flagged.unseen == frozenset({0})


class TestValidateDataset:
    def test_valid_records(self, vocabulary, pair_record, gt_instance):
        assert validate_dataset([pair_record, gt_instance], vocabulary) == []

    def test_inverted_box_names_record(self, vocabulary, pair_record, gt_instance):
        bad = dataclasses.replace(gt_instance, human_box=BBox(3, 0, 1, 2))
        issues = validate_dataset([pair_record, bad], vocabulary)
        assert len(issues) == 1
        assert issues[0].index == 1
        assert issues[0].field == "human_box"

    def test_unknown_composition(self, vocabulary, gt_instance):
        issues = validate_dataset([dataclasses.replace(gt_instance, composition_id=99)], vocabulary)
        assert [i.field for i in issues] == ["composition_id"]

    def test_pair_record_checks(self, vocabulary, pair_record):
        bad = dataclasses.replace(
            pair_record,
            det_h=1.5,
            object_category=9,
            verb_labels=(1.0, 0.0),
            pose=Pose2D.from_list([[0, 0], [1, 1]]),
        )
        fields = {i.field for i in validate_dataset([bad], vocabulary, n_keypoints=3)}
        assert fields == {"det_h", "object_category", "verb_labels", "pose"}

    def test_feature_dimension(self, vocabulary, pair_record):
        issues = validate_dataset([pair_record], vocabulary, feature_dims={"human": 5})
        assert [i.field for i in issues] == ["features"]

    def test_detection_score_must_be_positive(self, vocabulary, box):
        detection = Detection(image_id="i", human_box=box, object_box=box, composition_id=0, score=0.0)
        assert [i.field for i in validate_dataset([detection], vocabulary)] == ["score"]

    def test_unlabeled_record(self, pair_record):
        assert not dataclasses.replace(pair_record, verb_labels=None).labeled
        assert isinstance(pair_record, PairRecord) and pair_record.labeled

    def test_issue_message(self, vocabulary, gt_instance):
        issue = validate_dataset([dataclasses.replace(gt_instance, composition_id=-1)], vocabulary)[0]
        assert str(issue).startswith("record 0: composition_id:")


def test_gt_annotation_is_frozen(gt_instance: GtAnnotation):
    with pytest.raises(dataclasses.FrozenInstanceError):
        gt_instance.composition_id = 2  # type: ignore[misc]
