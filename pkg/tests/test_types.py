import numpy as np
import pytest

from stagevqa import (
    BoundingBox,
    ModelConfig,
    QAExample,
    TimeSpan,
    validate_example,
)


class TestTimeSpan:
    def test_valid(self):
        s = TimeSpan(2, 6)
        assert s.length == 5
        assert s.as_tuple() == (2, 6)

    def test_single_frame(self):
        assert TimeSpan(3, 3).length == 1

    @pytest.mark.parametrize("start,end", [(-1, 2), (5, 3)])
    def test_invalid(self, start, end):
        with pytest.raises(ValueError):
            TimeSpan(start, end)


class TestBoundingBox:
    def test_area(self):
        assert BoundingBox(0, 0, 2, 3).area == 6

    @pytest.mark.parametrize("coords", [(2, 0, 2, 3), (0, 3, 2, 3), (3, 0, 2, 3)])
    def test_degenerate(self, coords):
        with pytest.raises(ValueError):
            BoundingBox(*coords)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.d == 128
        assert cfg.kernel_input == 7
        assert cfg.kernel_fusion == 5
        assert cfg.w_att == 0.1
        assert cfg.w_span == 0.5
        assert cfg.lr == 1e-3
        assert cfg.weight_decay == 3e-7
        assert cfg.batch_size == 16
        assert cfg.max_epochs == 100
        assert cfg.early_stop_patience == 5

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(kernel_input=6)

    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            ModelConfig(box_score_threshold=0.0)
        with pytest.raises(ValueError):
            ModelConfig(iou_positive_threshold=1.0)

    def test_dict_round_trip(self):
        cfg = ModelConfig(d=32, seed=9)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_unknown_field(self):
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"bogus": 1})


class TestHypothesis:
    def test_question_then_answer(self, example):
        k = 2
        h = example.hypothesis(k)
        assert h.tokens == example.question_tokens + example.answer_tokens[k]
        assert len(h) == len(example.question_tokens) + len(example.answer_tokens[k])
        np.testing.assert_array_equal(
            h.features[: len(example.question_tokens)], example.question_features
        )
        np.testing.assert_array_equal(
            h.features[len(example.question_tokens) :], example.answer_features[k]
        )

    def test_five_hypotheses(self, example):
        assert len(example.hypotheses()) == 5


def _rebuild(ex: QAExample, **overrides) -> QAExample:
    kwargs = dict(
        qid=ex.qid,
        question_tokens=ex.question_tokens,
        answer_tokens=ex.answer_tokens,
        question_features=ex.question_features,
        answer_features=ex.answer_features,
        gt_answer_idx=ex.gt_answer_idx,
        gt_span=ex.gt_span,
        frames=ex.frames,
        concept_annotations=ex.concept_annotations,
    )
    kwargs.update(overrides)
    return QAExample(**kwargs)


class TestValidateExample:
    def test_well_formed(self, example):
        assert validate_example(example) == []

    def test_four_answers(self, example):
        bad = _rebuild(
            example,
            answer_tokens=example.answer_tokens[:4],
            answer_features=example.answer_features[:4],
            gt_answer_idx=min(example.gt_answer_idx, 3),
        )
        violations = validate_example(bad)
        assert any("expected 5, got 4" in v for v in violations)

    def test_span_out_of_range(self, example):
        T = example.num_frames
        bad = _rebuild(example, gt_span=TimeSpan(T - 1, T), concept_annotations=())
        violations = validate_example(bad)
        assert any("gt_span.end_idx out of range" in v for v in violations)

    def test_concept_frame_outside_span(self, example):
        ann = example.concept_annotations[0]
        outside = (example.gt_span.end_idx + 1) % example.num_frames
        if example.gt_span.start_idx <= outside <= example.gt_span.end_idx:
            outside = (example.gt_span.start_idx - 1) % example.num_frames
        bad_ann = type(ann)(
            word_index=ann.word_index, frame_idx=outside, gt_boxes=ann.gt_boxes
        )
        bad = _rebuild(example, concept_annotations=(bad_ann,))
        assert any("outside" in v and "gt_span" in v for v in validate_example(bad))

    def test_config_aware_checks(self, example, small_config):
        assert validate_example(example, small_config) == []
        tight = ModelConfig(
            d=16, d_vis=16, d_txt=24, max_objects=1, batch_size=2, seed=0
        )
        assert any("max_objects" in v for v in validate_example(example, tight))

    def test_pure(self, example):
        first = validate_example(example)
        second = validate_example(example)
        assert first == second == []


class TestImmutability:
    def test_features_read_only(self, example):
        with pytest.raises(ValueError):
            example.question_features[0, 0] = 1.0

    def test_frozen_fields(self, example):
        with pytest.raises(AttributeError):
            example.gt_answer_idx = 0
