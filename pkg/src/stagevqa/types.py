"""Core data model: spans, boxes, frames, QA examples, and configuration.

Geometry value types (:class:`TimeSpan`, :class:`BoundingBox`) enforce their
own invariants at construction. Example-level and cross-field rules are
checked by :func:`validate_example`, which reports violations as data so that
malformed inputs can be inspected rather than raised on.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _as_feature_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    if a.ndim != 2:
        if a.size == 0:
            a = a.reshape(0, 0)
        else:
            raise ValueError(f"expected a 2-D feature matrix, got shape {a.shape}")
    return _freeze(a)


@dataclass(frozen=True, order=True)
class TimeSpan:
    """Inclusive interval of 0-based frame indices."""

    start_idx: int
    end_idx: int

    def __post_init__(self):
        if not (0 <= self.start_idx <= self.end_idx):
            raise ValueError(
                f"invalid span ({self.start_idx}, {self.end_idx}): "
                "need 0 <= start_idx <= end_idx"
            )

    @property
    def length(self) -> int:
        return self.end_idx - self.start_idx + 1

    def as_tuple(self) -> tuple[int, int]:
        return (self.start_idx, self.end_idx)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image pixel coordinates, corners (x1,y1)-(x2,y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2}): "
                "need x1 < x2 and y1 < y2"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True, eq=False)
class ObjectRegionFeature:
    """One detected object region: its box and its pooled visual feature."""

    box: BoundingBox
    feature: np.ndarray  # (d_vis,)

    def __post_init__(self):
        object.__setattr__(
            self, "feature", _freeze(np.asarray(self.feature, dtype=np.float32).ravel())
        )

    def __eq__(self, other):
        if not isinstance(other, ObjectRegionFeature):
            return NotImplemented
        return self.box == other.box and np.array_equal(self.feature, other.feature)


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """One sampled video frame with its objects and aligned subtitle window."""

    frame_idx: int
    objects: tuple[ObjectRegionFeature, ...]
    subtitle_tokens: tuple[str, ...]
    subtitle_features: np.ndarray  # (len(subtitle_tokens), d_txt)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "subtitle_tokens", tuple(self.subtitle_tokens))
        object.__setattr__(
            self, "subtitle_features", _as_feature_matrix(self.subtitle_features)
        )

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return (
            self.frame_idx == other.frame_idx
            and self.objects == other.objects
            and self.subtitle_tokens == other.subtitle_tokens
            and np.array_equal(self.subtitle_features, other.subtitle_features)
        )


@dataclass(frozen=True)
class ConceptAnnotation:
    """Ground-truth grounding: a concept word linked to boxes in one frame.

    ``word_index`` addresses the token inside the ground-truth hypothesis
    (question tokens followed by the correct answer's tokens).
    """

    word_index: int
    frame_idx: int
    gt_boxes: tuple[BoundingBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))


@dataclass(frozen=True, eq=False)
class Hypothesis:
    """Question tokens concatenated with one candidate answer's tokens."""

    tokens: tuple[str, ...]
    features: np.ndarray  # (len(tokens), d_txt)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "features", _as_feature_matrix(self.features))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other):
        if not isinstance(other, Hypothesis):
            return NotImplemented
        return self.tokens == other.tokens and np.array_equal(
            self.features, other.features
        )


@dataclass(frozen=True, eq=False)
class QAExample:
    """One question with five candidate answers plus its grounded supervision."""

    qid: str
    question_tokens: tuple[str, ...]
    answer_tokens: tuple[tuple[str, ...], ...]  # 5 token sequences
    question_features: np.ndarray  # (len(question_tokens), d_txt)
    answer_features: tuple[np.ndarray, ...]  # 5 matrices (len(tokens_k), d_txt)
    gt_answer_idx: int
    gt_span: TimeSpan
    frames: tuple[FrameRecord, ...]
    concept_annotations: tuple[ConceptAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "question_tokens", tuple(self.question_tokens))
        object.__setattr__(
            self, "answer_tokens", tuple(tuple(a) for a in self.answer_tokens)
        )
        object.__setattr__(
            self, "question_features", _as_feature_matrix(self.question_features)
        )
        object.__setattr__(
            self,
            "answer_features",
            tuple(_as_feature_matrix(a) for a in self.answer_features),
        )
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(
            self, "concept_annotations", tuple(self.concept_annotations)
        )

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def num_answers(self) -> int:
        return len(self.answer_tokens)

    def hypothesis(self, k: int) -> Hypothesis:
        """Question followed by answer ``k``, with stacked token features."""
        tokens = self.question_tokens + self.answer_tokens[k]
        feats = np.concatenate(
            [self.question_features, self.answer_features[k]], axis=0
        )
        return Hypothesis(tokens=tokens, features=feats)

    def hypotheses(self) -> list[Hypothesis]:
        return [self.hypothesis(k) for k in range(self.num_answers)]

    def __eq__(self, other):
        if not isinstance(other, QAExample):
            return NotImplemented
        return (
            self.qid == other.qid
            and self.question_tokens == other.question_tokens
            and self.answer_tokens == other.answer_tokens
            and np.array_equal(self.question_features, other.question_features)
            and len(self.answer_features) == len(other.answer_features)
            and all(
                np.array_equal(a, b)
                for a, b in zip(self.answer_features, other.answer_features)
            )
            and self.gt_answer_idx == other.gt_answer_idx
            and self.gt_span == other.gt_span
            and self.frames == other.frames
            and self.concept_annotations == other.concept_annotations
        )


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyperparameters.

    Defaults reproduce the reference configuration: 128-d hidden size,
    kernel-7 input encoder and kernel-5 fusion encoder with two conv units
    each, loss weights 0.1 (attention) / 0.5 (span), Adam at lr 1e-3 with
    weight decay 3e-7, batches of 16 questions, up to 100 epochs with
    patience 5. ``early_stop_patience <= 0`` disables early stopping.
    """

    d: int = 128
    d_vis: int = 300
    d_txt: int = 768
    max_objects: int = 20
    n_conv: int = 2
    kernel_input: int = 7
    kernel_fusion: int = 5
    w_att: float = 0.1
    w_span: float = 0.5
    box_score_threshold: float = 0.2
    iou_positive_threshold: float = 0.5
    negatives_per_positive: int = 2
    lr: float = 1e-3
    weight_decay: float = 3e-7
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "d_vis", "d_txt", "max_objects", "n_conv"):
            if getattr(self, name) < (0 if name == "n_conv" else 1):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("kernel_input", "kernel_fusion"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be a positive odd kernel, got {k}")
        for name in ("box_score_threshold", "iou_positive_threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def validate_example(ex: QAExample, config: ModelConfig | None = None) -> list[str]:
    """Check every cross-field invariant of a :class:`QAExample`.

    Returns an empty list iff the example is well formed; otherwise one
    human-readable violation per broken rule. Pure: never raises on bad
    data, never mutates the example. When ``config`` is given, feature
    dimensions and per-frame object counts are checked against it as well.
    """
    v: list[str] = []
    n_ans = len(ex.answer_tokens)
    if n_ans != 5:
        v.append(f"answers: expected 5, got {n_ans}")
    if len(ex.answer_features) != n_ans:
        v.append(
            f"answer_features: expected {n_ans} matrices, got {len(ex.answer_features)}"
        )
    if not (0 <= ex.gt_answer_idx < max(n_ans, 1)):
        v.append(f"gt_answer_idx: {ex.gt_answer_idx} outside [0, {n_ans - 1}]")

    T = ex.num_frames
    if T == 0:
        v.append("frames: example has no frames")
    if ex.gt_span.end_idx >= T:
        v.append("gt_span.end_idx out of range")

    if ex.question_features.shape[0] != len(ex.question_tokens):
        v.append(
            f"question_features: {ex.question_features.shape[0]} rows for "
            f"{len(ex.question_tokens)} tokens"
        )
    d_txt = ex.question_features.shape[1] if ex.question_features.size else None
    for k, (toks, feats) in enumerate(zip(ex.answer_tokens, ex.answer_features)):
        if feats.shape[0] != len(toks):
            v.append(f"answer_features[{k}]: {feats.shape[0]} rows for {len(toks)} tokens")
        if d_txt is not None and feats.size and feats.shape[1] != d_txt:
            v.append(f"answer_features[{k}]: dim {feats.shape[1]} != question dim {d_txt}")

    d_vis = None
    for t, fr in enumerate(ex.frames):
        if fr.frame_idx != t:
            v.append(f"frames[{t}].frame_idx: expected {t}, got {fr.frame_idx}")
        if len(fr.subtitle_tokens) != fr.subtitle_features.shape[0]:
            v.append(
                f"frames[{t}].subtitle_features: {fr.subtitle_features.shape[0]} rows "
                f"for {len(fr.subtitle_tokens)} tokens"
            )
        if d_txt is not None and fr.subtitle_features.size and fr.subtitle_features.shape[1] != d_txt:
            v.append(f"frames[{t}].subtitle_features: dim {fr.subtitle_features.shape[1]} != {d_txt}")
        for r, obj in enumerate(fr.objects):
            if d_vis is None:
                d_vis = obj.feature.shape[0]
            elif obj.feature.shape[0] != d_vis:
                v.append(f"frames[{t}].objects[{r}]: feature dim {obj.feature.shape[0]} != {d_vis}")
        if config is not None and len(fr.objects) > config.max_objects:
            v.append(
                f"frames[{t}].objects: {len(fr.objects)} exceeds max_objects {config.max_objects}"
            )

    if config is not None:
        if d_txt is not None and d_txt != config.d_txt:
            v.append(f"text feature dim {d_txt} != config.d_txt {config.d_txt}")
        if d_vis is not None and d_vis != config.d_vis:
            v.append(f"visual feature dim {d_vis} != config.d_vis {config.d_vis}")

    gt_len = (
        len(ex.question_tokens) + len(ex.answer_tokens[ex.gt_answer_idx])
        if 0 <= ex.gt_answer_idx < n_ans
        else len(ex.question_tokens)
    )
    for i, ann in enumerate(ex.concept_annotations):
        if not (0 <= ann.word_index < gt_len):
            v.append(
                f"concept_annotations[{i}].word_index: {ann.word_index} outside "
                f"hypothesis length {gt_len}"
            )
        if not (ex.gt_span.start_idx <= ann.frame_idx <= ex.gt_span.end_idx):
            v.append(
                f"concept_annotations[{i}].frame_idx: {ann.frame_idx} outside "
                f"gt_span [{ex.gt_span.start_idx}, {ex.gt_span.end_idx}]"
            )
        if len(ann.gt_boxes) == 0:
            v.append(f"concept_annotations[{i}].gt_boxes: empty")
    return v
