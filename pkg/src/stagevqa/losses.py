"""Training objectives: LSE attention ranking loss, span cross-entropy,
answer cross-entropy, and their weighted combination.

Attention and span supervision apply only to the ground-truth hypothesis;
the helpers here take that hypothesis' tensors explicitly, so perturbing
any other hypothesis cannot move these losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .metrics import box_iou
from .model import ModelOutput
from .types import BoundingBox, ModelConfig, QAExample

LOG_FLOOR = 1e-12  # probability floor inside every cross-entropy


@dataclass(frozen=True)
class AttentionTarget:
    """Positive/negative object pools for one annotated (word, frame) slot."""

    word_index: int
    frame_idx: int
    positive_indices: tuple[int, ...]
    negative_indices: tuple[int, ...]

    def __post_init__(self):
        if set(self.positive_indices) & set(self.negative_indices):
            raise ValueError("positive and negative pools overlap")


@dataclass
class LossBreakdown:
    """The three objectives and their weighted sum."""

    l_ans: object
    l_att: object
    l_span: object
    total: object

    def detached(self) -> dict[str, float]:
        return {
            name: float(v.detach() if isinstance(v, Tensor) else v)
            for name, v in (
                ("l_ans", self.l_ans),
                ("l_att", self.l_att),
                ("l_span", self.l_span),
                ("total", self.total),
            )
        }


def build_attention_targets(
    ex: QAExample,
    detector_boxes: list[list[BoundingBox]] | None = None,
    iou_threshold: float = 0.5,
) -> list[AttentionTarget]:
    """Mark each frame's proposal boxes positive/negative per concept.

    A proposal is positive when its IoU with any GT box of the annotation
    reaches ``iou_threshold``; the rest of the frame's boxes form the
    negative pool. Annotations with no positive proposal are dropped.
    ``detector_boxes`` defaults to the boxes stored on the example's frames.
    """
    if detector_boxes is None:
        detector_boxes = [[o.box for o in fr.objects] for fr in ex.frames]
    targets = []
    for ann in ex.concept_annotations:
        boxes = detector_boxes[ann.frame_idx]
        positives = tuple(
            r
            for r, b in enumerate(boxes)
            if any(box_iou(b, g) >= iou_threshold for g in ann.gt_boxes)
        )
        if not positives:
            continue
        negatives = tuple(r for r in range(len(boxes)) if r not in positives)
        targets.append(
            AttentionTarget(ann.word_index, ann.frame_idx, positives, negatives)
        )
    return targets


def lse_attention_loss(
    raw_attention: Tensor,
    targets: list[AttentionTarget],
    rng: np.random.Generator,
    negatives_per_positive: int = 2,
) -> Tensor:
    """Smoothed pairwise ranking loss pushing positive-box attention above
    sampled negatives: sum of log(1 + exp(neg - pos)) over sampled pairs.

    ``raw_attention`` holds the GT hypothesis' pre-softmax scores, shape
    (T, Lh, No). Per positive, ``negatives_per_positive`` negatives are
    drawn without replacement (fewer when the pool is smaller). Zero
    targets give a zero loss.
    """
    total = raw_attention.new_zeros(())
    for tgt in targets:
        row = raw_attention[tgt.frame_idx, tgt.word_index]
        pool = np.asarray(tgt.negative_indices, dtype=np.int64)
        for pos in tgt.positive_indices:
            if pool.size == 0:
                continue
            k = min(negatives_per_positive, pool.size)
            chosen = rng.choice(pool, size=k, replace=False)
            total = total + F.softplus(row[chosen] - row[pos]).sum()
    return total


def _clamped_log(p: Tensor) -> Tensor:
    return torch.log(torch.clamp(p, min=LOG_FLOOR))


def span_cross_entropy(p_start, p_end, y_start: int, y_end: int) -> Tensor:
    """-(log p_start[y_start] + log p_end[y_end]) / 2 for one example."""
    p1 = torch.as_tensor(p_start)
    p2 = torch.as_tensor(p_end)
    if not (0 <= y_start <= y_end < p1.shape[-1]):
        raise ValueError(f"invalid span targets ({y_start}, {y_end}) for T={p1.shape[-1]}")
    return -(_clamped_log(p1[y_start]) + _clamped_log(p2[y_end])) / 2


def answer_cross_entropy(answer_probs, gt_answer_idx: int) -> Tensor:
    """-log p_ans[gt] for one example."""
    p = torch.as_tensor(answer_probs)
    if not (0 <= gt_answer_idx < p.shape[-1]):
        raise ValueError(f"gt_answer_idx {gt_answer_idx} out of range")
    return -_clamped_log(p[gt_answer_idx])


def total_loss(l_ans, l_att, l_span, w_att: float = 0.1, w_span: float = 0.5) -> LossBreakdown:
    """Weighted combination: l_ans + w_att * l_att + w_span * l_span."""
    return LossBreakdown(
        l_ans=l_ans,
        l_att=l_att,
        l_span=l_span,
        total=l_ans + w_att * l_att + w_span * l_span,
    )


def example_losses(
    output: ModelOutput,
    ex: QAExample,
    config: ModelConfig,
    rng: np.random.Generator,
) -> LossBreakdown:
    """All three objectives for one example's train-mode forward output."""
    gt = ex.gt_answer_idx
    l_ans = answer_cross_entropy(output.answer_probs, gt)
    l_span = span_cross_entropy(
        output.start_probs[gt],
        output.end_probs[gt],
        ex.gt_span.start_idx,
        ex.gt_span.end_idx,
    )
    targets = build_attention_targets(ex, iou_threshold=config.iou_positive_threshold)
    l_att = lse_attention_loss(
        output.attention_raw[gt], targets, rng, config.negatives_per_positive
    )
    return total_loss(l_ans, l_att, l_span, config.w_att, config.w_span)
