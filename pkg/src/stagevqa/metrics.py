"""Evaluation metrics: QA accuracy, temporal mIoU, answer-span joint
accuracy, and PASCAL-VOC-style grounding mAP, plus the IoU primitives
they are built on."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .types import BoundingBox, TimeSpan


def span_iou(a: TimeSpan, b: TimeSpan) -> float:
    """Intersection-over-union of two inclusive frame-index intervals.

    Counted in whole frames: [2, 6] vs [4, 8] share frames {4, 5, 6} out of
    {2..8}, giving 3/7.
    """
    inter = min(a.end_idx, b.end_idx) - max(a.start_idx, b.start_idx) + 1
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Area intersection-over-union of two boxes; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def qa_accuracy(preds: list[int], gts: list[int]) -> float:
    """Fraction of exact answer-index matches."""
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(gts)} gts")
    if not preds:
        return 0.0
    return sum(p == g for p, g in zip(preds, gts)) / len(preds)


@dataclass(frozen=True)
class QuestionRecord:
    """Per-question evaluation facts consumed by the aggregate metrics.

    ``pred_span`` is the top-1 span attached to the *predicted* answer's
    hypothesis, right or wrong.
    """

    qid: str
    pred_answer_idx: int
    gt_answer_idx: int
    pred_span: TimeSpan
    gt_span: TimeSpan
    question_type: str = ""
    box_tp: int = 0
    box_fp: int = 0

    @property
    def answer_correct(self) -> bool:
        return self.pred_answer_idx == self.gt_answer_idx

    @property
    def iou(self) -> float:
        return span_iou(self.pred_span, self.gt_span)


def temporal_miou(records: list[QuestionRecord]) -> float:
    """Mean temporal IoU of the predicted answer's span against the GT span."""
    if not records:
        return 0.0
    return float(np.mean([r.iou for r in records]))


def answer_span_joint_accuracy(
    records: list[QuestionRecord], iou_thresh: float = 0.5
) -> float:
    """Fraction of questions answered correctly AND localized at IoU >= 0.5."""
    if not records:
        return 0.0
    hits = sum(1 for r in records if r.answer_correct and r.iou >= iou_thresh)
    return hits / len(records)


def qa_accuracy_by_question_type(records: list[QuestionRecord]) -> dict[str, float]:
    """QA accuracy grouped by question type (the question's first word)."""
    grouped: dict[str, list[QuestionRecord]] = defaultdict(list)
    for r in records:
        grouped[r.question_type or "unknown"].append(r)
    return {
        qtype: sum(r.answer_correct for r in rs) / len(rs)
        for qtype, rs in sorted(grouped.items())
    }


@dataclass(frozen=True)
class GroundingPrediction:
    """One scored box prediction for a (question, concept word, frame) slot."""

    qid: str
    word: str
    frame_idx: int
    box: BoundingBox
    score: float


@dataclass(frozen=True)
class GroundingTruth:
    """Ground-truth boxes for a (question, concept word, frame) slot."""

    qid: str
    word: str
    frame_idx: int
    boxes: tuple[BoundingBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


def _average_precision(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    # All-points interpolation: integrate the precision envelope over recall.
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def grounding_map(
    predictions: list[GroundingPrediction],
    gts: list[GroundingTruth],
    iou_thresh: float = 0.5,
) -> float:
    """PASCAL-VOC-style mean average precision over concept-word classes.

    The concept word string is the class. Within each class, predictions from
    all questions and frames are ranked together by score (stable order on
    ties) and greedily matched to the not-yet-matched GT box of highest IoU
    within the same (qid, word, frame) slot; a match below ``iou_thresh`` is
    a false positive. Classes with no GT boxes are excluded; predictions on
    slots that carry no annotation are discarded from scoring.
    """
    gt_by_key: dict[tuple[str, str, int], list[BoundingBox]] = {}
    n_gt_by_class: dict[str, int] = defaultdict(int)
    for g in gts:
        if not g.boxes:
            continue
        key = (g.qid, g.word, g.frame_idx)
        gt_by_key.setdefault(key, []).extend(g.boxes)
        n_gt_by_class[g.word] += len(g.boxes)

    preds_by_class: dict[str, list[GroundingPrediction]] = defaultdict(list)
    for p in predictions:
        if (p.qid, p.word, p.frame_idx) in gt_by_key:
            preds_by_class[p.word].append(p)

    aps = []
    for cls in sorted(n_gt_by_class):
        n_gt = n_gt_by_class[cls]
        preds = sorted(
            preds_by_class.get(cls, ()), key=lambda p: -p.score
        )  # stable: input order breaks score ties
        if not preds:
            aps.append(0.0)
            continue
        matched: dict[tuple[str, str, int], set[int]] = defaultdict(set)
        tp = np.zeros(len(preds))
        fp = np.zeros(len(preds))
        for i, p in enumerate(preds):
            key = (p.qid, p.word, p.frame_idx)
            candidates = gt_by_key[key]
            best_iou, best_j = 0.0, -1
            for j, gt_box in enumerate(candidates):
                if j in matched[key]:
                    continue
                iou = box_iou(p.box, gt_box)
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= iou_thresh:
                tp[i] = 1.0
                matched[key].add(best_j)
            else:
                fp[i] = 1.0
        aps.append(_average_precision(tp, fp, n_gt))
    return float(np.mean(aps)) if aps else 0.0


@dataclass
class EvalReport:
    """The four headline metrics plus the per-question records behind them."""

    qa_acc: float
    temp_miou: float
    asa: float
    grd_map: float
    per_question: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "qa_acc": self.qa_acc,
            "temp_miou": self.temp_miou,
            "asa": self.asa,
            "grd_map": self.grd_map,
            "per_question": self.per_question,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "EvalReport":
        d = json.loads(s)
        return cls(
            qa_acc=d["qa_acc"],
            temp_miou=d["temp_miou"],
            asa=d["asa"],
            grd_map=d["grd_map"],
            per_question=d.get("per_question", []),
        )


def build_report(
    records: list[QuestionRecord],
    predictions: list[GroundingPrediction],
    gts: list[GroundingTruth],
    iou_thresh: float = 0.5,
) -> EvalReport:
    """Aggregate per-question records and grounding pools into a report."""
    per_question = [
        {
            "qid": r.qid,
            "question_type": r.question_type,
            "pred_answer_idx": r.pred_answer_idx,
            "gt_answer_idx": r.gt_answer_idx,
            "answer_correct": r.answer_correct,
            "pred_span": list(r.pred_span.as_tuple()),
            "gt_span": list(r.gt_span.as_tuple()),
            "span_iou": r.iou,
            "box_tp": r.box_tp,
            "box_fp": r.box_fp,
        }
        for r in records
    ]
    return EvalReport(
        qa_acc=qa_accuracy([r.pred_answer_idx for r in records], [r.gt_answer_idx for r in records]),
        temp_miou=temporal_miou(records),
        asa=answer_span_joint_accuracy(records, iou_thresh),
        grd_map=grounding_map(predictions, gts, iou_thresh),
        per_question=per_question,
    )
