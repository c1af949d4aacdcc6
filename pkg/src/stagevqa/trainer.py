"""Training loop (Adam, early stopping on validation QA accuracy),
evaluation driver for the four metrics, and checkpoint files."""

from __future__ import annotations

import copy
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import ingest
from .ingest import DatasetError
from .losses import example_losses
from .metrics import (
    EvalReport,
    GroundingPrediction,
    GroundingTruth,
    QuestionRecord,
    box_iou,
    build_report,
)
from .model import STAGE, predict_boxes
from .types import ModelConfig, QAExample

CKPT_MAGIC = b"STGC"
CKPT_VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file is missing, corrupt, or from an unknown version."""


def build_model(config: ModelConfig) -> STAGE:
    """Construct a model with seed-determined fan-in-uniform initialization."""
    torch.manual_seed(config.seed)
    return STAGE(config)


def train(
    train_examples: Sequence[QAExample],
    val_examples: Sequence[QAExample],
    config: ModelConfig,
) -> tuple[dict, list[dict]]:
    """Optimize the total loss with Adam; early-stop on validation QA accuracy.

    Stops when accuracy has not strictly improved for
    ``config.early_stop_patience`` consecutive epochs (<= 0 disables) or at
    ``config.max_epochs``. Returns the parameters of the best-validation
    epoch and a per-epoch history of mean losses and validation accuracy.
    Deterministic given ``config.seed``: initialization, epoch shuffling,
    and negative sampling all derive from it.
    """
    if not train_examples:
        raise ValueError("empty training dataset")
    if not val_examples:
        raise ValueError("empty validation dataset")

    model = build_model(config)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    order_rng = np.random.default_rng([config.seed, 0])
    sample_rng = np.random.default_rng([config.seed, 1])

    best_acc = -1.0
    best_state = copy.deepcopy(model.state_dict())
    epochs_since_improvement = 0
    history: list[dict] = []

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = order_rng.permutation(len(train_examples))
        sums = {"l_ans": 0.0, "l_att": 0.0, "l_span": 0.0, "total": 0.0}
        for lo in range(0, len(order), config.batch_size):
            batch = [train_examples[i] for i in order[lo : lo + config.batch_size]]
            optimizer.zero_grad()
            batch_total = None
            for ex in batch:
                out = model(ex, mode="train")
                breakdown = example_losses(out, ex, config, sample_rng)
                batch_total = (
                    breakdown.total if batch_total is None else batch_total + breakdown.total
                )
                for key, val in breakdown.detached().items():
                    sums[key] += val
            (batch_total / len(batch)).backward()
            optimizer.step()

        report = evaluate(val_examples, model, config)
        improved = report.qa_acc > best_acc
        if improved:
            best_acc = report.qa_acc
            best_state = copy.deepcopy(model.state_dict())
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1

        n = len(train_examples)
        history.append(
            {
                "epoch": epoch,
                "train_l_ans": sums["l_ans"] / n,
                "train_l_att": sums["l_att"] / n,
                "train_l_span": sums["l_span"] / n,
                "train_total": sums["total"] / n,
                "val_qa_acc": report.qa_acc,
                "improved": improved,
            }
        )
        if 0 < config.early_stop_patience <= epochs_since_improvement:
            break
    return best_state, history


def _resolve_model(params, config: ModelConfig) -> STAGE:
    if isinstance(params, STAGE):
        return params
    model = STAGE(config)
    model.load_state_dict(params)
    return model


def _threshold_matches(pred_boxes, gt_boxes, iou_thresh: float) -> tuple[int, int]:
    # Greedy one-to-one matching of score-ranked predictions to GT boxes.
    matched = set()
    tp = fp = 0
    for box in pred_boxes:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gt_boxes):
            if j in matched:
                continue
            iou = box_iou(box, g)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched.add(best_j)
            tp += 1
        else:
            fp += 1
    return tp, fp


def evaluate(examples: Sequence[QAExample], params, config: ModelConfig) -> EvalReport:
    """Run inference and score QA accuracy, temporal mIoU, ASA, and mAP.

    The evaluated span is always the top-1 proposal of the *predicted*
    answer's hypothesis. Grounding is scored on the GT hypothesis'
    attention, restricted to annotated words and frames: the full ranked
    scores feed mAP while the ``box_score_threshold`` selections feed the
    per-question true/false-positive counts. Read-only on the parameters.
    """
    model = _resolve_model(params, config)
    model.eval()
    records: list[QuestionRecord] = []
    grounding_preds: list[GroundingPrediction] = []
    grounding_gts: list[GroundingTruth] = []

    with torch.no_grad():
        for ex in examples:
            out = model(ex, mode="infer")
            pred_k = int(torch.argmax(out.answer_probs).item())
            pred_span = out.proposals[pred_k][0].span

            gt_tokens = ex.hypothesis(ex.gt_answer_idx).tokens
            pairs = [(a.word_index, a.frame_idx) for a in ex.concept_annotations]
            selections = predict_boxes(
                out.attention_norm[ex.gt_answer_idx],
                out.obj_mask,
                threshold=config.box_score_threshold,
                pairs=pairs,
            )
            box_tp = box_fp = 0
            for ann, sel in zip(ex.concept_annotations, selections):
                word = gt_tokens[ann.word_index]
                frame_objects = ex.frames[ann.frame_idx].objects
                for obj_idx, score in zip(sel.object_indices, sel.scores):
                    grounding_preds.append(
                        GroundingPrediction(
                            qid=ex.qid,
                            word=word,
                            frame_idx=ann.frame_idx,
                            box=frame_objects[obj_idx].box,
                            score=score,
                        )
                    )
                grounding_gts.append(
                    GroundingTruth(
                        qid=ex.qid, word=word, frame_idx=ann.frame_idx, boxes=ann.gt_boxes
                    )
                )
                ranked_selected = [
                    frame_objects[r].box for r in sel.object_indices if r in sel.selected
                ]
                tp, fp = _threshold_matches(
                    ranked_selected, list(ann.gt_boxes), config.iou_positive_threshold
                )
                box_tp += tp
                box_fp += fp

            records.append(
                QuestionRecord(
                    qid=ex.qid,
                    pred_answer_idx=pred_k,
                    gt_answer_idx=ex.gt_answer_idx,
                    pred_span=pred_span,
                    gt_span=ex.gt_span,
                    question_type=ex.question_tokens[0].lower() if ex.question_tokens else "",
                    box_tp=box_tp,
                    box_fp=box_fp,
                )
            )
    return build_report(
        records, grounding_preds, grounding_gts, iou_thresh=config.iou_positive_threshold
    )


def save_checkpoint(params, config: ModelConfig, path: str | Path) -> None:
    """Write a versioned checkpoint: config echo plus named float32 arrays."""
    state = params.state_dict() if isinstance(params, STAGE) else params
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        ingest.write_magic(f, CKPT_MAGIC, CKPT_VERSION)
        ingest.write_str(f, json.dumps(config.to_dict(), sort_keys=True))
        ingest.write_u32(f, len(state))
        for name, tensor in state.items():
            ingest.write_str(f, name)
            ingest.write_array(f, tensor.detach().cpu().numpy())


def load_checkpoint(path: str | Path) -> tuple[dict, ModelConfig]:
    """Read a checkpoint back as (state_dict, config); bit-exact arrays."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with open(path, "rb") as f:
            ingest.read_magic(f, CKPT_MAGIC, CKPT_VERSION)
            config = ModelConfig.from_dict(json.loads(ingest.read_str(f)))
            n = ingest.read_u32(f)
            state = {}
            for _ in range(n):
                name = ingest.read_str(f)
                state[name] = torch.from_numpy(ingest.read_array(f))
    except (DatasetError, struct.error, json.JSONDecodeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    return state, config
