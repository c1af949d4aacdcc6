"""The STAGE network: encode hypotheses/subtitles/objects, attend from QA
words to both modalities, fuse, localize a temporal span per hypothesis,
and score the five candidate answers from local+global pooled features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .blocks import ConvEncoder, LinearReLU, masked_maxpool, masked_softmax
from .metrics import span_iou
from .types import ModelConfig, QAExample, TimeSpan


@dataclass(frozen=True)
class SpanProposal:
    """A candidate span ranked by p_start[st] * p_end[ed]."""

    span: TimeSpan
    confidence: float


@dataclass
class ExampleTensors:
    """One example padded to its own max lengths with validity masks.

    Frames form a valid prefix of the T axis; the other masks may be ragged.
    """

    hyp_feats: Tensor  # (5, Lh, d_txt)
    hyp_mask: Tensor  # (5, Lh) bool
    sub_feats: Tensor  # (T, Ls, d_txt)
    sub_mask: Tensor  # (T, Ls) bool
    obj_feats: Tensor  # (T, No, d_vis)
    obj_mask: Tensor  # (T, No) bool
    frame_mask: Tensor  # (T,) bool


@dataclass
class ModelOutput:
    """Forward-pass results; tensors keep gradients for the training losses."""

    answer_probs: Tensor  # (5,)
    start_probs: Tensor  # (5, T)
    end_probs: Tensor  # (5, T)
    proposals: list[list[SpanProposal]]  # per hypothesis, confidence-ranked
    attention_raw: Tensor  # (5, T, Lh, No) object-attention logits
    attention_norm: Tensor  # (5, T, Lh, No) rows softmaxed over valid objects
    hyp_mask: Tensor  # (5, Lh)
    obj_mask: Tensor  # (T, No)
    frame_mask: Tensor  # (T,)
    training_proposals: list[TimeSpan] | None = None  # train mode only


@dataclass(frozen=True)
class BoxSelection:
    """Thresholded and fully-ranked attention over one (word, frame) slot."""

    word_index: int
    frame_idx: int
    selected: tuple[int, ...]  # object indices with score above threshold
    object_indices: tuple[int, ...]  # all valid object indices of the frame
    scores: tuple[float, ...]  # matching normalized attention scores


def tensorize(
    ex: QAExample,
    d_vis: int,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> ExampleTensors:
    """Pad an example's ragged axes into masked tensors."""
    hyps = ex.hypotheses()
    d_txt = ex.question_features.shape[1]
    n_hyp = len(hyps)
    T = ex.num_frames

    lh = max(len(h) for h in hyps)
    hyp_feats = np.zeros((n_hyp, lh, d_txt), dtype=np.float32)
    hyp_mask = np.zeros((n_hyp, lh), dtype=bool)
    for k, h in enumerate(hyps):
        hyp_feats[k, : len(h)] = h.features
        hyp_mask[k, : len(h)] = True

    ls = max((len(fr.subtitle_tokens) for fr in ex.frames), default=0)
    sub_feats = np.zeros((T, ls, d_txt), dtype=np.float32)
    sub_mask = np.zeros((T, ls), dtype=bool)
    no = max((len(fr.objects) for fr in ex.frames), default=0)
    obj_feats = np.zeros((T, no, d_vis), dtype=np.float32)
    obj_mask = np.zeros((T, no), dtype=bool)
    for t, fr in enumerate(ex.frames):
        n_tok = len(fr.subtitle_tokens)
        if n_tok:
            sub_feats[t, :n_tok] = fr.subtitle_features
            sub_mask[t, :n_tok] = True
        for r, obj in enumerate(fr.objects):
            if obj.feature.shape[0] != d_vis:
                raise ValueError(
                    f"object feature dim {obj.feature.shape[0]} != expected {d_vis}"
                )
            obj_feats[t, r] = obj.feature
            obj_mask[t, r] = True

    as_t = lambda a: torch.tensor(a, dtype=dtype, device=device)
    as_b = lambda a: torch.tensor(a, dtype=torch.bool, device=device)
    return ExampleTensors(
        hyp_feats=as_t(hyp_feats),
        hyp_mask=as_b(hyp_mask),
        sub_feats=as_t(sub_feats),
        sub_mask=as_b(sub_mask),
        obj_feats=as_t(obj_feats),
        obj_mask=as_b(obj_mask),
        frame_mask=torch.ones(T, dtype=torch.bool, device=device),
    )


def qa_guided_attention(
    hyp: Tensor, ctx: Tensor, ctx_mask: Tensor | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Word-to-context matching scores, their row softmax, and the attended
    context: scores = hyp @ ctx^T, attended = softmax(scores) @ ctx.

    Shapes broadcast: hyp (..., L, d) against ctx (..., N, d) with mask
    (..., N). With zero context positions the attended output is a zero
    matrix and the normalized map is empty.
    """
    scores = hyp @ ctx.transpose(-1, -2)  # (..., L, N)
    mask = ctx_mask.unsqueeze(-2) if ctx_mask is not None else None
    norm = masked_softmax(scores, mask, dim=-1)
    return scores, norm, norm @ ctx


def propose_spans(p_start, p_end, top_n: int = 5) -> list[SpanProposal]:
    """Rank (st <= ed) span candidates by p_start[st] * p_end[ed].

    The best pair comes from the linear scan that tracks the running argmax
    of p_start while advancing ed; the remainder is filled by exhaustive
    ranking, which is fine at the sequence lengths seen here. Ties break
    toward smaller st, then smaller ed.
    """
    p1 = np.asarray(p_start, dtype=np.float64).ravel()
    p2 = np.asarray(p_end, dtype=np.float64).ravel()
    if p1.shape != p2.shape or p1.size == 0:
        raise ValueError(f"invalid span distributions: {p1.shape} vs {p2.shape}")
    T = p1.size

    best_st = 0
    best: tuple[float, int, int] | None = None
    for ed in range(T):
        if p1[ed] > p1[best_st]:
            best_st = ed
        conf = p1[best_st] * p2[ed]
        if (
            best is None
            or conf > best[0]
            or (conf == best[0] and (best_st, ed) < (best[1], best[2]))
        ):
            best = (conf, best_st, ed)

    proposals = [SpanProposal(TimeSpan(best[1], best[2]), float(best[0]))]
    if top_n > 1:
        ranked = sorted(
            (
                (float(p1[st] * p2[ed]), st, ed)
                for st in range(T)
                for ed in range(st, T)
            ),
            key=lambda c: (-c[0], c[1], c[2]),
        )
        for conf, st, ed in ranked:
            if len(proposals) >= top_n:
                break
            if (st, ed) == (best[1], best[2]):
                continue
            proposals.append(SpanProposal(TimeSpan(st, ed), conf))
    return proposals


def build_training_proposals(
    proposals: list[SpanProposal],
    gt_span: TimeSpan,
    iou_threshold: float = 0.5,
    max_count: int = 3,
) -> list[TimeSpan]:
    """The GT span plus the highest-confidence proposals overlapping it at
    IoU >= ``iou_threshold``, deduplicated, at most ``max_count`` total."""
    out = [gt_span]
    for p in proposals:
        if len(out) >= max_count:
            break
        if p.span == gt_span:
            continue
        if span_iou(p.span, gt_span) >= iou_threshold:
            out.append(p.span)
    return out


def predict_boxes(
    attention_norm,
    obj_mask,
    threshold: float = 0.2,
    pairs: list[tuple[int, int]] | None = None,
) -> list[BoxSelection]:
    """Select objects whose normalized attention exceeds ``threshold``.

    ``attention_norm`` is one hypothesis' (T, Lh, No) map; ``pairs`` limits
    the output to given (word_index, frame_idx) slots (default: all of
    them). Full ranked scores are retained alongside the selection.
    """
    attn = np.asarray(
        attention_norm.detach().cpu().numpy()
        if isinstance(attention_norm, Tensor)
        else attention_norm,
        dtype=np.float64,
    )
    mask = np.asarray(
        obj_mask.detach().cpu().numpy() if isinstance(obj_mask, Tensor) else obj_mask,
        dtype=bool,
    )
    T, lh, _ = attn.shape
    if pairs is None:
        pairs = [(w, t) for t in range(T) for w in range(lh)]
    out = []
    for w, t in pairs:
        valid = np.flatnonzero(mask[t])
        scores = attn[t, w, valid]
        order = np.argsort(-scores, kind="stable")
        out.append(
            BoxSelection(
                word_index=w,
                frame_idx=t,
                selected=tuple(int(r) for r in valid[scores > threshold]),
                object_indices=tuple(int(r) for r in valid[order]),
                scores=tuple(float(s) for s in scores[order]),
            )
        )
    return out


class STAGE(nn.Module):
    """Spatio-Temporal Answerer with Grounded Evidence.

    One shared kernel-7 conv encoder contextualizes the projected raw
    inputs (with positional encoding on word and frame axes, without it on
    the unordered object axis); a kernel-5 encoder contextualizes the fused
    per-frame representation over time.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d
        self.text_proj = LinearReLU(config.d_txt, d)
        self.vis_proj = LinearReLU(config.d_vis, d)
        self.input_encoder = ConvEncoder(d, config.kernel_input, config.n_conv, use_pe=True)
        self.fusion_proj = nn.Linear(3 * d, d)
        self.fused_encoder = ConvEncoder(d, config.kernel_fusion, config.n_conv, use_pe=True)
        self.start_head = nn.Linear(d, 1)
        self.end_head = nn.Linear(d, 1)
        self.span_proj = nn.Linear(d, d)
        self.answer_head = nn.Linear(2 * d, 1)

    # -- stages of the forward pass, individually callable -----------------

    def encode_inputs(self, t: ExampleTensors) -> tuple[Tensor, Tensor, Tensor]:
        """Project and contextualize hypotheses, subtitles, and objects."""
        hyp = self.input_encoder(self.text_proj(t.hyp_feats), t.hyp_mask)
        sub = self.input_encoder(self.text_proj(t.sub_feats), t.sub_mask)
        obj = self.input_encoder(self.vis_proj(t.obj_feats), t.obj_mask, add_pe=False)
        return hyp, sub, obj

    def video_text_fusion(self, sub_att: Tensor, vis_att: Tensor) -> Tensor:
        """[S; V; S*V] through one affine map back to d dimensions."""
        if sub_att.shape != vis_att.shape:
            raise ValueError(f"fusion shape mismatch: {sub_att.shape} vs {vis_att.shape}")
        return self.fusion_proj(torch.cat([sub_att, vis_att, sub_att * vis_att], dim=-1))

    def fuse_and_encode(
        self, fused: Tensor, hyp_mask: Tensor, frame_mask: Tensor
    ) -> Tensor:
        """Max-pool the fused (5, T, Lh, d) stack over words, then run the
        kernel-5 conv encoder along time: returns (5, T, d)."""
        pooled = masked_maxpool(fused, hyp_mask.unsqueeze(1))
        return self.fused_encoder(pooled, frame_mask.unsqueeze(0))

    def span_logits(
        self, fused_seq: Tensor, frame_mask: Tensor | None = None
    ) -> tuple[Tensor, Tensor]:
        """Per-frame start/end distributions from two affine heads."""
        mask = frame_mask.unsqueeze(0) if frame_mask is not None else None
        p_start = masked_softmax(self.start_head(fused_seq).squeeze(-1), mask, dim=-1)
        p_end = masked_softmax(self.end_head(fused_seq).squeeze(-1), mask, dim=-1)
        return p_start, p_end

    def local_global_pool(
        self, fused_seq_k: Tensor, span: TimeSpan, frame_mask: Tensor | None = None
    ) -> Tensor:
        """[local; global] max-pools of the linearly re-encoded sequence."""
        T = fused_seq_k.shape[0]
        if span.end_idx >= T:
            raise ValueError(f"span {span.as_tuple()} outside sequence of length {T}")
        enc = self.span_proj(fused_seq_k)
        g_global = masked_maxpool(enc, frame_mask)
        local_mask = frame_mask[span.start_idx : span.end_idx + 1] if frame_mask is not None else None
        g_local = masked_maxpool(enc[span.start_idx : span.end_idx + 1], local_mask)
        return torch.cat([g_local, g_global], dim=-1)

    def answer_scores(self, pooled: Tensor) -> Tensor:
        """Softmax over the five hypotheses' shared-head scores."""
        return torch.softmax(self.answer_head(pooled).squeeze(-1), dim=-1)

    # -- full forward -------------------------------------------------------

    def forward(self, ex: QAExample, mode: str = "infer") -> ModelOutput:
        dtype = next(self.parameters()).dtype
        device = next(self.parameters()).device
        tensors = tensorize(ex, self.config.d_vis, dtype=dtype, device=device)
        return self.forward_tensors(
            tensors,
            mode=mode,
            gt_span=ex.gt_span if mode == "train" else None,
            gt_answer_idx=ex.gt_answer_idx if mode == "train" else None,
        )

    def forward_tensors(
        self,
        t: ExampleTensors,
        mode: str = "infer",
        gt_span: TimeSpan | None = None,
        gt_answer_idx: int | None = None,
    ) -> ModelOutput:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "train" and (gt_span is None or gt_answer_idx is None):
            raise ValueError("train mode needs gt_span and gt_answer_idx")

        hyp, sub, obj = self.encode_inputs(t)
        attn_raw, attn_norm, vis_att = qa_guided_attention(
            hyp.unsqueeze(1), obj.unsqueeze(0), t.obj_mask.unsqueeze(0)
        )
        _, _, sub_att = qa_guided_attention(
            hyp.unsqueeze(1), sub.unsqueeze(0), t.sub_mask.unsqueeze(0)
        )
        fused = self.video_text_fusion(sub_att, vis_att)
        fused_seq = self.fuse_and_encode(fused, t.hyp_mask, t.frame_mask)
        p_start, p_end = self.span_logits(fused_seq, t.frame_mask)

        n_valid = int(t.frame_mask.sum())
        if n_valid == 0 or not bool(t.frame_mask[:n_valid].all()):
            raise ValueError("frame_mask must be a non-empty valid prefix")
        p1 = p_start.detach().cpu().numpy()
        p2 = p_end.detach().cpu().numpy()
        proposals = [
            propose_spans(p1[k, :n_valid], p2[k, :n_valid], top_n=5)
            for k in range(hyp.shape[0])
        ]

        # Both modes pool each hypothesis over its own top-1 proposal.
        pooled = torch.stack(
            [
                self.local_global_pool(fused_seq[k], props[0].span, t.frame_mask)
                for k, props in enumerate(proposals)
            ]
        )
        answer_probs = self.answer_scores(pooled)

        training_proposals = None
        if mode == "train":
            training_proposals = build_training_proposals(
                proposals[gt_answer_idx],
                gt_span,
                iou_threshold=self.config.iou_positive_threshold,
            )
        return ModelOutput(
            answer_probs=answer_probs,
            start_probs=p_start,
            end_probs=p_end,
            proposals=proposals,
            attention_raw=attn_raw,
            attention_norm=attn_norm,
            hyp_mask=t.hyp_mask,
            obj_mask=t.obj_mask,
            frame_mask=t.frame_mask,
            training_proposals=training_proposals,
        )
