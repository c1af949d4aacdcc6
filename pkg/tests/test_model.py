import numpy as np
import pytest
import torch

from stagevqa import (
    BoundingBox,
    FrameRecord,
    ModelConfig,
    ObjectRegionFeature,
    QAExample,
    STAGE,
    TimeSpan,
    build_training_proposals,
    predict_boxes,
    propose_spans,
    qa_guided_attention,
    span_iou,
    tensorize,
)
from stagevqa.blocks import masked_maxpool
from stagevqa.model import ExampleTensors, SpanProposal

from conftest import central_difference, relative_error


def brute_force_best_span(p1, p2):
    """O(T^2) oracle: max confidence, ties to smaller st then smaller ed."""
    best = None
    for st in range(len(p1)):
        for ed in range(st, len(p1)):
            conf = p1[st] * p2[ed]
            if best is None or conf > best[0] or (conf == best[0] and (st, ed) < best[1:]):
                best = (conf, st, ed)
    return best


class TestQAGuidedAttention:
    def test_orthogonal_rows_give_uniform(self):
        hyp = torch.tensor([[1.0, 0.0, 0.0]])
        ctx = torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 2.0, 2.0]])
        _, norm, _ = qa_guided_attention(hyp, ctx)
        torch.testing.assert_close(norm, torch.full((1, 3), 1 / 3))

    def test_single_object_broadcast(self):
        hyp = torch.randn(4, 5)
        ctx = torch.randn(1, 5)
        _, norm, attended = qa_guided_attention(hyp, ctx)
        torch.testing.assert_close(norm, torch.ones(4, 1))
        torch.testing.assert_close(attended, ctx.expand(4, 5))

    def test_matches_dense_numpy_oracle(self):
        # independent reimplementation: plain matmul + softmax in numpy
        rng = np.random.default_rng(5)
        hyp = rng.normal(size=(2, 4))
        ctx = rng.normal(size=(3, 4))
        scores = hyp @ ctx.T
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        attended = probs @ ctx

        raw_t, norm_t, att_t = qa_guided_attention(
            torch.tensor(hyp), torch.tensor(ctx)
        )
        np.testing.assert_allclose(raw_t.numpy(), scores, atol=1e-12)
        np.testing.assert_allclose(norm_t.numpy(), probs, atol=1e-12)
        np.testing.assert_allclose(att_t.numpy(), attended, atol=1e-12)

    def test_empty_context(self):
        hyp = torch.randn(3, 4)
        ctx = torch.zeros(0, 4)
        raw, norm, attended = qa_guided_attention(hyp, ctx)
        assert raw.shape == (3, 0) and norm.shape == (3, 0)
        torch.testing.assert_close(attended, torch.zeros(3, 4))


class TestVideoTextFusion:
    def test_zero_inputs_zero_bias(self, double_model):
        with torch.no_grad():
            double_model.fusion_proj.bias.zero_()
        z = torch.zeros(2, 3, 16, dtype=torch.float64)
        assert double_model.video_text_fusion(z, z).abs().sum() == 0

    def test_zero_weight_gives_bias(self, double_model):
        with torch.no_grad():
            double_model.fusion_proj.weight.zero_()
        s = torch.randn(2, 3, 16, dtype=torch.float64)
        v = torch.randn(2, 3, 16, dtype=torch.float64)
        out = double_model.video_text_fusion(s, v)
        torch.testing.assert_close(out, double_model.fusion_proj.bias.expand_as(out))

    def test_shape_mismatch_rejected(self, double_model):
        with pytest.raises(ValueError):
            double_model.video_text_fusion(
                torch.zeros(2, 3, 16, dtype=torch.float64),
                torch.zeros(2, 4, 16, dtype=torch.float64),
            )

    def test_gradient_wrt_inputs(self, double_model):
        torch.manual_seed(0)
        s = torch.randn(1, 3, 16, dtype=torch.float64, requires_grad=True)
        v = torch.randn(1, 3, 16, dtype=torch.float64)
        probe = torch.randn(1, 3, 16, dtype=torch.float64)

        def scalar():
            return (double_model.video_text_fusion(s, v) * probe).sum()

        scalar().backward()
        grad = s.grad
        rng = np.random.default_rng(1)
        for flat in rng.choice(s.numel(), size=8, replace=False):
            idx = tuple(int(i) for i in np.unravel_index(flat, s.shape))
            fd = central_difference(scalar, s, idx)
            assert relative_error(grad[idx].item(), fd) < 1e-4


class TestFuseAndEncode:
    def test_single_frame_shape(self, double_model):
        fused = torch.randn(5, 1, 3, 16, dtype=torch.float64)
        mask = torch.ones(5, 3, dtype=torch.bool)
        out = double_model.fuse_and_encode(fused, mask, torch.ones(1, dtype=torch.bool))
        assert out.shape == (5, 1, 16)

    def test_constant_over_words_pools_to_constant(self, double_model):
        row = torch.randn(16, dtype=torch.float64)
        fused = row.expand(5, 2, 3, 16).clone()
        mask = torch.ones(5, 3, dtype=torch.bool)
        pooled = masked_maxpool(fused, mask.unsqueeze(1))
        torch.testing.assert_close(pooled, row.expand(5, 2, 16))

    def test_composition_matches_blocks(self, double_model):
        torch.manual_seed(1)
        fused = torch.randn(5, 4, 3, 16, dtype=torch.float64)
        hyp_mask = torch.rand(5, 3) > 0.2
        hyp_mask[:, 0] = True
        frame_mask = torch.ones(4, dtype=torch.bool)
        # oracle: apply the two independently tested blocks by hand
        pooled = masked_maxpool(fused, hyp_mask.unsqueeze(1))
        expected = double_model.fused_encoder(pooled, frame_mask.unsqueeze(0))
        torch.testing.assert_close(
            double_model.fuse_and_encode(fused, hyp_mask, frame_mask), expected
        )


class TestSpanLogits:
    def test_distributions_sum_to_one(self, double_model):
        seq = torch.randn(5, 7, 16, dtype=torch.float64)
        p1, p2 = double_model.span_logits(seq, torch.ones(7, dtype=torch.bool))
        torch.testing.assert_close(p1.sum(-1), torch.ones(5, dtype=torch.float64))
        torch.testing.assert_close(p2.sum(-1), torch.ones(5, dtype=torch.float64))

    def test_single_frame(self, double_model):
        p1, p2 = double_model.span_logits(
            torch.randn(5, 1, 16, dtype=torch.float64), torch.ones(1, dtype=torch.bool)
        )
        torch.testing.assert_close(p1, torch.ones(5, 1, dtype=torch.float64))
        torch.testing.assert_close(p2, torch.ones(5, 1, dtype=torch.float64))


class TestProposeSpans:
    def test_spec_example(self):
        p1 = [0.1, 0.5, 0.4]
        p2 = [0.2, 0.3, 0.5]
        conf, st, ed = brute_force_best_span(p1, p2)
        assert (st, ed) == (1, 2) and conf == pytest.approx(0.25)
        props = propose_spans(p1, p2, top_n=3)
        assert props[0].span.as_tuple() == (1, 2)
        assert props[0].confidence == pytest.approx(0.25)

    def test_single_frame(self):
        props = propose_spans([1.0], [1.0], top_n=4)
        assert len(props) == 1
        assert props[0].span.as_tuple() == (0, 0)
        assert props[0].confidence == pytest.approx(1.0)

    def test_matches_brute_force_on_random_distributions(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            T = int(rng.integers(1, 41))
            p1 = rng.dirichlet(np.ones(T))
            p2 = rng.dirichlet(np.ones(T))
            _, st, ed = brute_force_best_span(p1, p2)
            best = propose_spans(p1, p2, top_n=1)[0]
            assert best.span.as_tuple() == (st, ed)

    def test_ranked_descending(self):
        rng = np.random.default_rng(3)
        p1 = rng.dirichlet(np.ones(9))
        p2 = rng.dirichlet(np.ones(9))
        props = propose_spans(p1, p2, top_n=6)
        confs = [p.confidence for p in props]
        assert confs == sorted(confs, reverse=True)
        assert all(p.confidence > 0 for p in props)

    def test_tie_breaks_to_earlier_pair(self):
        props = propose_spans([0.5, 0.5], [0.5, 0.5], top_n=3)
        assert props[0].span.as_tuple() == (0, 0)
        assert [p.span.as_tuple() for p in props] == [(0, 0), (0, 1), (1, 1)]


class TestBuildTrainingProposals:
    def test_no_match_keeps_gt_only(self):
        gt = TimeSpan(2, 4)
        props = [SpanProposal(TimeSpan(7, 9), 0.5)]
        assert build_training_proposals(props, gt) == [gt]

    def test_exact_match_deduplicated(self):
        gt = TimeSpan(2, 4)
        props = [SpanProposal(TimeSpan(2, 4), 0.9), SpanProposal(TimeSpan(2, 5), 0.4)]
        out = build_training_proposals(props, gt)
        assert out[0] == gt
        assert out.count(gt) == 1
        assert TimeSpan(2, 5) in out

    def test_iou_threshold(self):
        gt = TimeSpan(0, 4)
        candidate = TimeSpan(1, 4)  # oracle: IoU 4/5 >= 0.5
        assert span_iou(candidate, gt) == pytest.approx(0.8)
        out = build_training_proposals([SpanProposal(candidate, 0.3)], gt)
        assert out == [gt, candidate]

    def test_cap_at_three(self):
        gt = TimeSpan(0, 9)
        props = [SpanProposal(TimeSpan(0, 9 - i), 0.9 - 0.1 * i) for i in range(4)]
        out = build_training_proposals(props, gt)
        assert len(out) == 3
        assert out[0] == gt


class TestLocalGlobalPool:
    def test_full_span_local_equals_global(self, double_model):
        seq = torch.randn(6, 16, dtype=torch.float64)
        g = double_model.local_global_pool(seq, TimeSpan(0, 5))
        d = 16
        torch.testing.assert_close(g[:d], g[d:])

    def test_single_frame_span(self, double_model):
        seq = torch.randn(6, 16, dtype=torch.float64)
        g = double_model.local_global_pool(seq, TimeSpan(2, 2))
        torch.testing.assert_close(g[:16], double_model.span_proj(seq[2]))

    def test_global_invariant_to_frame_order(self, double_model):
        seq = torch.randn(6, 16, dtype=torch.float64)
        perm = torch.randperm(6)
        a = double_model.local_global_pool(seq, TimeSpan(0, 5))
        b = double_model.local_global_pool(seq[perm], TimeSpan(0, 5))
        torch.testing.assert_close(a[16:], b[16:])

    def test_span_out_of_range(self, double_model):
        with pytest.raises(ValueError):
            double_model.local_global_pool(torch.randn(4, 16, dtype=torch.float64), TimeSpan(2, 4))


class TestAnswerScores:
    def test_identical_inputs_uniform(self, double_model):
        g = torch.randn(32, dtype=torch.float64).expand(5, 32)
        torch.testing.assert_close(
            double_model.answer_scores(g), torch.full((5,), 0.2, dtype=torch.float64)
        )

    def test_sums_to_one(self, double_model):
        with torch.no_grad():
            probs = double_model.answer_scores(torch.randn(5, 32, dtype=torch.float64))
        assert float(probs.sum()) == pytest.approx(1.0, abs=1e-5)

    def test_permutation_equivariant(self, double_model):
        g = torch.randn(5, 32, dtype=torch.float64)
        perm = torch.tensor([3, 0, 4, 1, 2])
        torch.testing.assert_close(
            double_model.answer_scores(g)[perm], double_model.answer_scores(g[perm])
        )

    def test_argmax_invariant_to_positive_head_rescaling(self, double_model):
        g = torch.randn(5, 32, dtype=torch.float64)
        with torch.no_grad():
            before = int(double_model.answer_scores(g).argmax())
            double_model.answer_head.weight.mul_(3.7)
            double_model.answer_head.bias.mul_(3.7)
            after = int(double_model.answer_scores(g).argmax())
        assert before == after


def _tiny_example(d_txt=8, d_vis=6):
    """T=1, one object, one subtitle token, one-token question and answers."""
    rng = np.random.default_rng(9)
    box = BoundingBox(0, 0, 10, 10)
    frame = FrameRecord(
        frame_idx=0,
        objects=(ObjectRegionFeature(box=box, feature=rng.normal(size=d_vis)),),
        subtitle_tokens=("hi",),
        subtitle_features=rng.normal(size=(1, d_txt)),
    )
    return QAExample(
        qid="tiny",
        question_tokens=("what",),
        answer_tokens=tuple(((f"a{k}",) for k in range(5))),
        question_features=rng.normal(size=(1, d_txt)),
        answer_features=tuple(rng.normal(size=(1, d_txt)) for _ in range(5)),
        gt_answer_idx=1,
        gt_span=TimeSpan(0, 0),
        frames=(frame,),
        concept_annotations=(),
    )


class TestForward:
    def _model(self, d_txt=8, d_vis=6):
        cfg = ModelConfig(d=8, d_vis=d_vis, d_txt=d_txt, max_objects=4, seed=13)
        torch.manual_seed(cfg.seed)
        return STAGE(cfg).double(), cfg

    def test_output_invariants(self, small_examples, small_config):
        torch.manual_seed(0)
        model = STAGE(small_config)
        with torch.no_grad():
            out = model(small_examples[0])
        assert float(out.answer_probs.sum()) == pytest.approx(1.0, abs=1e-5)
        assert out.start_probs.shape == out.end_probs.shape
        for k in range(5):
            assert float(out.start_probs[k].sum()) == pytest.approx(1.0, abs=1e-5)
            assert float(out.end_probs[k].sum()) == pytest.approx(1.0, abs=1e-5)
            assert 0 < out.proposals[k][0].confidence <= 1
        # normalized attention rows sum to 1 over frames that have objects
        has_objects = out.obj_mask.any(-1)
        row_sums = out.attention_norm.sum(-1)[:, has_objects]
        torch.testing.assert_close(row_sums, torch.ones_like(row_sums), atol=1e-5, rtol=0)

    def test_deterministic(self, small_examples, small_config):
        torch.manual_seed(0)
        model = STAGE(small_config)
        a = model(small_examples[0])
        b = model(small_examples[0])
        torch.testing.assert_close(a.answer_probs, b.answer_probs)
        torch.testing.assert_close(a.start_probs, b.start_probs)
        assert [p[0].span for p in a.proposals] == [p[0].span for p in b.proposals]

    def test_train_mode_training_proposals(self, small_examples, small_config):
        torch.manual_seed(0)
        model = STAGE(small_config)
        ex = small_examples[0]
        out = model(ex, mode="train")
        assert out.training_proposals is not None
        assert out.training_proposals[0] == ex.gt_span
        assert len(out.training_proposals) <= 3
        for span in out.training_proposals[1:]:
            assert span_iou(span, ex.gt_span) >= 0.5

    def test_invalid_mode(self, small_examples, small_config):
        torch.manual_seed(0)
        model = STAGE(small_config)
        with pytest.raises(ValueError):
            model(small_examples[0], mode="test")

    def test_tiny_forward_matches_block_composition(self):
        model, cfg = self._model()
        ex = _tiny_example()
        t = tensorize(ex, cfg.d_vis, dtype=torch.float64)
        out = model.forward_tensors(t)

        # hand-compose the independently tested stages
        hyp, sub, obj = model.encode_inputs(t)
        _, _, vis_att = qa_guided_attention(
            hyp.unsqueeze(1), obj.unsqueeze(0), t.obj_mask.unsqueeze(0)
        )
        _, _, sub_att = qa_guided_attention(
            hyp.unsqueeze(1), sub.unsqueeze(0), t.sub_mask.unsqueeze(0)
        )
        fused_seq = model.fuse_and_encode(
            model.video_text_fusion(sub_att, vis_att), t.hyp_mask, t.frame_mask
        )
        p1, p2 = model.span_logits(fused_seq, t.frame_mask)
        torch.testing.assert_close(out.start_probs, p1)
        torch.testing.assert_close(out.end_probs, p2)
        assert all(props[0].span == TimeSpan(0, 0) for props in out.proposals)
        pooled = torch.stack(
            [model.local_global_pool(fused_seq[k], TimeSpan(0, 0), t.frame_mask) for k in range(5)]
        )
        torch.testing.assert_close(out.answer_probs, model.answer_scores(pooled))

    def test_masking_padded_axes_do_not_change_answers(self, small_examples, small_config):
        torch.manual_seed(1)
        model = STAGE(small_config).double()
        ex = small_examples[1]
        t = tensorize(ex, small_config.d_vis, dtype=torch.float64)
        base = model.forward_tensors(t)

        def pad(x, axis, n, fill):
            shape = list(x.shape)
            shape[axis] = n
            return torch.cat([x, torch.full(shape, fill, dtype=x.dtype)], dim=axis)

        junk = 31.7
        padded = ExampleTensors(
            hyp_feats=pad(t.hyp_feats, 1, 2, junk),
            hyp_mask=pad(t.hyp_mask, 1, 2, False),
            sub_feats=pad(pad(t.sub_feats, 1, 3, junk), 0, 2, junk),
            sub_mask=pad(pad(t.sub_mask, 1, 3, False), 0, 2, False),
            obj_feats=pad(pad(t.obj_feats, 1, 3, junk), 0, 2, junk),
            obj_mask=pad(pad(t.obj_mask, 1, 3, False), 0, 2, False),
            frame_mask=pad(t.frame_mask, 0, 2, False),
        )
        out = model.forward_tensors(padded)
        assert float((base.answer_probs - out.answer_probs).abs().max().detach()) < 1e-6
        assert [p[0].span for p in base.proposals] == [p[0].span for p in out.proposals]


class TestDefaultDimensions:
    def test_text_projection_to_hidden_size(self):
        cfg = ModelConfig(seed=0)  # stock 768 -> 128 configuration
        torch.manual_seed(0)
        model = STAGE(cfg)
        with torch.no_grad():
            out = model.input_encoder(model.text_proj(torch.randn(1, 9, 768)))
        assert out.shape == (1, 9, 128)

    def test_visual_projection_to_hidden_size(self):
        cfg = ModelConfig(seed=0)
        torch.manual_seed(0)
        model = STAGE(cfg)
        with torch.no_grad():
            out = model.input_encoder(
                model.vis_proj(torch.randn(1, 20, 300)), add_pe=False
            )
        assert out.shape == (1, 20, 128)


class TestEmptyObjectFrame:
    def _with_empty_frame(self, example):
        frames = list(example.frames)
        empty = FrameRecord(
            frame_idx=frames[0].frame_idx,
            objects=(),
            subtitle_tokens=frames[0].subtitle_tokens,
            subtitle_features=frames[0].subtitle_features,
        )
        frames[0] = empty
        return QAExample(
            qid=example.qid,
            question_tokens=example.question_tokens,
            answer_tokens=example.answer_tokens,
            question_features=example.question_features,
            answer_features=example.answer_features,
            gt_answer_idx=example.gt_answer_idx,
            gt_span=example.gt_span,
            frames=tuple(frames),
            concept_annotations=example.concept_annotations,
        )

    def test_tensorize_marks_all_invalid(self, example, small_config):
        ex = self._with_empty_frame(example)
        t = tensorize(ex, small_config.d_vis)
        assert not t.obj_mask[0].any()

    def test_forward_attention_is_empty_map(self, example, small_config):
        ex = self._with_empty_frame(example)
        torch.manual_seed(0)
        model = STAGE(small_config)
        with torch.no_grad():
            out = model(ex)
        assert out.attention_norm[:, 0].abs().sum() == 0
        assert float(out.answer_probs.sum()) == pytest.approx(1.0, abs=1e-5)


class TestPredictBoxes:
    def test_threshold_is_strict(self):
        attn = np.array([[[0.7, 0.2, 0.1]]])  # (T=1, Lh=1, No=3)
        mask = np.ones((1, 3), dtype=bool)
        (sel,) = predict_boxes(attn, mask, threshold=0.2)
        assert sel.selected == (0,)

    def test_uniform_over_four(self):
        attn = np.full((1, 1, 4), 0.25)
        mask = np.ones((1, 4), dtype=bool)
        (sel,) = predict_boxes(attn, mask, threshold=0.2)
        assert set(sel.selected) == {0, 1, 2, 3}

    def test_empty_frame(self):
        attn = np.zeros((1, 2, 3))
        mask = np.zeros((1, 3), dtype=bool)
        (sel,) = predict_boxes(attn, mask, pairs=[(0, 0)])
        assert sel.selected == ()
        assert sel.object_indices == ()

    def test_full_scores_ranked(self):
        attn = np.array([[[0.1, 0.6, 0.3]]])
        mask = np.ones((1, 3), dtype=bool)
        (sel,) = predict_boxes(attn, mask)
        assert sel.object_indices == (1, 2, 0)
        assert sel.scores == (0.6, 0.3, 0.1)
