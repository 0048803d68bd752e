"""Anchor generation, RPN heads, target assignment, proposals, hit rate."""

import math

import numpy as np
import pytest

from groundnet.errors import ConfigError, ContractError, ShapeError
from groundnet.geometry import Box, ScoredBox, encode_deltas_arrays, iou
from groundnet.gradcheck import grad_check
from groundnet.rng import SplitMix64
from groundnet.rpn import (LABEL_IGNORE, LABEL_NEGATIVE, LABEL_POSITIVE,
                           PRE_NMS_TOP, AnchorSet, RpnOutput, RpnTargets,
                           _sample_balanced, anchor_shapes,
                           assign_rpn_targets, generate_anchors, hit_rate,
                           init_rpn_params, rpn_forward, rpn_loss,
                           select_proposals)
from groundnet import tensor as T

from .conftest import small_config
from .oracles import conv2d_loops, sigmoid_np


def grid2_config(**overrides):
    """32px image -> 2x2 feature grid; 2 ratios x 2 scales = 4 anchors/cell."""
    return small_config(image_size=32, anchor_ratios=(1.0, 2.0),
                        anchor_scales=(8.0, 16.0), **overrides)


# --- anchors ---

def test_anchor_shapes_closed_form():
    cfg = grid2_config()
    shapes = anchor_shapes(cfg)
    # ratio-major ordering: (r0,s0), (r0,s1), (r1,s0), (r1,s1)
    want = [(8.0, 8.0), (16.0, 16.0),
            (8 * math.sqrt(2), 8 / math.sqrt(2)),
            (16 * math.sqrt(2), 16 / math.sqrt(2))]
    assert len(shapes) == 4
    for (gw, gh), (ww, wh) in zip(shapes, want):
        assert gw == pytest.approx(ww, abs=1e-12)
        assert gh == pytest.approx(wh, abs=1e-12)
        # area is scale^2 and aspect is the ratio, by construction
    for (w, h), ratio, scale in [(shapes[0], 1.0, 8.0), (shapes[3], 2.0, 16.0)]:
        assert w * h == pytest.approx(scale * scale, rel=1e-12)
        assert w / h == pytest.approx(ratio, rel=1e-12)


def test_generate_anchors_layout():
    cfg = grid2_config()
    anchors = generate_anchors(cfg)
    assert len(anchors) == 2 * 2 * 4
    assert anchors.per_cell == 4 and anchors.w_f == 2
    shapes = anchor_shapes(cfg)
    for k in range(4):            # cells in row-major order
        r, c = divmod(k, 2)
        cx, cy = (c + 0.5) * 16, (r + 0.5) * 16
        for i, (w, h) in enumerate(shapes):
            got = anchors.boxes[k * 4 + i]
            assert np.allclose(got, [cx - w / 2, cy - h / 2,
                                     cx + w / 2, cy + h / 2], atol=1e-12)
    box = anchors.box(5)
    assert isinstance(box, Box)
    assert np.allclose(box.as_array(), anchors.boxes[5])


def test_generate_anchors_respects_stride_argument():
    anchors = generate_anchors(grid2_config(), stride=8)
    assert np.allclose(anchors.boxes[0][:2],
                       [(0.5 * 8) - 4, (0.5 * 8) - 4])


# --- forward heads ---

def test_init_rpn_param_shapes():
    cfg = grid2_config()
    params = init_rpn_params(SplitMix64(0), cfg)
    a = cfg.anchors_per_cell
    assert params["rpn.trunk.w"].shape == (cfg.rpn_hidden, cfg.d_attn, 3, 3)
    assert params["rpn.obj.w"].shape == (a, cfg.rpn_hidden, 1, 1)
    assert params["rpn.reg.w"].shape == (4 * a, cfg.rpn_hidden, 1, 1)
    assert all(p.requires_grad for p in params.values())


def test_rpn_forward_shapes_and_flattening_order():
    cfg = grid2_config()
    params = init_rpn_params(SplitMix64(1), cfg)
    context = T.Tensor(SplitMix64(2).normal((cfg.d_attn, 4)))
    out = rpn_forward(context, params, w_f=2)
    a = cfg.anchors_per_cell
    assert out.logits.shape == (4 * a,)
    assert out.deltas.shape == (4 * a, 4)
    assert np.allclose(out.objectness.data, sigmoid_np(out.logits.data))

    # independent forward: loop convs on the reshaped grid
    grid = context.data.reshape(cfg.d_attn, 2, 2)
    trunk = conv2d_loops(grid, params["rpn.trunk.w"].data, 1, 1)
    trunk = np.maximum(trunk + params["rpn.trunk.b"].data[:, None, None], 0.0)
    obj = conv2d_loops(trunk, params["rpn.obj.w"].data, 1, 0)
    obj += params["rpn.obj.b"].data[:, None, None]
    reg = conv2d_loops(trunk, params["rpn.reg.w"].data, 1, 0)
    reg += params["rpn.reg.b"].data[:, None, None]
    for k in range(4):
        r, c = divmod(k, 2)
        for i in range(a):
            assert out.logits.data[k * a + i] == pytest.approx(
                obj[i, r, c], abs=1e-12)
            assert np.allclose(out.deltas.data[k * a + i],
                               reg[i * 4:(i + 1) * 4, r, c], atol=1e-12)


def test_rpn_forward_validation():
    cfg = grid2_config()
    params = init_rpn_params(SplitMix64(1), cfg)
    with pytest.raises(ShapeError):
        rpn_forward(T.Tensor(np.zeros((cfg.d_attn, 4, 4))), params, 2)
    with pytest.raises(ShapeError):
        rpn_forward(T.Tensor(np.zeros((cfg.d_attn, 5))), params, 2)


def test_rpn_heads_gradcheck():
    cfg = small_config(image_size=32, d_attn=4, rpn_hidden=4,
                       anchor_ratios=(1.0,), anchor_scales=(8.0,))
    params = init_rpn_params(SplitMix64(3), cfg)
    context = T.Tensor(SplitMix64(4).normal((4, 4)))

    def loss(_):
        out = rpn_forward(context, params, 2)
        return T.add(T.sum_(T.mul(out.logits, out.logits)),
                     T.sum_(T.mul(out.deltas, out.deltas)))

    for name in sorted(params):
        assert grad_check(loss, params[name]) < 1e-6, name
    assert grad_check(loss, context) < 1e-6


# --- target assignment ---

def anchor_set_from(boxes):
    arr = np.asarray(boxes, dtype=np.float64)
    return AnchorSet(boxes=arr, per_cell=1, w_f=int(math.isqrt(len(boxes))))


def test_assign_targets_threshold_rules():
    cfg = grid2_config()
    anchors = anchor_set_from([
        [0, 0, 10, 10],      # IoU 1.0 with gt -> positive
        [0, 0, 10, 8],       # IoU 0.8 -> positive (>= 0.7)
        [0, 0, 10, 5],       # IoU 0.5 -> ignore (between thresholds)
        [0, 0, 10, 2],       # IoU 0.2 -> negative (< 0.3)
        [50, 50, 60, 60],    # IoU 0.0 -> negative
    ])
    targets = assign_rpn_targets(anchors, [Box(0, 0, 10, 10)], cfg)
    assert list(targets.labels) == [LABEL_POSITIVE, LABEL_POSITIVE,
                                    LABEL_IGNORE, LABEL_NEGATIVE,
                                    LABEL_NEGATIVE]
    assert list(targets.positive_idx) == [0, 1]
    assert list(targets.negative_idx) == [3, 4]


def test_assign_targets_best_match_rescues_low_iou_gt():
    cfg = grid2_config()
    anchors = anchor_set_from([[0, 0, 10, 10], [40, 40, 50, 50]])
    # second gt overlaps its best anchor at IoU ~0.36 < 0.7, still positive
    gts = [Box(0, 0, 10, 10), Box(43, 43, 49, 49)]
    targets = assign_rpn_targets(anchors, gts, cfg)
    assert targets.labels[1] == LABEL_POSITIVE
    assert targets.matched_gt[1] == 1


def test_assign_targets_best_match_requires_overlap():
    cfg = grid2_config()
    anchors = anchor_set_from([[0, 0, 10, 10]])
    # disjoint gt: no anchor overlaps it, so nothing is rescued for it
    targets = assign_rpn_targets(anchors, [Box(0, 0, 10, 10),
                                           Box(90, 90, 99, 99)], cfg)
    assert targets.labels[0] == LABEL_POSITIVE          # matches gt 0
    assert targets.matched_gt[0] == 0


def test_assign_targets_ties_mark_all_best_anchors():
    cfg = grid2_config()
    anchors = anchor_set_from([[0, 0, 4, 4], [6, 0, 10, 4], [40, 40, 60, 60]])
    # gt straddles two anchors with identical IoU; both get the rescue
    targets = assign_rpn_targets(anchors, [Box(2, 0, 8, 4)], cfg)
    assert targets.labels[0] == LABEL_POSITIVE
    assert targets.labels[1] == LABEL_POSITIVE
    assert targets.labels[2] == LABEL_NEGATIVE


def test_assign_targets_requires_gts():
    with pytest.raises(ContractError):
        assign_rpn_targets(anchor_set_from([[0, 0, 1, 1]]), [], grid2_config())


# --- balanced sampling ---

def make_targets(labels):
    arr = np.asarray(labels, dtype=np.int8)
    return RpnTargets(labels=arr, matched_gt=np.zeros(arr.size, dtype=np.int64))


def test_sample_balanced_quotas():
    labels = [LABEL_POSITIVE] * 10 + [LABEL_NEGATIVE] * 50
    pos, neg = _sample_balanced(make_targets(labels), 16, SplitMix64(5))
    assert len(pos) == 8 and len(neg) == 8               # half-and-half
    assert set(pos) <= set(range(10))
    assert set(neg) <= set(range(10, 60))
    # few positives: negatives fill the remainder
    labels = [LABEL_POSITIVE] * 2 + [LABEL_NEGATIVE] * 50
    pos, neg = _sample_balanced(make_targets(labels), 16, SplitMix64(6))
    assert len(pos) == 2 and len(neg) == 14
    # ignores are never sampled
    labels = [LABEL_IGNORE] * 20 + [LABEL_NEGATIVE] * 4
    pos, neg = _sample_balanced(make_targets(labels), 16, SplitMix64(7))
    assert len(pos) == 0 and list(neg) == [20, 21, 22, 23]


def test_sample_balanced_deterministic_without_rng():
    labels = [LABEL_POSITIVE] * 10 + [LABEL_NEGATIVE] * 50
    pos, neg = _sample_balanced(make_targets(labels), 8, None)
    assert list(pos) == [0, 1, 2, 3]
    assert list(neg) == [10, 11, 12, 13]


# --- loss ---

def uniform_output(k):
    return RpnOutput(logits=T.Tensor(np.zeros(k)),
                     objectness=T.Tensor(np.full(k, 0.5)),
                     deltas=T.Tensor(np.zeros((k, 4))))


def test_rpn_loss_zero_logits_gives_ln2_plus_reg():
    """Objectness 0.5 everywhere on a balanced sample: cls term is ln 2."""
    cfg = grid2_config()
    anchors = anchor_set_from([[0, 0, 10, 10], [30, 30, 40, 40],
                               [60, 60, 70, 70], [80, 80, 90, 90]])
    gts = [Box(0, 0, 10, 10)]
    targets = assign_rpn_targets(anchors, gts, cfg)
    out = uniform_output(4)
    loss = rpn_loss(out, targets, anchors, gts, cfg)
    # anchor 0 is a perfect match: encoded deltas are zero, predictions are
    # zero, so the regression term vanishes and only ln 2 remains
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_rpn_loss_perfect_predictions_reach_reg_floor():
    cfg = grid2_config()
    anchors = anchor_set_from([[0, 0, 10, 10], [30, 30, 40, 40]])
    gts = [Box(2, 2, 12, 12)]      # offset from anchor 0
    targets = assign_rpn_targets(anchors, gts, cfg)
    want = encode_deltas_arrays(anchors.boxes[:1], np.array([[2, 2, 12, 12.]]))
    deltas = np.zeros((2, 4))
    deltas[0] = want[0]
    out = RpnOutput(logits=T.Tensor(np.array([40.0, -40.0])),
                    objectness=T.Tensor(sigmoid_np(np.array([40.0, -40.0]))),
                    deltas=T.Tensor(deltas))
    loss = rpn_loss(out, targets, anchors, gts, cfg)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_rpn_loss_cls_only_when_no_positives():
    cfg = grid2_config()
    targets = make_targets([LABEL_NEGATIVE, LABEL_NEGATIVE, LABEL_IGNORE])
    out = uniform_output(3)
    anchors = anchor_set_from([[0, 0, 8, 8], [8, 0, 16, 8], [0, 8, 8, 16]])
    loss = rpn_loss(out, targets, anchors, [Box(90, 90, 99, 99)], cfg)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_rpn_loss_nothing_sampled_is_an_error():
    cfg = grid2_config()
    targets = make_targets([LABEL_IGNORE, LABEL_IGNORE])
    out = uniform_output(2)
    anchors = anchor_set_from([[0, 0, 8, 8], [8, 0, 16, 8]])
    with pytest.raises(ContractError):
        rpn_loss(out, targets, anchors, [Box(0, 0, 8, 8)], cfg)


def test_rpn_loss_gradcheck_through_heads():
    cfg = small_config(image_size=32, d_attn=4, rpn_hidden=4,
                       anchor_ratios=(1.0,), anchor_scales=(12.0,),
                       rpn_batch=8)
    params = init_rpn_params(SplitMix64(8), cfg)
    context = T.Tensor(SplitMix64(9).normal((4, 4)))
    anchors = generate_anchors(cfg)
    gts = [Box(6, 6, 17, 17)]
    targets = assign_rpn_targets(anchors, gts, cfg)
    assert targets.positive_idx.size > 0

    def loss(_):
        out = rpn_forward(context, params, 2)
        return rpn_loss(out, targets, anchors, gts, cfg)

    for name in sorted(params):
        assert grad_check(loss, params[name]) < 1e-4, name
    assert grad_check(loss, context) < 1e-4


# --- proposal selection ---

def test_select_proposals_zero_deltas_recover_anchors():
    cfg = grid2_config(proposal_count=100)
    anchors = generate_anchors(cfg)
    k = len(anchors)
    scores = np.linspace(0.9, 0.1, k)
    logits = np.log(scores / (1 - scores))
    out = RpnOutput(logits=T.Tensor(logits), objectness=T.Tensor(scores),
                    deltas=T.Tensor(np.zeros((k, 4))))
    proposals = select_proposals(out, anchors, cfg)
    assert proposals, "no proposals survived"
    # every proposal is a clipped anchor with its own score
    clipped = anchors.boxes.copy()
    clipped[:, 0::2] = np.clip(clipped[:, 0::2], 0, 32)
    clipped[:, 1::2] = np.clip(clipped[:, 1::2], 0, 32)
    for p in proposals:
        matches = np.all(np.isclose(clipped, p.box.as_array(), atol=1e-9), axis=1)
        assert matches.any()
        assert scores[matches].max() == pytest.approx(p.score)
    # scores arrive in descending order
    ps = [p.score for p in proposals]
    assert ps == sorted(ps, reverse=True)


def test_select_proposals_caps_at_proposal_count():
    cfg = grid2_config(proposal_count=3)
    anchors = generate_anchors(cfg)
    k = len(anchors)
    rng = SplitMix64(10)
    logits = rng.normal(k)
    out = RpnOutput(logits=T.Tensor(logits),
                    objectness=T.Tensor(sigmoid_np(logits)),
                    deltas=T.Tensor(rng.normal((k, 4)) * 0.1))
    proposals = select_proposals(out, anchors, cfg)
    assert len(proposals) <= 3


def test_select_proposals_filters_min_side():
    cfg = grid2_config(proposal_min_side=9.0)
    anchors = generate_anchors(cfg)
    k = len(anchors)
    out = uniform_output(k)
    proposals = select_proposals(out, anchors, cfg)
    for p in proposals:
        assert p.box.width >= 9.0 and p.box.height >= 9.0
    # the 8x8 anchors are gone even though their scores tie everyone else's
    assert all(p.box.width > 8.0 + 1e-9 or p.box.x1 == 0.0 for p in proposals)


def test_select_proposals_nms_suppresses_duplicates():
    cfg = grid2_config(proposal_count=50)
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10.], [20, 20, 30, 30]])
    anchors = AnchorSet(boxes=boxes, per_cell=1, w_f=2)   # clip bound 32px
    scores = np.array([0.9, 0.8, 0.7])
    logits = np.log(scores / (1 - scores))
    out = RpnOutput(logits=T.Tensor(logits), objectness=T.Tensor(scores),
                    deltas=T.Tensor(np.zeros((3, 4))))
    proposals = select_proposals(out, anchors, cfg)
    assert len(proposals) == 2
    assert proposals[0].score == pytest.approx(0.9)
    assert proposals[1].box.as_array()[0] == 20


def test_pre_nms_cap_is_stable_under_ties():
    assert PRE_NMS_TOP == 2000  # documented cap used before NMS


# --- hit rate ---

def sb(x1, y1, x2, y2, score=0.5):
    return ScoredBox(box=Box(x1, y1, x2, y2), score=score)


def test_hit_rate_requires_every_gt_covered():
    gts = [[Box(0, 0, 10, 10), Box(20, 20, 30, 30)]]
    both = [[sb(0, 0, 10, 10), sb(20, 20, 30, 30)]]
    one = [[sb(0, 0, 10, 10), sb(50, 50, 60, 60)]]
    assert hit_rate(both, gts, 10) == 100.0
    assert hit_rate(one, gts, 10) == 0.0


def test_hit_rate_top_n_cutoff():
    gts = [[Box(0, 0, 10, 10)]]
    proposals = [[sb(40, 40, 50, 50, 0.9), sb(0, 0, 10, 10, 0.3)]]
    assert hit_rate(proposals, gts, 1) == 0.0
    assert hit_rate(proposals, gts, 2) == 100.0


def test_hit_rate_exact_threshold_counts():
    gts = [[Box(0, 0, 10, 10)]]
    half = [[sb(0, 0, 10, 5)]]                 # IoU exactly 0.5
    assert hit_rate(half, gts, 5) == 100.0
    assert hit_rate(half, gts, 5, iou_thresh=0.5 + 1e-9) == 0.0


def test_hit_rate_averages_over_queries():
    gts = [[Box(0, 0, 10, 10)], [Box(0, 0, 10, 10)],
           [Box(0, 0, 10, 10)], [Box(0, 0, 10, 10)]]
    props = [[sb(0, 0, 10, 10)], [sb(0, 0, 10, 10)],
             [sb(0, 0, 10, 10)], [sb(90, 90, 99, 99)]]
    assert hit_rate(props, gts, 3) == 75.0


def test_hit_rate_empty_proposals_are_misses_not_errors():
    gts = [[Box(0, 0, 10, 10)], [Box(5, 5, 9, 9)]]
    props = [[], [sb(5, 5, 9, 9)]]
    assert hit_rate(props, gts, 5) == 50.0


def test_hit_rate_validation():
    gts = [[Box(0, 0, 10, 10)]]
    props = [[sb(0, 0, 10, 10)]]
    with pytest.raises(ConfigError):
        hit_rate(props, gts, 0)
    with pytest.raises(ContractError):
        hit_rate([], [], 5)
    with pytest.raises(ContractError):
        hit_rate(props, [[]], 5)
    with pytest.raises(ContractError):
        hit_rate(props + props, gts, 5)
