"""Region proposal network over the averaged attention context.

Anchors of three aspect ratios and three sizes sit on every stride-16 cell.
A small conv trunk reads the (spatially unflattened) context, an objectness
head scores each anchor for phrase relevance, and a regression head refines
anchor geometry. Target assignment and the sampled two-task loss follow the
standard proposal-network recipe; proposal selection clips, filters, and
NMS-prunes to at most N boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ContractError, ShapeError
from .geometry import (Box, ScoredBox, decode_deltas_arrays, encode_deltas_arrays,
                       iou_matrix, nms_arrays)
from .rng import SplitMix64
from . import tensor as T

PRE_NMS_TOP = 2000
LABEL_POSITIVE = 1
LABEL_NEGATIVE = 0
LABEL_IGNORE = -1


@dataclass
class AnchorSet:
    boxes: np.ndarray        # (n_cells * per_cell, 4) as x1, y1, x2, y2
    per_cell: int
    w_f: int

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def box(self, k: int) -> Box:
        return Box(*self.boxes[k])


@dataclass
class RpnOutput:
    logits: T.Tensor         # (K,) raw objectness logits
    objectness: T.Tensor     # (K,) sigmoid scores
    deltas: T.Tensor         # (K, 4)


@dataclass
class RpnTargets:
    labels: np.ndarray       # (K,) in {1, 0, -1}
    matched_gt: np.ndarray   # (K,) argmax gt per anchor

    @property
    def positive_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == LABEL_POSITIVE)

    @property
    def negative_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == LABEL_NEGATIVE)


def anchor_shapes(cfg: ModelConfig) -> list[tuple[float, float]]:
    """(width, height) per anchor shape; area scale^2, aspect w/h = ratio."""
    shapes = []
    for ratio in cfg.anchor_ratios:
        for scale in cfg.anchor_scales:
            shapes.append((scale * math.sqrt(ratio), scale / math.sqrt(ratio)))
    return shapes


def generate_anchors(cfg: ModelConfig, stride: int = 16) -> AnchorSet:
    """Anchor k*A + i is shape i centered on cell k = row*w_f + col."""
    shapes = anchor_shapes(cfg)
    w_f = cfg.feat_size
    centers = (np.arange(w_f) + 0.5) * stride
    boxes = np.empty((w_f * w_f * len(shapes), 4), dtype=np.float64)
    k = 0
    for r in range(w_f):
        for c in range(w_f):
            cx, cy = centers[c], centers[r]
            for w, h in shapes:
                boxes[k] = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
                k += 1
    return AnchorSet(boxes=boxes, per_cell=len(shapes), w_f=w_f)


def init_rpn_params(rng: SplitMix64, cfg: ModelConfig) -> dict[str, T.Tensor]:
    a = cfg.anchors_per_cell
    params: dict[str, T.Tensor] = {}

    def conv(name: str, c_out: int, c_in: int, k: int, std: float):
        params[f"rpn.{name}.w"] = T.Tensor(
            rng.normal((c_out, c_in, k, k)) * std, requires_grad=True)
        params[f"rpn.{name}.b"] = T.Tensor(np.zeros(c_out), requires_grad=True)

    conv("trunk", cfg.rpn_hidden, cfg.d_attn, 3,
         math.sqrt(2.0 / (cfg.d_attn * 9)))
    conv("obj", a, cfg.rpn_hidden, 1, 0.01)
    conv("reg", 4 * a, cfg.rpn_hidden, 1, 0.01)
    return params


def rpn_forward(context: T.Tensor, params: dict[str, T.Tensor],
                w_f: int) -> RpnOutput:
    """Score and refine every anchor from the (d_attn, n_cells) context."""
    if context.ndim != 2:
        raise ShapeError(f"rpn_forward: expected matrix context, got {context.shape}")
    d, n_cells = context.shape
    if n_cells != w_f * w_f:
        raise ShapeError(f"rpn_forward: {n_cells} cells is not {w_f}x{w_f}")
    grid = T.reshape(context, (d, w_f, w_f))
    trunk = T.conv2d(grid, params["rpn.trunk.w"], stride=1, pad=1)
    trunk = T.relu(T.add_channel_bias(trunk, params["rpn.trunk.b"]))

    obj = T.add_channel_bias(T.conv2d(trunk, params["rpn.obj.w"]),
                             params["rpn.obj.b"])
    a = obj.shape[0]
    # channel-major (A, cells) -> anchor order k*A + i
    logits = T.reshape(T.transpose2d(T.reshape(obj, (a, w_f * w_f))), (w_f * w_f * a,))

    reg = T.add_channel_bias(T.conv2d(trunk, params["rpn.reg.w"]),
                             params["rpn.reg.b"])
    deltas = T.reshape(T.transpose2d(T.reshape(reg, (4 * a, w_f * w_f))),
                       (w_f * w_f * a, 4))
    return RpnOutput(logits=logits, objectness=T.sigmoid(logits), deltas=deltas)


def assign_rpn_targets(anchors: AnchorSet, gts: list[Box],
                       cfg: ModelConfig) -> RpnTargets:
    """Threshold rule plus best-match rule so every gt owns >= 1 positive."""
    if not gts:
        raise ContractError("assign_rpn_targets: no ground-truth boxes")
    gt_arr = np.stack([g.as_array() for g in gts])
    ious = iou_matrix(anchors.boxes, gt_arr)       # (K, G)
    max_iou = ious.max(axis=1)
    matched = ious.argmax(axis=1)

    labels = np.full(len(anchors), LABEL_IGNORE, dtype=np.int8)
    labels[max_iou < cfg.rpn_iou_negative] = LABEL_NEGATIVE
    labels[max_iou >= cfg.rpn_iou_positive] = LABEL_POSITIVE
    # best-match rule: the top anchor(s) of each gt are positive regardless
    per_gt_best = ious.max(axis=0)
    for g in range(len(gts)):
        if per_gt_best[g] > 0:
            labels[ious[:, g] == per_gt_best[g]] = LABEL_POSITIVE
    return RpnTargets(labels=labels, matched_gt=matched)


def _sample_balanced(targets: RpnTargets, batch: int,
                     rng: SplitMix64 | None) -> tuple[np.ndarray, np.ndarray]:
    pos = targets.positive_idx
    neg = targets.negative_idx
    n_pos = min(len(pos), batch // 2)
    if len(pos) > n_pos:
        keep = rng.choice(len(pos), n_pos) if rng is not None else np.arange(n_pos)
        pos = pos[np.sort(keep)]
    n_neg = min(len(neg), batch - len(pos))
    if len(neg) > n_neg:
        keep = rng.choice(len(neg), n_neg) if rng is not None else np.arange(n_neg)
        neg = neg[np.sort(keep)]
    return pos, neg


def rpn_loss(out: RpnOutput, targets: RpnTargets, anchors: AnchorSet,
             gts: list[Box], cfg: ModelConfig,
             rng: SplitMix64 | None = None) -> T.Tensor:
    """Sampled binary cross-entropy plus smooth-L1 over positive deltas.

    Both terms are per-anchor means, so the loss scale is invariant to how
    many anchors were sampled.
    """
    pos, neg = _sample_balanced(targets, cfg.rpn_batch, rng)
    sampled = np.concatenate([pos, neg])
    if sampled.size == 0:
        raise ContractError("rpn_loss: nothing to sample (no positives or negatives)")
    k = len(anchors)
    picked_logits = T.reshape(
        T.gather_rows(T.reshape(out.logits, (k, 1)), sampled), (sampled.size,))
    cls_targets = np.zeros(sampled.size)
    cls_targets[:pos.size] = 1.0
    cls_term = T.mean_(T.sigmoid_bce_logits(picked_logits, cls_targets))
    if pos.size == 0:
        return cls_term
    gt_arr = np.stack([g.as_array() for g in gts])
    reg_targets = encode_deltas_arrays(anchors.boxes[pos],
                                       gt_arr[targets.matched_gt[pos]])
    picked_deltas = T.gather_rows(out.deltas, pos)
    reg_term = T.mean_(T.sum_(
        T.smooth_l1(picked_deltas, reg_targets, beta=cfg.rpn_reg_beta), axis=1))
    return T.add(cls_term, reg_term)


def select_proposals(out: RpnOutput, anchors: AnchorSet,
                     cfg: ModelConfig) -> list[ScoredBox]:
    """Decode, clip, filter tiny boxes, NMS, and cap at proposal_count."""
    scores = np.asarray(out.objectness.data, dtype=np.float64).copy()
    deltas = np.asarray(out.deltas.data, dtype=np.float64)
    boxes = decode_deltas_arrays(anchors.boxes, deltas)
    size = float(anchors.w_f * 16)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, size)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, size)
    wide = (boxes[:, 2] - boxes[:, 0]) >= cfg.proposal_min_side
    tall = (boxes[:, 3] - boxes[:, 1]) >= cfg.proposal_min_side
    keep = np.flatnonzero(wide & tall)
    boxes, scores = boxes[keep], scores[keep]
    if len(scores) > PRE_NMS_TOP:
        top = np.argsort(-scores, kind="stable")[:PRE_NMS_TOP]
        boxes, scores = boxes[top], scores[top]
    survivors = nms_arrays(boxes, scores, cfg.rpn_nms_thresh)[:cfg.proposal_count]
    return [ScoredBox(box=Box(*boxes[i]), score=float(scores[i]))
            for i in survivors]


def hit_rate(proposals_per_query: list[list[ScoredBox]],
             gts_per_query: list[list[Box]], n: int,
             iou_thresh: float = 0.5) -> float:
    """Percentage of queries whose every gt is covered by a top-n proposal."""
    if n < 1:
        raise ConfigError(f"hit_rate: n must be >= 1, got {n}")
    if not proposals_per_query or len(proposals_per_query) != len(gts_per_query):
        raise ContractError("hit_rate: empty or mismatched query lists")
    hits = 0
    for proposals, gts in zip(proposals_per_query, gts_per_query):
        if not gts:
            raise ContractError("hit_rate: query with no ground truth")
        top = proposals[:n]
        if not top:
            continue
        prop_arr = np.stack([p.box.as_array() for p in top])
        gt_arr = np.stack([g.as_array() for g in gts])
        cover = iou_matrix(gt_arr, prop_arr).max(axis=1) >= iou_thresh
        hits += bool(cover.all())
    return 100.0 * hits / len(proposals_per_query)
