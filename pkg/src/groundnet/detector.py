"""Region head over the averaged attention context.

Each proposal is ROI-aligned on the context map, classified as related or
not related to the phrase, and refined by a 4-delta regression. All
sufficiently related refined boxes survive the final NMS, so one phrase can
yield any number of detections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ContractError, ShapeError
from .geometry import (Box, decode_deltas_arrays, encode_deltas_arrays,
                       iou_matrix, nms_arrays)
from .rng import SplitMix64
from . import tensor as T

STRIDE = 16
RELATED = 1
NOT_RELATED = 0


@dataclass(frozen=True)
class Detection:
    box: Box
    relatedness: float

    def __post_init__(self):
        if not math.isfinite(self.relatedness) or not 0.0 <= self.relatedness <= 1.0:
            raise ContractError(f"relatedness {self.relatedness} outside [0, 1]")


@dataclass
class DetTargets:
    rois: list[Box]
    labels: np.ndarray        # (R,) in {1, 0}
    reg_targets: np.ndarray   # (R, 4), meaningful where labels == 1


def roi_align(context_map: T.Tensor, roi: Box, resolution: int,
              stride: int = STRIDE) -> T.Tensor:
    """Sample a (C, P, P) patch: each bin at its center, bilinear, edge-clamped.

    The roi lives in input-pixel space; feature coordinates place cell
    centers at pixel (i + 0.5) * stride, i.e. coord = pixel/stride - 0.5.
    """
    if context_map.ndim != 3:
        raise ShapeError(f"roi_align: expected (C, h, w) map, got {context_map.shape}")
    if resolution < 1:
        raise ContractError(f"roi_align: resolution {resolution} < 1")
    p = resolution
    xs = roi.x1 + (np.arange(p) + 0.5) * (roi.width / p)
    ys = roi.y1 + (np.arange(p) + 0.5) * (roi.height / p)
    cols = np.broadcast_to(xs[None, :] / stride - 0.5, (p, p))
    rows = np.broadcast_to(ys[:, None] / stride - 0.5, (p, p))
    return T.bilinear_gather(context_map, rows, cols)


def init_detector_params(rng: SplitMix64, cfg: ModelConfig) -> dict[str, T.Tensor]:
    d_in = cfg.d_attn * cfg.roi_resolution * cfg.roi_resolution
    fc = cfg.det_hidden
    params: dict[str, T.Tensor] = {}

    def linear(name: str, n_out: int, n_in: int, std: float):
        params[f"det.{name}.w"] = T.Tensor(
            rng.normal((n_out, n_in)) * std, requires_grad=True)
        params[f"det.{name}.b"] = T.Tensor(np.zeros(n_out), requires_grad=True)

    linear("fc1", fc, d_in, math.sqrt(2.0 / d_in))
    linear("fc2", fc, fc, math.sqrt(2.0 / fc))
    linear("cls", 2, fc, 0.01)
    linear("reg", 4, fc, 0.01)
    return params


def detector_forward(pooled: list[T.Tensor],
                     params: dict[str, T.Tensor]) -> tuple[T.Tensor, T.Tensor]:
    """Two FC+ReLU layers, then (R, 2) relatedness logits and (R, 4) deltas."""
    if not pooled:
        raise ContractError("detector_forward: no pooled rois")
    flat = [T.reshape(q, (q.size,)) for q in pooled]
    x = T.stack_rows(flat)
    for layer in ("fc1", "fc2"):
        x = T.matmul(x, T.transpose2d(params[f"det.{layer}.w"]))
        x = T.relu(T.add_row_bias(x, params[f"det.{layer}.b"]))
    logits = T.add_row_bias(T.matmul(x, T.transpose2d(params["det.cls.w"])),
                            params["det.cls.b"])
    deltas = T.add_row_bias(T.matmul(x, T.transpose2d(params["det.reg.w"])),
                            params["det.reg.b"])
    return logits, deltas


def relatedness_probs(logits: T.Tensor | np.ndarray) -> np.ndarray:
    """Softmax probability of the related class per roi."""
    z = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, RELATED] / e.sum(axis=1)


def assign_det_targets(proposals: list[Box], gts: list[Box], cfg: ModelConfig,
                       rng: SplitMix64 | None = None,
                       include_gt: bool = True) -> DetTargets:
    """Label rois related at IoU >= threshold (boundary included), sample 1:3.

    During training the gt boxes themselves join the pool as guaranteed
    related rois.  When the not-related pool must be downsampled, rois that
    still overlap a ground-truth box (IoU >= cfg.det_negative_min_iou) are
    kept first: these near misses are the examples the relatedness head
    actually needs to rank below the true boxes, while far-away background
    is trivially separable.
    """
    if not gts:
        raise ContractError("assign_det_targets: no ground-truth boxes")
    pool = list(proposals) + (list(gts) if include_gt else [])
    if not pool:
        raise ContractError("assign_det_targets: no candidate rois")
    roi_arr = np.stack([b.as_array() for b in pool])
    gt_arr = np.stack([g.as_array() for g in gts])
    ious = iou_matrix(roi_arr, gt_arr)
    max_iou = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    related_idx = np.flatnonzero(max_iou >= cfg.det_iou_related)
    other_idx = np.flatnonzero(max_iou < cfg.det_iou_related)

    quota = max(1, round(cfg.det_roi_batch * cfg.det_related_fraction))
    n_rel = min(len(related_idx), quota)
    if len(related_idx) > n_rel:
        keep = (rng.choice(len(related_idx), n_rel) if rng is not None
                else np.arange(n_rel))
        related_idx = related_idx[np.sort(keep)]
    n_not = min(len(other_idx), cfg.det_roi_batch - len(related_idx))
    if len(other_idx) > n_not:
        hard = other_idx[max_iou[other_idx] >= cfg.det_negative_min_iou]
        easy = other_idx[max_iou[other_idx] < cfg.det_negative_min_iou]
        n_hard = min(len(hard), n_not)
        if len(hard) > n_hard:
            keep = (rng.choice(len(hard), n_hard) if rng is not None
                    else np.arange(n_hard))
            hard = hard[np.sort(keep)]
        n_easy = n_not - n_hard
        if len(easy) > n_easy:
            keep = (rng.choice(len(easy), n_easy) if rng is not None
                    else np.arange(n_easy))
            easy = easy[np.sort(keep)]
        other_idx = np.sort(np.concatenate([hard, easy]))

    sampled = np.concatenate([related_idx, other_idx])
    labels = np.zeros(sampled.size, dtype=np.int64)
    labels[:related_idx.size] = RELATED
    reg_targets = np.zeros((sampled.size, 4))
    if related_idx.size:
        reg_targets[:related_idx.size] = encode_deltas_arrays(
            roi_arr[related_idx], gt_arr[matched[related_idx]])
    return DetTargets(rois=[pool[i] for i in sampled], labels=labels,
                      reg_targets=reg_targets)


def det_loss(logits: T.Tensor, deltas: T.Tensor, targets: DetTargets,
             reg_beta: float = 1.0) -> T.Tensor:
    """Mean 2-way cross-entropy plus mean smooth-L1 over related rois."""
    n = len(targets.labels)
    if n == 0 or logits.shape[0] != n:
        raise ContractError(f"det_loss: {n} targets vs {logits.shape[0]} outputs")
    cls_term = T.mean_(T.softmax_ce_logits(logits, targets.labels))
    rel = np.flatnonzero(targets.labels == RELATED)
    if rel.size == 0:
        return cls_term
    picked = T.gather_rows(deltas, rel)
    reg_term = T.mean_(T.sum_(
        T.smooth_l1(picked, targets.reg_targets[rel], beta=reg_beta), axis=1))
    return T.add(cls_term, reg_term)


def postprocess(rel_probs: np.ndarray, deltas: np.ndarray, rois: list[Box],
                cfg: ModelConfig, image_size: int) -> list[Detection]:
    """Refine, clip, threshold on relatedness, NMS; every survivor returned."""
    if len(rois) == 0:
        return []
    roi_arr = np.stack([b.as_array() for b in rois])
    refined = decode_deltas_arrays(roi_arr, np.asarray(deltas, dtype=np.float64))
    refined[:, 0::2] = np.clip(refined[:, 0::2], 0.0, image_size)
    refined[:, 1::2] = np.clip(refined[:, 1::2], 0.0, image_size)
    probs = np.asarray(rel_probs, dtype=np.float64)
    ok = ((probs >= cfg.det_score_thresh)
          & (refined[:, 2] - refined[:, 0] > 0)
          & (refined[:, 3] - refined[:, 1] > 0))
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return []
    kept = nms_arrays(refined[idx], probs[idx], cfg.det_nms_thresh)
    return [Detection(box=Box(*refined[idx[i]]), relatedness=float(probs[idx[i]]))
            for i in kept]
