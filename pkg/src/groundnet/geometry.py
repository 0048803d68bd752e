"""Box algebra shared by the proposal network, detector, and metrics.

Boxes are corner-format (x1, y1, x2, y2) in continuous pixel coordinates
with x2 > x1 and y2 > y1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError

__all__ = ["Box", "ScoredBox", "iou", "iou_matrix", "encode_deltas", "decode_deltas",
           "encode_deltas_arrays", "decode_deltas_arrays", "clip_box", "nms", "nms_arrays"]


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ContractError(f"non-finite box {(self.x1, self.y1, self.x2, self.y2)}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ContractError(f"degenerate box {(self.x1, self.y1, self.x2, self.y2)}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ContractError(f"score {self.score} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N,4) vs (M,4) corner arrays -> (N,M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_deltas(anchor: Box, gt: Box) -> tuple[float, float, float, float]:
    """Faster-RCNN box parameterization (tx, ty, tw, th) of gt relative to anchor."""
    if anchor.width <= 0 or anchor.height <= 0:
        raise ContractError("degenerate anchor")
    ax, ay = anchor.center
    gx, gy = gt.center
    tx = (gx - ax) / anchor.width
    ty = (gy - ay) / anchor.height
    tw = math.log(gt.width / anchor.width)
    th = math.log(gt.height / anchor.height)
    return (tx, ty, tw, th)


def decode_deltas(anchor: Box, deltas) -> Box:
    """Inverse of encode_deltas; caller clips to the image afterwards."""
    tx, ty, tw, th = (float(d) for d in deltas)
    if not all(math.isfinite(v) for v in (tx, ty, tw, th)):
        raise NumericError(f"non-finite deltas {(tx, ty, tw, th)}")
    ax, ay = anchor.center
    cx = ax + tx * anchor.width
    cy = ay + ty * anchor.height
    w = anchor.width * math.exp(tw)
    h = anchor.height * math.exp(th)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def encode_deltas_arrays(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized encode: (N,4) anchors against (N,4) matched gts -> (N,4) deltas."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gx = gts[:, 0] + 0.5 * gw
    gy = gts[:, 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_deltas_arrays(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized decode of (N,4) deltas against (N,4) anchors -> (N,4) corners."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_box(box: Box, size: float) -> Box | None:
    """Clip to [0, size]^2; None if nothing of positive area remains."""
    x1 = min(max(box.x1, 0.0), size)
    y1 = min(max(box.y1, 0.0), size)
    x2 = min(max(box.x2, 0.0), size)
    y2 = min(max(box.y2, 0.0), size)
    if x2 <= x1 or y2 <= y1:
        return None
    return Box(x1, y1, x2, y2)


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS over (N,4) corners; returns kept indices in score-desc order.

    Sort is score-descending with ties broken by input index; a candidate at
    exactly `iou_thresh` overlap with a kept box is suppressed.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ContractError(f"iou_thresh {iou_thresh} outside (0, 1]")
    n = len(scores)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-np.asarray(scores), kind="stable")
    b = np.asarray(boxes, dtype=np.float64)
    areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        ix = np.minimum(b[i, 2], b[rest, 2]) - np.maximum(b[i, 0], b[rest, 0])
        iy = np.minimum(b[i, 3], b[rest, 3]) - np.maximum(b[i, 1], b[rest, 1])
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr < iou_thresh]
    return np.array(keep, dtype=np.int64)


def nms(boxes: list[ScoredBox], iou_thresh: float) -> list[ScoredBox]:
    """Greedy NMS over scored boxes; see nms_arrays for the exact rule."""
    if not boxes:
        return []
    arr = np.array([sb.box.as_array() for sb in boxes])
    scores = np.array([sb.score for sb in boxes])
    keep = nms_arrays(arr, scores, iou_thresh)
    return [boxes[i] for i in keep]
