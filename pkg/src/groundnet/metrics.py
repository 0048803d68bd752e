"""Grounding metrics: Recall@K and 11-point interpolated average precision.

The task is binary (one implicit "related" class), so the pooled AP over all
queries is reported as mAP. Detections must arrive sorted by relatedness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import Detection
from .errors import ContractError
from .geometry import Box, iou

RECALL_LEVELS = np.linspace(0.0, 1.0, 11)
REPORT_KEYS = ("R@1", "R@5", "R@10", "mAP")


@dataclass
class QueryResult:
    detections: list[Detection]
    gts: list[Box]

    def __post_init__(self):
        if not self.gts:
            raise ContractError("QueryResult: gts must be non-empty")
        scores = [d.relatedness for d in self.detections]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ContractError("QueryResult: detections not sorted by relatedness")


def recall_at_k(results: list[QueryResult], k: int, iou_thresh: float = 0.5) -> float:
    """Percentage of queries with a top-k detection hitting any gt."""
    if k < 1:
        raise ContractError(f"recall_at_k: k must be >= 1, got {k}")
    if not results:
        raise ContractError("recall_at_k: empty result list")
    hits = 0
    for res in results:
        top = res.detections[:k]
        if any(iou(d.box, g) >= iou_thresh for d in top for g in res.gts):
            hits += 1
    return 100.0 * hits / len(results)


def average_precision_11pt(results: list[QueryResult],
                           iou_thresh: float = 0.5) -> float:
    """Pool detections across queries, greedy-match, interpolate 11 points.

    Matching ties on IoU go to the lower gt index; each gt matches at most
    one detection. Recall denominator is the total gt count.
    """
    total_gt = sum(len(r.gts) for r in results)
    if total_gt == 0:
        return 0.0
    pooled = [(d.relatedness, qi, di)
              for qi, r in enumerate(results) for di, d in enumerate(r.detections)]
    pooled.sort(key=lambda e: (-e[0], e[1], e[2]))
    matched = [set() for _ in results]
    tps = np.zeros(len(pooled))
    for rank, (_, qi, di) in enumerate(pooled):
        det = results[qi].detections[di]
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(results[qi].gts):
            if gi in matched[qi]:
                continue
            v = iou(det.box, gt)
            if v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt >= 0 and best_iou >= iou_thresh:
            matched[qi].add(best_gt)
            tps[rank] = 1.0
    if not pooled:
        return 0.0
    cum_tp = np.cumsum(tps)
    ranks = np.arange(1, len(pooled) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / total_gt
    ap = 0.0
    for level in RECALL_LEVELS:
        at_level = precision[recall >= level - 1e-12]
        ap += at_level.max() if at_level.size else 0.0
    return float(ap / 11.0)


def map_report(results: list[QueryResult]) -> dict[str, float]:
    """The four headline numbers: R@1, R@5, R@10, and pooled mAP."""
    return {
        "R@1": recall_at_k(results, 1),
        "R@5": recall_at_k(results, 5),
        "R@10": recall_at_k(results, 10),
        "mAP": average_precision_11pt(results),
    }


def format_report_csv(report: dict[str, float]) -> str:
    keys = [k for k in REPORT_KEYS if k in report]
    keys += sorted(k for k in report if k not in REPORT_KEYS)
    lines = ["metric,value"] + [f"{k},{report[k]!r}" for k in keys]
    return "\n".join(lines) + "\n"


def format_report_text(report: dict[str, float]) -> str:
    keys = [k for k in REPORT_KEYS if k in report]
    keys += sorted(k for k in report if k not in REPORT_KEYS)
    width = max(len(k) for k in keys)
    lines = [f"{k:<{width}}  {report[k]:.4f}" for k in keys]
    return "\n".join(lines) + "\n"
