"""Inference driver: run every query of a split and assemble the metrics."""

from __future__ import annotations

import os

import numpy as np

from .backbone import resize_pad
from .config import ModelConfig
from .data import PhraseSample, read_dataset, read_ppm
from .errors import ContractError
from .metrics import QueryResult, map_report
from .model import GroundingModel, run_inference
from .rpn import hit_rate
from .tensor import Tensor


def load_sample_image(dataset_root: str, sample: PhraseSample,
                      cfg: ModelConfig) -> Tensor:
    image = read_ppm(os.path.join(dataset_root, sample.image_ref))
    return Tensor(resize_pad(image, cfg.image_size))


def evaluate_samples(model: GroundingModel, samples: list[PhraseSample],
                     dataset_root: str) -> dict[str, float]:
    """Full inference per query; headline metrics plus proposal hit rate.

    `multi2` is the percentage of multi-gt queries that produced at least
    two detections.
    """
    if not samples:
        raise ContractError("evaluate_samples: empty sample list")
    results: list[QueryResult] = []
    proposals_per_query = []
    gts_per_query = []
    multi_total = 0
    multi_covered = 0
    for sample in samples:
        image = load_sample_image(dataset_root, sample, model.cfg)
        tokens = model.tokenize(sample.phrase)
        detections, proposals, _ = run_inference(model, image, tokens)
        gts = list(sample.gt_boxes)
        results.append(QueryResult(detections=detections, gts=gts))
        proposals_per_query.append(proposals)
        gts_per_query.append(gts)
        if len(gts) >= 2:
            multi_total += 1
            multi_covered += len(detections) >= 2
    report = map_report(results)
    report["hit_rate"] = hit_rate(proposals_per_query, gts_per_query,
                                  model.cfg.hit_rate_n)
    report["multi2"] = (100.0 * multi_covered / multi_total if multi_total
                        else float("nan"))
    return report


def evaluate_split(model: GroundingModel, dataset_root: str, split: str,
                   limit: int | None = None) -> dict[str, float]:
    samples = read_dataset(os.path.join(dataset_root, f"{split}.jsonl"))
    if limit is not None:
        samples = samples[:limit]
    return evaluate_samples(model, samples, dataset_root)
