"""Shared fixtures: a tiny configuration and a dataset small enough for CI."""

from dataclasses import replace

import numpy as np
import pytest

from groundnet.config import ModelConfig, preset_config
from groundnet.data import generate_dataset
from groundnet.rng import SplitMix64
from groundnet.text import build_vocab


def small_config(**overrides) -> ModelConfig:
    """64px images -> 4x4 feature grid; every module stays fast."""
    base = dict(
        image_size=64,
        d_backbone=8,
        d_visual=8,
        d_attn=8,
        d_word=6,
        t_max=8,
        anchor_scales=(8.0, 16.0, 32.0),
        rpn_hidden=8,
        rpn_batch=32,
        proposal_count=30,
        det_hidden=16,
        det_roi_batch=16,
        object_half_min=6,
        object_half_max=14,
        scenes_train=6,
        scenes_val=3,
        scenes_test=3,
        train_steps=6,
        eval_every=3,
        eval_queries=4,
        hit_rate_n=30,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return small_config()


@pytest.fixture
def desk_cfg() -> ModelConfig:
    return preset_config("desk")


@pytest.fixture
def rng() -> SplitMix64:
    return SplitMix64(1234)


@pytest.fixture
def tiny_vocab():
    return build_vocab(["red circle", "blue square left of the triangle",
                        "the triangle on the left", "green triangle",
                        "yellow circle", "blue circle"])


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A generated mini dataset shared by data/training/cli tests."""
    root = tmp_path_factory.mktemp("dataset")
    cfg = small_config()
    counts = generate_dataset(str(root), cfg)
    return {"root": str(root), "cfg": cfg, "counts": counts}


def random_boxes(rng: SplitMix64, n: int, size: float = 100.0) -> np.ndarray:
    """(n, 4) random well-formed corner boxes inside [0, size]^2."""
    x1 = rng.uniform_in(0, size * 0.8, n)
    y1 = rng.uniform_in(0, size * 0.8, n)
    w = rng.uniform_in(1.0, size * 0.4, n)
    h = rng.uniform_in(1.0, size * 0.4, n)
    return np.stack([x1, y1, np.minimum(x1 + w, size), np.minimum(y1 + h, size)],
                    axis=1)
