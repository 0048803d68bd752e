"""Visual feature extraction: stride-16 CNN trunk plus 1x1 projections.

Produces the projected feature map V, the attention-facing matrix v_a whose
column j is the feature of spatial cell (j div w_f, j mod w_f), and the
globally pooled vector v_g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ContractError
from .geometry import Box
from .rng import SplitMix64
from . import tensor as T

STRIDE = 16
TRUNK_CHANNELS = (16, 32, 64)


@dataclass
class VisualFeatures:
    V: T.Tensor     # (d_visual, h_f, w_f)
    v_a: T.Tensor   # (d_attn, n_cells), column j = cell (j // w_f, j % w_f)
    v_g: T.Tensor   # (d_visual,)
    h_f: int
    w_f: int


def init_backbone_params(rng: SplitMix64, cfg: ModelConfig) -> dict[str, T.Tensor]:
    params: dict[str, T.Tensor] = {}

    def conv(name: str, c_out: int, c_in: int, k: int, gain: float = 2.0):
        std = math.sqrt(gain / (c_in * k * k))
        params[f"backbone.{name}.w"] = T.Tensor(
            rng.normal((c_out, c_in, k, k)) * std, requires_grad=True)
        params[f"backbone.{name}.b"] = T.Tensor(
            np.zeros(c_out), requires_grad=True)

    chans = (3,) + TRUNK_CHANNELS + (cfg.d_backbone,)
    for i in range(4):
        conv(f"conv{i + 1}", chans[i + 1], chans[i], 3)
    conv("proj_v", cfg.d_visual, cfg.d_backbone, 1)
    conv("proj_a", cfg.d_attn, cfg.d_visual, 1, gain=1.0)
    return params


def extract_features(image: T.Tensor, params: dict[str, T.Tensor]) -> T.Tensor:
    """Four stride-2 conv+ReLU blocks: (3, S, S) -> (d_backbone, S/16, S/16)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigError(f"expected (3, S, S) image, got {image.shape}")
    s = image.shape[1]
    if image.shape[2] != s or s % STRIDE != 0:
        raise ConfigError(f"image size {image.shape[1:]} not square-divisible by {STRIDE}")
    x = image
    for i in range(1, 5):
        x = T.conv2d(x, params[f"backbone.conv{i}.w"], stride=2, pad=1)
        x = T.relu(T.add_channel_bias(x, params[f"backbone.conv{i}.b"]))
    return x


def project_visual(raw: T.Tensor, params: dict[str, T.Tensor]) -> VisualFeatures:
    """V = ReLU(1x1 conv), v_a = 1x1 conv of V flattened, v_g = mean pool of V."""
    v = T.conv2d(raw, params["backbone.proj_v.w"])
    v = T.relu(T.add_channel_bias(v, params["backbone.proj_v.b"]))
    d_e, h_f, w_f = v.shape
    a = T.conv2d(v, params["backbone.proj_a.w"])
    a = T.add_channel_bias(a, params["backbone.proj_a.b"])
    v_a = T.reshape(a, (a.shape[0], h_f * w_f))
    v_g = T.mean_(T.reshape(v, (d_e, h_f * w_f)), axis=1)
    return VisualFeatures(V=v, v_a=v_a, v_g=v_g, h_f=h_f, w_f=w_f)


def forward_visual(image: T.Tensor, params: dict[str, T.Tensor]) -> VisualFeatures:
    return project_visual(extract_features(image, params), params)


def cell_to_region(j: int, size: int, w_f: int) -> Box:
    """Pixel box covered by feature cell j; cells tile [0, size)^2 exactly."""
    if size % w_f != 0:
        raise ContractError(f"size {size} not divisible by grid width {w_f}")
    n_cells = w_f * w_f
    if not 0 <= j < n_cells:
        raise ContractError(f"cell index {j} out of range [0, {n_cells})")
    cell = size // w_f
    r, c = divmod(j, w_f)
    return Box(c * cell, r * cell, (c + 1) * cell, (r + 1) * cell)


def resize_pad(image: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving bilinear resize, then zero-pad bottom/right to square.

    Plain array preprocessing; runs before the differentiable graph.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigError(f"expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    if h == size and w == size:
        return image.astype(np.float64)
    scale = size / max(h, w)
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    resized = _bilinear_resize(image.astype(np.float64), nh, nw)
    out = np.zeros((3, size, size), dtype=np.float64)
    out[:, :nh, :nw] = resized
    return out


def _bilinear_resize(image: np.ndarray, nh: int, nw: int) -> np.ndarray:
    _, h, w = image.shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy
