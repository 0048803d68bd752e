"""Spatial attention over visual feature cells, driven by decoder states.

Each step scores every cell from its visual feature, the current decoder
state, and (full model) the global phrase embedding; the context is the
outer product of the phrase-gated visual vector with the attention weights,
so it keeps exactly the shape of the projected visual features. The no-global
variant drops the phrase embedding from the scores and reduces the context to
per-cell reweighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ContractError, ShapeError
from .rng import SplitMix64
from . import tensor as T


@dataclass
class AttentionStep:
    alpha: T.Tensor     # (n_cells,), non-negative, sums to 1
    context: T.Tensor   # (d_attn, n_cells), same shape as v_a


@dataclass
class AveragedContext:
    c_hat: T.Tensor     # (d_attn, n_cells)
    t_used: int


def init_attention_params(rng: SplitMix64, cfg: ModelConfig) -> dict[str, T.Tensor]:
    d = cfg.d_attn
    std = math.sqrt(1.0 / d)
    # The score path must start OUT of tanh's linear zone: when every
    # pre-activation is small, tanh(a_j + b) ~ a_j + b and the phrase bias b
    # cancels inside the softmax, so the attention field starts phrase-blind
    # and the gradients keep it that way. Scaling the mixing matrices by 4 and
    # the score vector by 8 (both relative to 1/sqrt(d)) puts the initial
    # operating point around |pre| ~ 1.2 where the curvature lets the phrase
    # reorder cells.
    std_mix = 4.0 * std
    std_score = 8.0 * std
    params = {
        "attn.w_visual": T.Tensor(rng.normal((d, d)) * std_mix, requires_grad=True),
        "attn.w_state": T.Tensor(rng.normal((d, d)) * std_mix, requires_grad=True),
        "attn.w_global": T.Tensor(rng.normal((d, d)) * std_mix, requires_grad=True),
        "attn.w_score": T.Tensor(rng.normal(d) * std_score, requires_grad=True),
        "attn.ctx.w": T.Tensor(rng.normal((cfg.n_cells, d)) * std, requires_grad=True),
    }
    return params


def _cell_scores(v_a: T.Tensor, bias_vec: T.Tensor,
                 params: dict[str, T.Tensor]) -> T.Tensor:
    """Per-cell score: w_score . tanh(W_visual v_a[:, j] + bias_vec)."""
    pre = T.matmul(params["attn.w_visual"], v_a)          # (d, n_cells)
    mixed = T.add_row_bias(T.transpose2d(pre), bias_vec)  # (n_cells, d)
    return T.matmul(T.tanh(mixed), params["attn.w_score"])


def attention_step(v_a: T.Tensor, h_t: T.Tensor, global_emb: T.Tensor,
                   params: dict[str, T.Tensor]) -> AttentionStep:
    """Full-model step: scores see the global embedding, context is gated by it."""
    if v_a.ndim != 2 or h_t.ndim != 1 or global_emb.ndim != 1:
        raise ShapeError(f"attention_step: v_a {v_a.shape}, h_t {h_t.shape}, "
                         f"global {global_emb.shape}")
    if v_a.shape[0] != h_t.shape[0] or h_t.shape[0] != global_emb.shape[0]:
        raise ShapeError(f"attention_step: width mismatch {v_a.shape[0]} / "
                         f"{h_t.shape[0]} / {global_emb.shape[0]}")
    bias = T.add(T.matmul(params["attn.w_state"], h_t),
                 T.matmul(params["attn.w_global"], global_emb))
    alpha = T.softmax(_cell_scores(v_a, bias, params), axis=-1)
    gate = T.matmul(params["attn.ctx.w"], global_emb)     # (n_cells,)
    gated_visual = T.matmul(v_a, gate)                    # (d_attn,)
    context = T.outer(gated_visual, alpha)
    return AttentionStep(alpha=alpha, context=context)


def attention_step_no_global(v_a: T.Tensor, h_t: T.Tensor,
                             params: dict[str, T.Tensor]) -> AttentionStep:
    """Variant without the global embedding: context reweights v_a columns."""
    if v_a.ndim != 2 or h_t.ndim != 1 or v_a.shape[0] != h_t.shape[0]:
        raise ShapeError(f"attention_step_no_global: v_a {v_a.shape}, h_t {h_t.shape}")
    bias = T.matmul(params["attn.w_state"], h_t)
    alpha = T.softmax(_cell_scores(v_a, bias, params), axis=-1)
    ones = T.Tensor(np.ones(v_a.shape[0]))
    context = T.mul(v_a, T.outer(ones, alpha))
    return AttentionStep(alpha=alpha, context=context)


def average_context(steps: list[AttentionStep], true_length: int) -> AveragedContext:
    """Mean context over the first true_length steps (pads excluded)."""
    if not steps:
        raise ContractError("average_context: empty step list")
    if not 1 <= true_length <= len(steps):
        raise ContractError(
            f"average_context: true_length {true_length} vs {len(steps)} steps")
    total = steps[0].context
    for step in steps[1:true_length]:
        total = T.add(total, step.context)
    return AveragedContext(c_hat=T.mul(total, 1.0 / true_length),
                           t_used=true_length)


def export_heatmap(alpha, w_f: int) -> np.ndarray:
    """Reshape an attention vector to its (w_f, w_f) spatial grid."""
    values = alpha.data if isinstance(alpha, T.Tensor) else np.asarray(alpha)
    values = values.reshape(-1)
    if values.size != w_f * w_f:
        raise ShapeError(f"heatmap: {values.size} cells is not {w_f}x{w_f}")
    return values.reshape(w_f, w_f).copy()


def write_heatmap_csv(path: str, grid: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in range(grid.shape[0]):
            fh.write(",".join(repr(float(v)) for v in grid[r]) + "\n")


def write_heatmap_pgm(path: str, grid: np.ndarray) -> None:
    """8-bit grayscale pixmap; values min-max normalized for display."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        scaled = np.round((grid - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(grid)
    data = scaled.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
