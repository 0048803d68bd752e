"""Phrase encoder-decoder: bidirectional GRU passes over embedded tokens.

The encoder produces a single global phrase embedding from its two final
states; the decoder re-reads the sequence conditioned on that embedding and
its states drive both the spatial attention and the word-prediction head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ContractError
from .rng import SplitMix64
from . import tensor as T

GATES = ("upd", "res", "cand")


@dataclass
class EncodingResult:
    global_emb: T.Tensor   # (d_attn,)
    states: T.Tensor       # (t_max, d_attn), per-step bidirectional states


def init_gru_params(rng: SplitMix64, prefix: str, d_in: int, d_hidden: int,
                    params: dict[str, T.Tensor]) -> None:
    """One direction's gate weights: input, recurrent, and bias per gate."""
    for gate in GATES:
        params[f"{prefix}.w_{gate}"] = T.Tensor(
            rng.normal((d_hidden, d_in)) * math.sqrt(1.0 / d_in), requires_grad=True)
        params[f"{prefix}.u_{gate}"] = T.Tensor(
            rng.normal((d_hidden, d_hidden)) * math.sqrt(1.0 / d_hidden),
            requires_grad=True)
        params[f"{prefix}.b_{gate}"] = T.Tensor(np.zeros(d_hidden), requires_grad=True)


def init_langmodel_params(rng: SplitMix64, cfg: ModelConfig,
                          vocab_size: int) -> dict[str, T.Tensor]:
    if cfg.d_attn % 2 != 0:
        raise ConfigError(f"d_attn {cfg.d_attn} must be even for two directions")
    d_half = cfg.d_attn // 2
    d_step = cfg.d_word + cfg.d_visual          # [word embedding ; pooled visual]
    params: dict[str, T.Tensor] = {}
    for direction in ("f", "b"):
        init_gru_params(rng, f"enc.{direction}", d_step, d_half, params)
        init_gru_params(rng, f"dec.{direction}", d_step + cfg.d_attn, d_half, params)
    params["enc.proj.w"] = T.Tensor(
        rng.normal((cfg.d_attn, cfg.d_attn)) * math.sqrt(1.0 / cfg.d_attn),
        requires_grad=True)
    params["enc.proj.b"] = T.Tensor(np.zeros(cfg.d_attn), requires_grad=True)
    params["wordhead.w"] = T.Tensor(
        rng.normal((vocab_size, cfg.d_attn)) * math.sqrt(1.0 / cfg.d_attn),
        requires_grad=True)
    params["wordhead.b"] = T.Tensor(np.zeros(vocab_size), requires_grad=True)
    return params


def gru_cell_step(x: T.Tensor, h_prev: T.Tensor, params: dict[str, T.Tensor],
                  prefix: str) -> T.Tensor:
    """h' = (1 - z) * h_prev + z * candidate, with reset-gated recurrence."""
    def gate(name: str, state: T.Tensor) -> T.Tensor:
        pre = T.add(T.matmul(params[f"{prefix}.w_{name}"], x),
                    T.matmul(params[f"{prefix}.u_{name}"], state))
        return T.add(pre, params[f"{prefix}.b_{name}"])

    z = T.sigmoid(gate("upd", h_prev))
    r = T.sigmoid(gate("res", h_prev))
    cand = T.tanh(gate("cand", T.mul(r, h_prev)))
    keep = T.add(T.neg(z), 1.0)
    return T.add(T.mul(keep, h_prev), T.mul(z, cand))


def run_bigru(xs: list[T.Tensor], params: dict[str, T.Tensor],
              prefix: str, d_hidden: int) -> tuple[list[T.Tensor], list[T.Tensor]]:
    """Both directional passes; returns per-position state lists (fwd, bwd)."""
    if not xs:
        raise ContractError("run_bigru: empty input sequence")
    h = T.Tensor(np.zeros(d_hidden))
    fwd = []
    for x in xs:
        h = gru_cell_step(x, h, params, f"{prefix}.f")
        fwd.append(h)
    h = T.Tensor(np.zeros(d_hidden))
    bwd_rev = []
    for x in reversed(xs):
        h = gru_cell_step(x, h, params, f"{prefix}.b")
        bwd_rev.append(h)
    return fwd, bwd_rev[::-1]


def encode(x_seq: T.Tensor, params: dict[str, T.Tensor],
           d_attn: int) -> EncodingResult:
    """BiGRU pass; global embedding = projection of both final states."""
    xs = [T.row(x_seq, t) for t in range(x_seq.shape[0])]
    fwd, bwd = run_bigru(xs, params, "enc", d_attn // 2)
    states = T.stack_rows([T.concat([f, b]) for f, b in zip(fwd, bwd)])
    final = T.concat([fwd[-1], bwd[0]])
    global_emb = T.add(T.matmul(params["enc.proj.w"], final), params["enc.proj.b"])
    return EncodingResult(global_emb=global_emb, states=states)


def decode(x_seq: T.Tensor, global_emb: T.Tensor,
           params: dict[str, T.Tensor], d_attn: int) -> T.Tensor:
    """BiGRU over [x_t ; global embedding]; returns (t_max, d_attn) states."""
    xs = [T.concat([T.row(x_seq, t), global_emb]) for t in range(x_seq.shape[0])]
    fwd, bwd = run_bigru(xs, params, "dec", d_attn // 2)
    return T.stack_rows([T.concat([f, b]) for f, b in zip(fwd, bwd)])


def word_logits(h_t: T.Tensor, c_t: T.Tensor,
                params: dict[str, T.Tensor]) -> T.Tensor:
    """Mean-pool the context columns, add the state, project to vocab logits."""
    if c_t.ndim != 2 or h_t.ndim != 1 or c_t.shape[0] != h_t.shape[0]:
        raise ConfigError(f"word_logits: context {c_t.shape} vs state {h_t.shape}")
    pooled = T.add(T.mean_(c_t, axis=1), h_t)
    return T.add(T.matmul(params["wordhead.w"], pooled), params["wordhead.b"])


def word_probs(h_t: T.Tensor, c_t: T.Tensor,
               params: dict[str, T.Tensor]) -> T.Tensor:
    return T.softmax(word_logits(h_t, c_t, params), axis=-1)


def caption_loss(logits_seq: T.Tensor, token_ids: np.ndarray,
                 true_length: int) -> T.Tensor:
    """Mean cross-entropy of reconstructing each non-pad token."""
    if not 1 <= true_length <= logits_seq.shape[0]:
        raise ContractError(
            f"true_length {true_length} out of range for {logits_seq.shape[0]} rows")
    keep = np.arange(true_length)
    sliced = T.gather_rows(logits_seq, keep)
    per_pos = T.softmax_ce_logits(sliced, np.asarray(token_ids)[:true_length])
    return T.mean_(per_pos)
