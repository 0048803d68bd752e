"""Full grounding model: assembly of every component plus the joint loss.

One forward pass shares a single averaged attention context between three
heads: the word-reconstruction head (auxiliary caption loss), the proposal
network, and the region detector. The two metric-bearing ablations swap the
attention variant (no_global_h) or the proposal network's input
(rpn_without_attention); neither touches the detector's input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from . import backbone as B
from . import detector as D
from . import langmodel as L
from . import rpn as R
from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError
from .geometry import Box, ScoredBox
from .rng import SplitMix64, derive_seed
from .text import (EmbeddingTable, TokenizedPhrase, Vocabulary, load_embeddings,
                   random_embeddings, tokenize)


@dataclass
class GroundingModel:
    cfg: ModelConfig
    vocab: Vocabulary
    params: dict[str, T.Tensor]
    anchors: R.AnchorSet = field(init=False)

    def __post_init__(self):
        self.anchors = R.generate_anchors(self.cfg)

    def trainable_params(self) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def tokenize(self, phrase: str) -> TokenizedPhrase:
        return tokenize(phrase, self.vocab, self.cfg.t_max)


@dataclass
class ForwardCore:
    vis: B.VisualFeatures
    enc: L.EncodingResult
    dec_states: T.Tensor                 # (t_max, d_attn)
    steps: list[A.AttentionStep]
    c_hat: A.AveragedContext
    rpn_out: R.RpnOutput


def build_model(cfg: ModelConfig, vocab: Vocabulary, seed: int | None = None) -> GroundingModel:
    """Initialize all parameter groups from per-module derived seeds."""
    master = cfg.seed if seed is None else seed
    params: dict[str, T.Tensor] = {}
    params.update(B.init_backbone_params(SplitMix64(derive_seed(master, "backbone")), cfg))
    params.update(L.init_langmodel_params(SplitMix64(derive_seed(master, "langmodel")),
                                          cfg, len(vocab)))
    params.update(A.init_attention_params(SplitMix64(derive_seed(master, "attention")), cfg))
    params.update(R.init_rpn_params(SplitMix64(derive_seed(master, "rpn")), cfg))
    params.update(D.init_detector_params(SplitMix64(derive_seed(master, "detector")), cfg))

    table = _build_embeddings(cfg, vocab, derive_seed(master, "embedding"))
    params["embed.table"] = T.Tensor(table.matrix, requires_grad=table.trainable)
    return GroundingModel(cfg=cfg, vocab=vocab, params=params)


def _build_embeddings(cfg: ModelConfig, vocab: Vocabulary,
                      seed: int) -> EmbeddingTable:
    if cfg.embedding_file and not cfg.no_embedding_file:
        return load_embeddings(cfg.embedding_file, vocab, cfg.d_word, seed)
    return random_embeddings(vocab, cfg.d_word, seed)


def _step_inputs(model: GroundingModel, tokens: TokenizedPhrase,
                 v_g: T.Tensor) -> T.Tensor:
    """Per-timestep inputs: [word embedding ; pooled visual vector]."""
    emb = T.gather_rows(model.params["embed.table"], tokens.token_ids)
    rows = [T.concat([T.row(emb, t), v_g]) for t in range(tokens.token_ids.shape[0])]
    return T.stack_rows(rows)


def forward_core(model: GroundingModel, image: T.Tensor,
                 tokens: TokenizedPhrase) -> ForwardCore:
    """Shared forward pass up to and including the proposal network."""
    cfg = model.cfg
    vis = B.forward_visual(image, model.params)
    if vis.w_f * vis.h_f != cfg.n_cells:
        raise ConfigError(
            f"feature grid {vis.h_f}x{vis.w_f} does not match config "
            f"image_size {cfg.image_size}")
    x_seq = _step_inputs(model, tokens, vis.v_g)
    enc = L.encode(x_seq, model.params, cfg.d_attn)
    dec_states = L.decode(x_seq, enc.global_emb, model.params, cfg.d_attn)
    steps = []
    for t in range(cfg.t_max):
        h_t = T.row(dec_states, t)
        if cfg.no_global_h:
            steps.append(A.attention_step_no_global(vis.v_a, h_t, model.params))
        else:
            steps.append(A.attention_step(vis.v_a, h_t, enc.global_emb, model.params))
    c_hat = A.average_context(steps, tokens.true_length)
    rpn_in = vis.v_a if cfg.rpn_without_attention else c_hat.c_hat
    rpn_out = R.rpn_forward(rpn_in, model.params, vis.w_f)
    return ForwardCore(vis=vis, enc=enc, dec_states=dec_states, steps=steps,
                       c_hat=c_hat, rpn_out=rpn_out)


def caption_loss_from_core(model: GroundingModel, core: ForwardCore,
                           tokens: TokenizedPhrase) -> T.Tensor:
    logits_rows = []
    for t in range(tokens.true_length):
        h_t = T.row(core.dec_states, t)
        logits_rows.append(L.word_logits(h_t, core.steps[t].context, model.params))
    logits_seq = T.stack_rows(logits_rows)
    return L.caption_loss(logits_seq, tokens.token_ids, tokens.true_length)


def _context_map(core: ForwardCore, cfg: ModelConfig) -> T.Tensor:
    return T.reshape(core.c_hat.c_hat, (cfg.d_attn, core.vis.h_f, core.vis.w_f))


def total_loss(model: GroundingModel, image: T.Tensor, tokens: TokenizedPhrase,
               gts: list[Box], rng: SplitMix64 | None = None,
               ) -> tuple[T.Tensor, dict[str, float], ForwardCore]:
    """Weighted sum of caption, proposal, and detection losses, one pass."""
    cfg = model.cfg
    core = forward_core(model, image, tokens)

    l_cap = caption_loss_from_core(model, core, tokens)

    targets = R.assign_rpn_targets(model.anchors, gts, cfg)
    l_rpn = R.rpn_loss(core.rpn_out, targets, model.anchors, gts, cfg, rng)

    proposals = R.select_proposals(core.rpn_out, model.anchors, cfg)
    det_targets = D.assign_det_targets([p.box for p in proposals], gts, cfg,
                                       rng, include_gt=True)
    ctx_map = _context_map(core, cfg)
    pooled = [D.roi_align(ctx_map, roi, cfg.roi_resolution) for roi in det_targets.rois]
    det_logits, det_deltas = D.detector_forward(pooled, model.params)
    l_det = D.det_loss(det_logits, det_deltas, det_targets, cfg.det_reg_beta)

    total = T.add(T.add(T.mul(l_cap, cfg.w_caption), T.mul(l_rpn, cfg.w_rpn)),
                  T.mul(l_det, cfg.w_detector))
    breakdown = {
        "caption": float(l_cap.data),
        "rpn": float(l_rpn.data),
        "detector": float(l_det.data),
        "total": float(total.data),
    }
    return total, breakdown, core


def run_inference(model: GroundingModel, image: T.Tensor, tokens: TokenizedPhrase,
                  ) -> tuple[list[D.Detection], list[ScoredBox], ForwardCore]:
    """Proposals from the RPN, then detector postprocessing. No grad needed."""
    cfg = model.cfg
    core = forward_core(model, image, tokens)
    proposals = R.select_proposals(core.rpn_out, model.anchors, cfg)
    if not proposals:
        return [], [], core
    ctx_map = _context_map(core, cfg)
    rois = [p.box for p in proposals]
    pooled = [D.roi_align(ctx_map, roi, cfg.roi_resolution) for roi in rois]
    det_logits, det_deltas = D.detector_forward(pooled, model.params)
    detections = D.postprocess(D.relatedness_probs(det_logits),
                               np.asarray(det_deltas.data), rois, cfg,
                               cfg.image_size)
    return detections, proposals, core
