"""Joint training: one image/phrase pair per step, all three losses together.

Sample order, minibatch sampling inside the losses, and evaluation subsets
are all driven by seeds derived from the master seed, so a config+seed pair
reproduces its logs byte for byte.
"""

from __future__ import annotations

import os
import time

import numpy as np

from .checkpoint import save_checkpoint
from .config import ModelConfig, save_config
from .data import read_dataset
from .errors import ContractError, NumericError
from .evaluation import evaluate_samples, load_sample_image
from .model import GroundingModel, build_model, total_loss
from .optim import Adam
from .rng import SplitMix64, derive_seed
from .tensor import backward, recording
from .text import build_vocab

METRIC_KEYS = ("R@1", "R@5", "R@10", "mAP", "hit_rate", "multi2")


def _format_row(values) -> str:
    out = []
    for v in values:
        out.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
    return ",".join(out)


def train(cfg: ModelConfig, dataset_root: str, out_dir: str,
          quiet: bool = False) -> dict:
    """Run the loop; writes logs and checkpoints under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    train_samples = read_dataset(os.path.join(dataset_root, "train.jsonl"))
    val_samples = read_dataset(os.path.join(dataset_root, "val.jsonl"))
    if not train_samples:
        raise ContractError("train: empty training split")
    vocab = build_vocab([s.phrase for s in train_samples])
    model = build_model(cfg, vocab)
    opt = Adam(model.trainable_params(), lr=cfg.lr, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.opt_eps)
    save_config(cfg, os.path.join(out_dir, "config.txt"))

    val_subset = val_samples[:cfg.eval_queries]
    train_rows = ["step,caption,rpn,detector,total"]
    metric_rows = ["step," + ",".join(METRIC_KEYS)]
    best_map = -1.0
    best_step = -1
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")

    step = 0
    epoch = 0
    t0 = time.time()
    while step < cfg.train_steps:
        order = SplitMix64(derive_seed(cfg.seed, f"epoch-{epoch}")).shuffle(
            list(range(len(train_samples))))
        epoch += 1
        for idx in order:
            if step >= cfg.train_steps:
                break
            step += 1
            sample = train_samples[idx]
            image = load_sample_image(dataset_root, sample, cfg)
            tokens = model.tokenize(sample.phrase)
            step_rng = SplitMix64(derive_seed(cfg.seed, f"step-{step}"))
            with recording() as tape:
                loss, parts, _ = total_loss(model, image, tokens,
                                            list(sample.gt_boxes), step_rng)
                backward(loss, tape)
            if not np.isfinite(parts["total"]):
                raise NumericError(f"non-finite loss at step {step}: {parts}")
            if step % cfg.grad_accum == 0:
                if cfg.grad_accum > 1:
                    for p in opt.params.values():
                        if p.grad is not None:
                            p.grad /= cfg.grad_accum
                if cfg.lr_decay_at > 0 and step > cfg.lr_decay_at:
                    opt.lr = cfg.lr * cfg.lr_decay_factor
                opt.step()
                opt.zero_grad()
            train_rows.append(_format_row(
                [step, parts["caption"], parts["rpn"], parts["detector"],
                 parts["total"]]))
            if not quiet and step % 200 == 0:
                rate = step / (time.time() - t0)
                print(f"step {step}/{cfg.train_steps}  "
                      f"loss {parts['total']:.4f}  ({rate:.2f} steps/s)", flush=True)

            if step % cfg.eval_every == 0 or step == cfg.train_steps:
                report = evaluate_samples(model, val_subset, dataset_root)
                metric_rows.append(_format_row(
                    [step] + [report[k] for k in METRIC_KEYS]))
                if not quiet:
                    print(f"  val @ {step}: mAP {report['mAP']:.4f} "
                          f"R@1 {report['R@1']:.1f} hit {report['hit_rate']:.1f}",
                          flush=True)
                if report["mAP"] > best_map:
                    best_map = report["mAP"]
                    best_step = step
                    save_checkpoint(best_path, model, opt, step)

    save_checkpoint(last_path, model, opt, step)
    if best_step < 0:
        save_checkpoint(best_path, model, opt, step)
        best_step = step
    _write_lines(os.path.join(out_dir, "train_log.csv"), train_rows)
    _write_lines(os.path.join(out_dir, "metrics_log.csv"), metric_rows)
    return {
        "model": model,
        "best_map": best_map,
        "best_step": best_step,
        "best_ckpt": best_path,
        "last_ckpt": last_path,
        "train_log": os.path.join(out_dir, "train_log.csv"),
        "metrics_log": os.path.join(out_dir, "metrics_log.csv"),
        "steps": step,
    }


def _write_lines(path: str, rows: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


def overfit_single_sample(cfg: ModelConfig, dataset_root: str,
                          steps: int = 300) -> list[float]:
    """Optimization smoke test: repeat one sample, return per-step totals."""
    samples = read_dataset(os.path.join(dataset_root, "train.jsonl"))
    vocab = build_vocab([s.phrase for s in samples])
    model = build_model(cfg, vocab)
    opt = Adam(model.trainable_params(), lr=cfg.lr, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.opt_eps)
    sample = samples[0]
    image = load_sample_image(dataset_root, sample, cfg)
    tokens = model.tokenize(sample.phrase)
    losses = []
    for step in range(1, steps + 1):
        step_rng = SplitMix64(derive_seed(cfg.seed, f"overfit-{step}"))
        with recording() as tape:
            loss, parts, _ = total_loss(model, image, tokens,
                                        list(sample.gt_boxes), step_rng)
            backward(loss, tape)
        opt.step()
        opt.zero_grad()
        losses.append(parts["total"])
    return losses
