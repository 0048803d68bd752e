"""Command-line surface: synth, train, eval, predict, inspect-attention."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .attention import export_heatmap, write_heatmap_csv, write_heatmap_pgm
from .backbone import resize_pad
from .checkpoint import load_checkpoint
from .config import ModelConfig, load_config, preset_config
from .data import generate_dataset, read_ppm
from .evaluation import evaluate_split
from .metrics import format_report_csv, format_report_text
from .model import run_inference
from .tensor import Tensor
from .training import train


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file applied over the preset")
    parser.add_argument("--preset", choices=("desk", "paper"), default="desk")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--ablation", choices=("a", "b", "c"),
                        help="model variation: a=learned embeddings, "
                             "b=no global phrase embedding, c=plain-feature RPN")
    parser.add_argument("--out", help="output directory")


def _resolve_config(args) -> ModelConfig:
    cfg = preset_config(args.preset)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)
    return cfg


def _load_image_tensor(path: str, size: int) -> Tensor:
    return Tensor(resize_pad(read_ppm(path), size))


def _export_attention(core, true_length: int, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    w_f = core.vis.w_f
    written = []
    grids = []
    for t in range(true_length):
        grid = export_heatmap(core.steps[t].alpha, w_f)
        grids.append(grid)
        for ext, writer in (("csv", write_heatmap_csv), ("pgm", write_heatmap_pgm)):
            path = os.path.join(out_dir, f"alpha_t{t:02d}.{ext}")
            writer(path, grid)
            written.append(path)
    mean_grid = np.mean(grids, axis=0)
    for ext, writer in (("csv", write_heatmap_csv), ("pgm", write_heatmap_pgm)):
        path = os.path.join(out_dir, f"alpha_mean.{ext}")
        writer(path, mean_grid)
        written.append(path)
    return written


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = args.out or "data"
    counts = generate_dataset(out, cfg)
    for split, n in counts.items():
        print(f"{split}: {n} queries")
    print(f"dataset written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = args.out or "runs/latest"
    summary = train(cfg, args.data, out)
    print(f"best mAP {summary['best_map']:.4f} at step {summary['best_step']}")
    print(f"checkpoints: {summary['best_ckpt']} / {summary['last_ckpt']}")
    return 0


def cmd_eval(args) -> int:
    model, _, _, _ = load_checkpoint(args.ckpt)
    report = evaluate_split(model, args.data, args.split, limit=args.limit)
    sys.stdout.write(format_report_text(report))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        csv_path = os.path.join(args.out, f"report_{args.split}.csv")
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_report_csv(report))
        txt_path = os.path.join(args.out, f"report_{args.split}.txt")
        with open(txt_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_report_text(report))
        print(f"report written to {csv_path}")
    return 0


def cmd_predict(args) -> int:
    model, _, _, _ = load_checkpoint(args.ckpt)
    image = _load_image_tensor(args.image, model.cfg.image_size)
    tokens = model.tokenize(args.phrase)
    detections, _, core = run_inference(model, image, tokens)
    payload = [{"box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2],
                "relatedness": d.relatedness} for d in detections]
    print(json.dumps(payload))
    if args.attn:
        for path in _export_attention(core, tokens.true_length, args.attn):
            print(path, file=sys.stderr)
    return 0


def cmd_inspect_attention(args) -> int:
    model, _, _, _ = load_checkpoint(args.ckpt)
    image = _load_image_tensor(args.image, model.cfg.image_size)
    tokens = model.tokenize(args.phrase)
    _, _, core = run_inference(model, image, tokens)
    out = args.out or "attention"
    for path in _export_attention(core, tokens.true_length, out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundnet",
        description="Phrase grounding on synthetic scenes: data synthesis, "
                    "training, evaluation, prediction, attention inspection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset root from synth")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--limit", type=int, help="evaluate only the first N queries")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="detections for one image + phrase")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="P6 pixmap path")
    p.add_argument("--phrase", required=True)
    p.add_argument("--attn", help="directory for attention heatmap export")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect-attention",
                       help="write per-timestep attention grids")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--phrase", required=True)
    p.set_defaults(func=cmd_inspect_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
