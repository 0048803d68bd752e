"""End-to-end command-line surface: synth, train, eval, predict, inspect."""

import json
import os

import numpy as np
import pytest

from groundnet.cli import _resolve_config, build_parser, main
from groundnet.config import save_config
from groundnet.data import read_dataset

from .conftest import small_config


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    """One synth + short train shared by every CLI test."""
    base = tmp_path_factory.mktemp("cli")
    cfg_path = str(base / "tiny.cfg")
    save_config(small_config(train_steps=4, eval_every=4), cfg_path)
    data = str(base / "data")
    assert main(["synth", "--config", cfg_path, "--out", data]) == 0
    run = str(base / "run")
    assert main(["train", "--config", cfg_path, "--data", data,
                 "--out", run]) == 0
    sample = read_dataset(os.path.join(data, "val.jsonl"))[0]
    return {
        "cfg_path": cfg_path,
        "data": data,
        "run": run,
        "ckpt": os.path.join(run, "best.ckpt"),
        "image": os.path.join(data, sample.image_ref),
        "phrase": sample.phrase,
        "base": base,
    }


def test_synth_writes_dataset_tree(cli_env, capsys):
    data = cli_env["data"]
    for split in ("train", "val", "test"):
        assert os.path.exists(os.path.join(data, f"{split}.jsonl"))
    assert os.path.isdir(os.path.join(data, "images"))
    # every referenced image exists
    for split in ("train", "val", "test"):
        for s in read_dataset(os.path.join(data, f"{split}.jsonl")):
            assert os.path.exists(os.path.join(data, s.image_ref))


def test_train_writes_checkpoints(cli_env):
    assert os.path.exists(cli_env["ckpt"])
    assert os.path.exists(os.path.join(cli_env["run"], "last.ckpt"))
    assert os.path.exists(os.path.join(cli_env["run"], "metrics_log.csv"))


def test_eval_writes_reports(cli_env, capsys, tmp_path):
    out = str(tmp_path / "reports")
    rc = main(["eval", "--ckpt", cli_env["ckpt"], "--data", cli_env["data"],
               "--split", "val", "--out", out])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "mAP" in stdout and "R@1" in stdout
    csv_path = os.path.join(out, "report_val.csv")
    txt_path = os.path.join(out, "report_val.txt")
    assert os.path.exists(csv_path) and os.path.exists(txt_path)
    lines = open(csv_path).read().splitlines()
    assert lines[0] == "metric,value"
    parsed = {row.split(",")[0]: float(row.split(",")[1]) for row in lines[1:]}
    assert {"R@1", "R@5", "R@10", "mAP", "hit_rate"} <= set(parsed)
    # text report carries the same numbers at 4 decimal places
    text = open(txt_path).read()
    assert f"{parsed['mAP']:.4f}" in text


def test_eval_limit_restricts_queries(cli_env, capsys, tmp_path):
    rc = main(["eval", "--ckpt", cli_env["ckpt"], "--data", cli_env["data"],
               "--split", "val", "--limit", "1"])
    assert rc == 0
    assert "mAP" in capsys.readouterr().out


def test_predict_prints_json_detections(cli_env, capsys):
    rc = main(["predict", "--ckpt", cli_env["ckpt"],
               "--image", cli_env["image"], "--phrase", cli_env["phrase"]])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[0])
    assert isinstance(payload, list)
    size = small_config().image_size
    for det in payload:
        x1, y1, x2, y2 = det["box"]
        assert 0 <= x1 < x2 <= size and 0 <= y1 < y2 <= size
        assert 0.0 <= det["relatedness"] <= 1.0


def test_predict_attention_export(cli_env, capsys, tmp_path):
    attn = str(tmp_path / "attn")
    rc = main(["predict", "--ckpt", cli_env["ckpt"],
               "--image", cli_env["image"], "--phrase", cli_env["phrase"],
               "--attn", attn])
    assert rc == 0
    captured = capsys.readouterr()
    json.loads(captured.out.splitlines()[0])     # stdout still valid JSON
    assert os.path.exists(os.path.join(attn, "alpha_mean.csv"))
    assert os.path.exists(os.path.join(attn, "alpha_mean.pgm"))


def test_inspect_attention_grids(cli_env, capsys, tmp_path):
    out = str(tmp_path / "grids")
    rc = main(["inspect-attention", "--ckpt", cli_env["ckpt"],
               "--image", cli_env["image"], "--phrase", cli_env["phrase"],
               "--out", out])
    assert rc == 0
    printed = capsys.readouterr().out.splitlines()
    csvs = sorted(f for f in os.listdir(out) if f.endswith(".csv"))
    pgms = sorted(f for f in os.listdir(out) if f.endswith(".pgm"))
    assert len(csvs) == len(pgms) >= 2        # per-step grids + the mean
    assert "alpha_t00.csv" in csvs and "alpha_mean.csv" in csvs
    assert set(printed) == {os.path.join(out, f) for f in csvs + pgms}
    for name in csvs:
        rows = [[float(v) for v in line.split(",")]
                for line in open(os.path.join(out, name)).read().splitlines()]
        grid = np.array(rows)
        w_f = small_config().image_size // 16
        assert grid.shape == (w_f, w_f)
        assert grid.sum() == pytest.approx(1.0, abs=1e-6)


def test_seed_flag_overrides_config(cli_env):
    parser = build_parser()
    args = parser.parse_args(["train", "--config", cli_env["cfg_path"],
                              "--data", cli_env["data"], "--seed", "99"])
    assert _resolve_config(args).seed == 99


@pytest.mark.parametrize("letter,field", [
    ("a", "no_embedding_file"),
    ("b", "no_global_h"),
    ("c", "rpn_without_attention"),
])
def test_ablation_flags_map_to_config(cli_env, letter, field):
    parser = build_parser()
    args = parser.parse_args(["train", "--config", cli_env["cfg_path"],
                              "--data", cli_env["data"], "--ablation", letter])
    cfg = _resolve_config(args)
    assert getattr(cfg, field) is True
    others = {"no_embedding_file", "no_global_h",
              "rpn_without_attention"} - {field}
    assert all(getattr(cfg, f) is False for f in others)


def test_preset_flag_selects_dimensions():
    parser = build_parser()
    args = parser.parse_args(["synth", "--preset", "paper"])
    cfg = _resolve_config(args)
    assert cfg.image_size == 512 and cfg.d_attn == 512


def test_missing_required_flag_exits():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train"])          # --data is required
    with pytest.raises(SystemExit):
        build_parser().parse_args(["predict", "--ckpt", "x"])
