"""Model and training configuration: presets plus a flat key=value file format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Every architecture, training, and data knob in one place.

    Ablation flags correspond to the three model variations:
      (a) no_embedding_file   -- learn the word embedding instead of loading one
      (b) no_global_h         -- attention scores and context without the
                                 phrase-global embedding
      (c) rpn_without_attention -- feed the proposal network the raw projected
                                 visual features instead of the averaged context
    """

    preset: str = "desk"
    # core dimensions
    image_size: int = 128            # S; must be divisible by 16
    d_backbone: int = 64             # channels out of the backbone trunk
    d_visual: int = 64               # D_e: channels of the projected feature map
    d_attn: int = 64                 # D_a: decoder state / attention width
    d_word: int = 32                 # D_w: word embedding width
    t_max: int = 20                  # 18 words + start/end
    # anchors
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    # proposal network
    rpn_hidden: int = 64
    rpn_iou_positive: float = 0.7
    rpn_iou_negative: float = 0.3
    rpn_batch: int = 256
    rpn_nms_thresh: float = 0.7
    rpn_reg_beta: float = 0.111      # smooth-L1 corner; 1/9 per the usual recipe
    proposal_count: int = 200        # N
    proposal_min_side: float = 1.0
    # detector
    roi_resolution: int = 7          # P
    det_hidden: int = 128
    det_roi_batch: int = 64
    det_related_fraction: float = 0.25
    det_negative_min_iou: float = 0.1  # prefer not-related rois overlapping at least this much
    det_iou_related: float = 0.5
    det_reg_beta: float = 0.111      # smooth-L1 corner for roi refinement
    det_score_thresh: float = 0.5    # relatedness threshold
    det_nms_thresh: float = 0.4
    # losses
    w_caption: float = 1.0
    w_rpn: float = 1.0
    w_detector: float = 1.0
    # optimizer
    lr: float = 1e-3
    lr_decay_at: int = 0             # step after which lr is scaled; 0 = never
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    grad_accum: int = 1
    # training driver
    seed: int = 7
    train_steps: int = 4000
    eval_every: int = 1000
    eval_queries: int = 120          # val queries per periodic evaluation
    dtype: str = "float32"
    # embeddings
    embedding_file: str = ""         # empty -> random trainable table
    # synthetic data
    scenes_train: int = 2000
    scenes_val: int = 200
    scenes_test: int = 200
    objects_min: int = 2
    objects_max: int = 6
    object_half_min: int = 10
    object_half_max: int = 28
    noise_sigma: float = 0.02
    duplicate_prob: float = 0.75
    min_multi_region_frac: float = 0.2
    hit_rate_n: int = 200
    # ablations
    no_embedding_file: bool = False
    no_global_h: bool = False
    rpn_without_attention: bool = False

    def __post_init__(self):
        if self.image_size % 16 != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by 16")
        if self.d_attn % 2 != 0:
            raise ConfigError(f"d_attn {self.d_attn} must be even (two directions)")
        if self.t_max < 3:
            raise ConfigError(f"t_max {self.t_max} < 3")
        for name in ("image_size", "d_backbone", "d_visual", "d_attn", "d_word",
                     "rpn_hidden", "det_hidden", "roi_resolution", "proposal_count"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("w_caption", "w_rpn", "w_detector"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.det_negative_min_iou < self.det_iou_related:
            raise ConfigError("det_negative_min_iou must lie in [0, det_iou_related)")
        if not self.anchor_ratios or not self.anchor_scales:
            raise ConfigError("anchor ratios/scales must be non-empty")
        if any(r <= 0 for r in self.anchor_ratios) or any(s <= 0 for s in self.anchor_scales):
            raise ConfigError("anchor ratios/scales must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype {self.dtype!r} not in (float32, float64)")

    @property
    def feat_size(self) -> int:
        """Feature-map side length: image_size / 16."""
        return self.image_size // 16

    @property
    def n_cells(self) -> int:
        return self.feat_size * self.feat_size

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_ratios) * len(self.anchor_scales)

    def with_ablation(self, code: str) -> "ModelConfig":
        """Return a copy with ablation a/b/c enabled."""
        flags = {"a": "no_embedding_file", "b": "no_global_h", "c": "rpn_without_attention"}
        if code not in flags:
            raise ConfigError(f"unknown ablation {code!r}; expected a, b, or c")
        return replace(self, **{flags[code]: True})


_PRESETS = {
    "desk": {},
    "paper": {
        "preset": "paper",
        "image_size": 512,
        "d_backbone": 128,
        "d_visual": 512,
        "d_attn": 512,
        "d_word": 300,
        "anchor_scales": (64.0, 128.0, 256.0),
    },
}


def preset_config(name: str) -> ModelConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(_PRESETS)}")
    return ModelConfig(**_PRESETS[name])


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: ModelConfig) -> str:
    """Serialize as 'key = value' lines, one field per line."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse 'key = value' lines over an optional base config."""
    known = {f.name: f for f in fields(ModelConfig)}
    values = {f.name: getattr(base, f.name) for f in fields(ModelConfig)} if base else {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = (p.strip() for p in line.partition("="))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(val, known[key].type, key, lineno)
    return ModelConfig(**values)


def _parse_value(val: str, ftype: str, key: str, lineno: int):
    try:
        if ftype == "bool":
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError(val)
        if ftype == "int":
            return int(val)
        if ftype == "float":
            return float(val)
        if ftype.startswith("tuple"):
            return tuple(float(p) for p in val.split(",") if p.strip())
        return val
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {val!r} for {key}") from None


def load_config(path: str, base: ModelConfig | None = None) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read(), base=base)


def save_config(cfg: ModelConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))
