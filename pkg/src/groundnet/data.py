"""Synthetic grounding scenes, phrase queries, JSONL interchange, and PPM codec.

Scenes are solid colored shapes on a gray background. Every query template
carries exhaustive ground truth: the gt list is exactly the set of objects
matching the phrase predicate, so multi-region queries arise naturally when a
scene contains duplicated (color, shape) pairs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import CodecError, GenerationError, ParseError
from .geometry import Box, iou
from .rng import SplitMix64, derive_seed

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
}
SIDES = ("left", "right", "top", "bottom")
BACKGROUND = 0.5
MAX_PLACEMENT_TRIES = 1000
MAX_PAIR_IOU = 0.3


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    box: Box


@dataclass
class SyntheticScene:
    image: np.ndarray          # (3, S, S) float in [0, 1]
    objects: list[SceneObject]
    size: int


@dataclass(frozen=True)
class PhraseSample:
    image_ref: str
    phrase: str
    gt_boxes: tuple[Box, ...]

    def __post_init__(self):
        if not self.phrase:
            raise ParseError("phrase must be non-empty")
        if not self.gt_boxes:
            raise ParseError("gt_boxes must be non-empty")


def _shape_mask(shape: str, cx: float, cy: float, half: float, size: int) -> np.ndarray:
    ys = np.arange(size, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(size, dtype=np.float64)[None, :] + 0.5
    if shape == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    if shape == "triangle":
        # apex at top center, base along the bottom edge of the box
        depth = ys - (cy - half)
        return (depth >= 0) & (ys <= cy + half) & (np.abs(xs - cx) <= depth / 2.0)
    raise GenerationError(f"unknown shape {shape!r}")


def render_scene(objects: list[SceneObject], size: int, noise_sigma: float,
                 rng: SplitMix64) -> np.ndarray:
    image = np.full((3, size, size), BACKGROUND, dtype=np.float64)
    for obj in objects:
        cx, cy = obj.box.center
        half = obj.box.width / 2.0
        mask = _shape_mask(obj.shape, cx, cy, half, size)
        for c, value in enumerate(COLORS[obj.color]):
            channel = image[c]
            channel[mask] = value
    if noise_sigma > 0:
        noise = rng.normal(image.shape) * noise_sigma
        image = np.clip(image + noise, 0.0, 1.0)
    return image


def generate_scene(seed: int, config: ModelConfig) -> SyntheticScene:
    """Rejection-sample non-overlapping objects and render them."""
    rng = SplitMix64(seed)
    size = config.image_size
    n = rng.randint1(config.objects_min, config.objects_max + 1)
    kinds = [(SHAPES[rng.randint1(0, len(SHAPES))],
              list(COLORS)[rng.randint1(0, len(COLORS))]) for _ in range(n)]
    if n >= 2 and rng.uniform1() < config.duplicate_prob:
        kinds[1] = kinds[0]  # force one duplicated (shape, color) pair
    if n >= 4 and rng.uniform1() < config.duplicate_prob:
        kinds[3] = kinds[2]  # larger scenes get a second duplicated pair

    boxes: list[Box] = []
    for _ in range(n):
        for attempt in range(MAX_PLACEMENT_TRIES + 1):
            if attempt == MAX_PLACEMENT_TRIES:
                raise GenerationError(
                    f"could not place object after {MAX_PLACEMENT_TRIES} tries "
                    f"(seed {seed}, {len(boxes)} placed)")
            half = rng.randint1(config.object_half_min, config.object_half_max + 1)
            cx = rng.randint1(half + 1, size - half)
            cy = rng.randint1(half + 1, size - half)
            cand = Box(cx - half, cy - half, cx + half, cy + half)
            if all(iou(cand, b) < MAX_PAIR_IOU for b in boxes):
                boxes.append(cand)
                break
    objects = [SceneObject(shape, color, box)
               for (shape, color), box in zip(kinds, boxes)]
    image = render_scene(objects, size, config.noise_sigma, rng)
    return SyntheticScene(image=image, objects=objects, size=size)


def _category_matches(scene: SyntheticScene, shape: str, color: str) -> list[SceneObject]:
    return [o for o in scene.objects if o.shape == shape and o.color == color]


def _half_predicate(obj: SceneObject, side: str, size: int) -> bool:
    cx, cy = obj.box.center
    mid = size / 2.0
    if side == "left":
        return cx < mid
    if side == "right":
        return cx > mid
    if side == "top":
        return cy < mid
    return cy > mid


def relational_matches(scene: SyntheticScene, shape: str, color: str,
                       ref_shape: str) -> list[SceneObject]:
    """Objects of (color, shape) strictly left of some object of ref_shape."""
    refs = [o for o in scene.objects if o.shape == ref_shape]
    out = []
    for o in _category_matches(scene, shape, color):
        if any(r is not o and o.box.center[0] < r.box.center[0] for r in refs):
            out.append(o)
    return out


def generate_queries(scene: SyntheticScene, seed: int,
                     image_ref: str = "") -> list[PhraseSample]:
    """Emit templated phrases with exhaustive ground truth.

    Three templates: plain category (all matches, possibly multi-region),
    positional halves (emitted only when exactly one object of the shape sits
    in that half), and a seeded subset of left-of relations.
    """
    rng = SplitMix64(seed)
    samples: list[PhraseSample] = []

    seen = sorted({(o.color, o.shape) for o in scene.objects})
    for color, shape in seen:
        matches = _category_matches(scene, shape, color)
        samples.append(PhraseSample(image_ref, f"{color} {shape}",
                                    tuple(o.box for o in matches)))

    positional: list[PhraseSample] = []
    for shape in SHAPES:
        of_shape = [o for o in scene.objects if o.shape == shape]
        if not of_shape:
            continue
        for side in SIDES:
            in_half = [o for o in of_shape if _half_predicate(o, side, scene.size)]
            if len(in_half) == 1 and len(of_shape) > 1:
                positional.append(PhraseSample(image_ref, f"the {shape} on the {side}",
                                               (in_half[0].box,)))
    if positional:
        keep = min(2, len(positional))
        idx = sorted(rng.choice(len(positional), keep))
        samples.extend(positional[i] for i in idx)

    relational: list[PhraseSample] = []
    for color, shape in seen:
        for ref_shape in SHAPES:
            if ref_shape == shape:
                continue
            matches = relational_matches(scene, shape, color, ref_shape)
            if matches:
                relational.append(PhraseSample(
                    image_ref, f"{color} {shape} left of the {ref_shape}",
                    tuple(o.box for o in matches)))
    if relational:
        keep = min(2, len(relational))
        idx = sorted(rng.choice(len(relational), keep))
        samples.extend(relational[i] for i in idx)
    return samples


# --- JSONL interchange ---

def sample_to_json(sample: PhraseSample) -> str:
    rec = {"image": sample.image_ref, "phrase": sample.phrase,
           "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in sample.gt_boxes]}
    return json.dumps(rec, separators=(",", ":"))


def write_dataset(samples: list[PhraseSample], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(sample_to_json(sample) + "\n")


def read_dataset(path: str) -> list[PhraseSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON: {exc}") from None
            if not isinstance(rec, dict) or not {"image", "phrase", "boxes"} <= set(rec):
                raise ParseError(f"{path}:{lineno}: expected image/phrase/boxes keys")
            if not rec["phrase"]:
                raise ParseError(f"{path}:{lineno}: empty phrase")
            if not rec["boxes"]:
                raise ParseError(f"{path}:{lineno}: empty boxes array")
            boxes = []
            for raw in rec["boxes"]:
                if not isinstance(raw, list) or len(raw) != 4:
                    raise ParseError(f"{path}:{lineno}: box must be [x1,y1,x2,y2]")
                try:
                    boxes.append(Box(*map(float, raw)))
                except Exception as exc:
                    raise ParseError(f"{path}:{lineno}: invalid box {raw}: {exc}") from None
            samples.append(PhraseSample(rec["image"], rec["phrase"], tuple(boxes)))
    return samples


# --- P6 PPM codec ---

def write_ppm(path: str, image: np.ndarray) -> None:
    """Quantize a (3, H, W) image in [0, 1] to an 8-bit binary pixmap."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise CodecError(f"expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    payload = quantized.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload)


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise CodecError(f"{path}: bad magic (want P6)")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CodecError(f"{path}: truncated header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise CodecError(f"{path}: non-numeric header fields {fields}") from None
    if maxval != 255:
        raise CodecError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    payload = blob[pos:pos + need]
    if len(payload) != need:
        raise CodecError(f"{path}: payload has {len(payload)} bytes, want {need}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


# --- dataset build driver ---

def generate_dataset(root: str, config: ModelConfig) -> dict[str, int]:
    """Write images/*.ppm plus {train,val,test}.jsonl under root.

    Returns sample counts per split. Fails if the multi-region mix of any
    split falls below the configured minimum.
    """
    image_dir = os.path.join(root, "images")
    os.makedirs(image_dir, exist_ok=True)
    counts = {}
    split_sizes = {"train": config.scenes_train, "val": config.scenes_val,
                   "test": config.scenes_test}
    for split, n_scenes in split_sizes.items():
        samples: list[PhraseSample] = []
        for i in range(n_scenes):
            scene_seed = derive_seed(config.seed, f"{split}-scene-{i}")
            query_seed = derive_seed(config.seed, f"{split}-query-{i}")
            scene = generate_scene(scene_seed, config)
            name = f"{split}_{i:05d}.ppm"
            write_ppm(os.path.join(image_dir, name), scene.image)
            samples.extend(generate_queries(scene, query_seed, f"images/{name}"))
        multi = sum(1 for s in samples if len(s.gt_boxes) >= 2)
        if samples and multi / len(samples) < config.min_multi_region_frac:
            raise GenerationError(
                f"{split}: multi-region fraction {multi / len(samples):.3f} below "
                f"{config.min_multi_region_frac}; raise duplicate_prob")
        write_dataset(samples, os.path.join(root, f"{split}.jsonl"))
        counts[split] = len(samples)
    return counts
