"""Synthetic referring-expression scenes.

Each scene is a small RGB canvas with 2..k solid shapes. Every shape gets a
description ("small red circle", optionally "... top left") that picks it out
uniquely inside its scene, and a pixel box. Output mirrors the RefCOCO
schema at toy scale: one JSON-lines manifest plus one PPM per image.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
    "purple": (150, 60, 190),
}
SIZES = {"small": 16, "large": 24}
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
SPLITS = ("train", "val", "testA", "testB")
BACKGROUND = 60
BACKGROUND_NOISE = 12


def grammar_words() -> list[str]:
    """Every word a description can contain, in a fixed order."""
    return [*SIZES, *COLORS, *SHAPES, *ROWS, *COLS]


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnnotatedObject:
    shape: str
    color: str
    size: str
    bbox_px: tuple[int, int, int, int]
    qualifier: str | None = None

    @property
    def description(self) -> str:
        words = [self.size, self.color, self.shape]
        if self.qualifier:
            words.append(self.qualifier)
        return " ".join(words)


@dataclass
class SceneSample:
    id: str
    image: np.ndarray  # H x W x 3 uint8
    objects: list[AnnotatedObject]
    split: str = "train"

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def pixels(self) -> np.ndarray:
        """Image as float32 in [0, 1]."""
        return self.image.astype(np.float32) / 255.0

    def find(self, description: str) -> AnnotatedObject:
        matches = select_objects(self, description)
        if len(matches) != 1:
            raise KeyError(f"{description!r} selects {len(matches)} objects in {self.id}")
        return matches[0]


@dataclass
class SceneConfig:
    counts: dict[str, int] = field(default_factory=lambda: {"train": 2000, "val": 300})
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 4
    iou_cap: float = 0.1
    position_step: int = 8
    position_qualifier: bool = False
    seed: int = 7
    max_retries: int = 200

    def validate(self) -> None:
        if not self.counts or any(n <= 0 for n in self.counts.values()):
            raise ValueError("every split count must be > 0")
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown splits: {sorted(unknown)}")
        if self.min_objects < 2 or self.max_objects < self.min_objects:
            raise ValueError("objects per scene must satisfy 2 <= min <= max")
        if self.max_objects > len(SHAPES) * len(COLORS):
            raise ValueError("more objects than distinct color/shape pairs")
        if max(SIZES.values()) > self.image_size:
            raise ValueError("image too small for the largest shape")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class DatasetManifest:
    split: str
    ids: list[str]
    files: list[str]
    config_hash: str
    seed: int


# -- bounding boxes -----------------------------------------------------------

def _check_box(bbox, width, height):
    x0, y0, x1, y1 = bbox
    if width <= 0 or height <= 0:
        raise ValueError("image extent must be positive")
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate box {tuple(bbox)}")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise ValueError(f"box {tuple(bbox)} outside {width}x{height} image")


def _round_half_up(q: Fraction) -> int:
    return math.floor(q + Fraction(1, 2))


def normalize_bbox(bbox_px, width, height) -> tuple[int, int, int, int]:
    """Pixel box -> integer box on the 0..1000 scale (round half up)."""
    _check_box(bbox_px, width, height)
    x0, y0, x1, y1 = (Fraction(v) for v in bbox_px)
    w, h = Fraction(width), Fraction(height)
    return (
        _round_half_up(x0 / w * 1000),
        _round_half_up(y0 / h * 1000),
        _round_half_up(x1 / w * 1000),
        _round_half_up(y1 / h * 1000),
    )


def denormalize_bbox(norm_bbox, width, height) -> tuple[float, float, float, float]:
    if any(not 0 <= v <= 1000 for v in norm_bbox):
        raise ValueError(f"normalized coordinate out of range in {tuple(norm_bbox)}")
    x0, y0, x1, y1 = norm_bbox
    return (x0 / 1000 * width, y0 / 1000 * height, x1 / 1000 * width, y1 / 1000 * height)


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


# -- descriptions ---------------------------------------------------------------

def parse_description(desc: str) -> dict[str, str]:
    """Map a description back onto attribute slots; raises on unknown words."""
    attrs: dict[str, str] = {}
    words = desc.split()
    slots = [("size", SIZES), ("color", COLORS), ("shape", SHAPES)]
    for word in words[:3]:
        for slot, vocab in slots:
            if word in vocab:
                attrs[slot] = word
                break
        else:
            raise ValueError(f"word {word!r} not in the scene grammar")
    rest = words[3:]
    if rest:
        if len(rest) != 2 or rest[0] not in ROWS or rest[1] not in COLS:
            raise ValueError(f"bad position qualifier in {desc!r}")
        attrs["qualifier"] = " ".join(rest)
    return attrs


def select_objects(scene: SceneSample, desc: str) -> list[AnnotatedObject]:
    attrs = parse_description(desc)
    hits = []
    for obj in scene.objects:
        if all(getattr(obj, slot) == val for slot, val in attrs.items() if slot != "qualifier"):
            if "qualifier" in attrs and _qualifier(obj.bbox_px, scene.width, scene.height) != attrs["qualifier"]:
                continue
            hits.append(obj)
    return hits


def _qualifier(bbox, width, height) -> str:
    cx = (bbox[0] + bbox[2]) / 2
    cy = (bbox[1] + bbox[3]) / 2
    return f"{ROWS[min(2, int(3 * cy / height))]} {COLS[min(2, int(3 * cx / width))]}"


# -- rendering ----------------------------------------------------------------

def _shape_mask(shape: str, bbox, height: int, width: int) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    inside = (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
    if shape == "square":
        return inside
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    if shape == "circle":
        r = (x1 - x0) / 2
        return inside & ((px - cx) ** 2 + (py - cy) ** 2 <= r * r)
    if shape == "triangle":
        # apex at top centre, base along the bottom edge
        half = (x1 - x0) / 2 * (py - y0) / (y1 - y0)
        return inside & (np.abs(px - cx) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def render(objects, size: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.integers(-BACKGROUND_NOISE, BACKGROUND_NOISE + 1, size=(size, size, 3))
    image = (BACKGROUND + noise).astype(np.uint8)
    for obj in objects:
        mask = _shape_mask(obj.shape, obj.bbox_px, size, size)
        image[mask] = COLORS[obj.color]
    return image


def generate_scene(config: SceneConfig, split: str, index: int) -> SceneSample:
    """One scene as a pure function of (config, split, index)."""
    rng = np.random.default_rng([config.seed, SPLITS.index(split), index])
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    pairs = [(c, s) for c in COLORS for s in SHAPES]
    step, size = config.position_step, config.image_size
    for _attempt in range(20):
        picks = rng.choice(len(pairs), size=n_obj, replace=False)
        placed: list[AnnotatedObject] = []
        for k in picks:
            color, shape = pairs[int(k)]
            size_name = list(SIZES)[int(rng.integers(len(SIZES)))]
            extent = SIZES[size_name]
            slots = (size - extent) // step + 1
            for _ in range(config.max_retries):
                x0 = int(rng.integers(slots)) * step
                y0 = int(rng.integers(slots)) * step
                box = (x0, y0, x0 + extent, y0 + extent)
                if all(box_iou(box, o.bbox_px) <= config.iou_cap for o in placed):
                    break
            else:
                break
            qual = _qualifier(box, size, size) if config.position_qualifier else None
            placed.append(AnnotatedObject(shape, color, size_name, box, qual))
        if len(placed) == n_obj:
            image = render(placed, size, rng)
            return SceneSample(f"{split}-{index:05d}", image, placed, split)
    raise PlacementError(
        f"could not place {n_obj} objects in {split}-{index:05d} under IoU cap {config.iou_cap}"
    )


# -- files ----------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image, np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 PPM")
    w, h = int(parts[1]), int(parts[2])
    pixels = parts[4] if len(parts) > 4 else b""
    return np.frombuffer(pixels[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def scene_to_json(scene: SceneSample, file: str) -> dict:
    return {
        "id": scene.id,
        "split": scene.split,
        "file": file,
        "width": scene.width,
        "height": scene.height,
        "objects": [
            {
                "desc": o.description,
                "bbox": list(o.bbox_px),
                "shape": o.shape,
                "color": o.color,
                "size": o.size,
            }
            for o in scene.objects
        ],
    }


def scene_from_json(row: dict, root: Path) -> SceneSample:
    objects = []
    for o in row["objects"]:
        words = o["desc"].split()
        qual = " ".join(words[3:]) or None
        objects.append(AnnotatedObject(o["shape"], o["color"], o["size"], tuple(o["bbox"]), qual))
    image = read_ppm(root / row["file"])
    return SceneSample(row["id"], image, objects, row.get("split", "train"))


@dataclass
class SceneDataset:
    config: SceneConfig
    scenes: dict[str, list[SceneSample]]

    def split(self, name: str) -> list[SceneSample]:
        return self.scenes.get(name, [])

    def manifests(self) -> list[DatasetManifest]:
        return [
            DatasetManifest(
                name,
                [s.id for s in scenes],
                [f"images/{s.id}.ppm" for s in scenes],
                self.config.digest(),
                self.config.seed,
            )
            for name, scenes in self.scenes.items()
        ]


def generate_dataset(config: SceneConfig, out_dir=None) -> SceneDataset:
    """Build every split; if ``out_dir`` is given, write images and manifests there."""
    config.validate()
    scenes = {
        split: [generate_scene(config, split, i) for i in range(config.counts[split])]
        for split in SPLITS
        if split in config.counts
    }
    dataset = SceneDataset(config, scenes)
    if out_dir is not None:
        save_dataset(dataset, out_dir)
    return dataset


def save_dataset(dataset: SceneDataset, out_dir) -> None:
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for scenes in dataset.scenes.values():
        for s in scenes:
            rel = f"images/{s.id}.ppm"
            write_ppm(root / rel, s.image)
            lines.append(json.dumps(scene_to_json(s, rel), sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {
        "config": asdict(dataset.config),
        "config_hash": dataset.config.digest(),
        "seed": dataset.config.seed,
        "splits": {m.split: m.ids for m in dataset.manifests()},
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    config = SceneConfig(**meta["config"])
    scenes: dict[str, list[SceneSample]] = {}
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                scenes.setdefault(row.get("split", "train"), []).append(scene_from_json(row, root))
    return SceneDataset(config, scenes)
