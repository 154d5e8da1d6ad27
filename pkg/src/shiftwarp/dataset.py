"""Synthetic multi-label shapes dataset plus PNG and tensor conversions.

Each sample is a square RGB image with one or two solid shapes (circle,
square, triangle, cross) over a low-frequency value-noise background,
labeled with the multi-hot set of shape classes present.  Rasterization
is pure comparison arithmetic on IEEE doubles: rotations come from
integer direction pairs normalized by sqrt (correctly rounded), and
membership tests are polynomial, so a fixed seed reproduces files
bit for bit across platforms.  Every sample draws from its own RNG
stream derived from (seed, index).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import ContractError, FormatError
from .ops import resize_matrix

CLASS_NAMES = ("circle", "square", "triangle", "cross")


@dataclass(frozen=True)
class DatasetConfig:
    count: int
    seed: int
    size: int = 64
    shapes_min: int = 1
    shapes_max: int = 2
    scale_min: float = 0.12   # shape diameter as a fraction of width
    scale_max: float = 0.40
    noise_cells: int = 4      # coarse grid extent of the background noise
    noise_amp: float = 0.22
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.count < 1:
            raise ContractError(f"count must be >= 1, got {self.count}")
        if self.size < 32:
            raise ContractError(f"size must be >= 32, got {self.size}")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ContractError("bad shapes_min/shapes_max")


@dataclass
class Placement:
    cls: int
    cx: float
    cy: float
    half: float       # half-extent in pixels
    direction: tuple  # (cos, sin) from an integer pair
    color: np.ndarray


@dataclass
class Sample:
    id: str
    image: np.ndarray          # H x W x 3 uint8
    labels: np.ndarray         # (C,) float 0/1
    placements: list[Placement] = field(default_factory=list)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _integer_direction(rng) -> tuple:
    u, v = (int(x) for x in rng.integers(-12, 13, size=2))
    if u == 0 and v == 0:
        u = 1
    hyp = math.sqrt(u * u + v * v)
    return (u / hyp, v / hyp)


def _pick_color(rng, base: np.ndarray) -> np.ndarray:
    for _ in range(16):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - base).max() >= 0.3:
            return color
    return 1.0 - base


def plan_sample(cfg: DatasetConfig, rng) -> tuple[np.ndarray, list[Placement]]:
    """Draw the background base color and shape placements."""
    # base range reaches (near) black so that the zero canvases the losses
    # build around retargeted images stay inside the background distribution
    base = rng.uniform(0.0, 0.85, size=3)
    n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    placements: list[Placement] = []
    for _ in range(n_shapes):
        cls = int(rng.integers(0, len(CLASS_NAMES)))
        half = cfg.size * rng.uniform(cfg.scale_min, cfg.scale_max) / 2.0
        lo, hi = half, cfg.size - 1 - half
        for _ in range(16):
            cx, cy = rng.uniform(lo, hi, size=2)
            if all((cx - p.cx) ** 2 + (cy - p.cy) ** 2
                   >= (0.7 * (half + p.half)) ** 2 for p in placements):
                break
        placements.append(Placement(cls, cx, cy, half,
                                    _integer_direction(rng),
                                    _pick_color(rng, base)))
    return base, placements


def _shape_mask(p: Placement, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - p.cx, ys - p.cy
    c, s = p.direction
    rx = c * dx + s * dy
    ry = -s * dx + c * dy
    r = p.half
    name = CLASS_NAMES[p.cls]
    if name == "circle":
        return dx * dx + dy * dy <= r * r
    if name == "square":
        return np.maximum(np.abs(rx), np.abs(ry)) <= r
    if name == "triangle":
        ax, ay = 0.0, -r
        bx, by = r * math.sqrt(3.0) / 2.0, r / 2.0
        gx, gy = -bx, by
        d0 = (bx - ax) * (ry - ay) - (by - ay) * (rx - ax)
        d1 = (gx - bx) * (ry - by) - (gy - by) * (rx - bx)
        d2 = (ax - gx) * (ry - gy) - (ay - gy) * (rx - gx)
        return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | \
               ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    if name == "cross":
        bar = r / 3.0
        horizontal = (np.abs(rx) <= r) & (np.abs(ry) <= bar)
        vertical = (np.abs(rx) <= bar) & (np.abs(ry) <= r)
        return horizontal | vertical
    raise ContractError(f"unknown shape class {p.cls}")


def _background(cfg: DatasetConfig, rng, base: np.ndarray) -> np.ndarray:
    cells = rng.uniform(-1.0, 1.0, size=(3, cfg.noise_cells, cfg.noise_cells))
    up = resize_matrix(cfg.noise_cells, cfg.size)
    noise = np.einsum("ij,cjk,lk->cil", up, cells, up)
    img = base[:, None, None] + cfg.noise_amp * noise
    return np.clip(img, 0.02, 0.98).transpose(1, 2, 0)


def render_sample(cfg: DatasetConfig, index: int) -> Sample:
    rng = sample_rng(cfg.seed, index)
    base, placements = plan_sample(cfg, rng)
    img = _background(cfg, rng, base)
    for p in placements:
        mask = _shape_mask(p, cfg.size)
        img[mask] = p.color
    labels = np.zeros(len(CLASS_NAMES))
    for p in placements:
        labels[p.cls] = 1.0
    return Sample(id=f"sample_{index:05d}", image=unit_to_u8(img),
                  labels=labels, placements=placements)


def generate_dataset(cfg: DatasetConfig, out_dir) -> dict:
    """Render every sample, write PNGs and the manifest, return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    ids = []
    for i in range(cfg.count):
        sample = render_sample(cfg, i)
        file_name = f"{sample.id}.png"
        save_png(sample.image, out / file_name)
        samples.append({"id": sample.id, "file": file_name,
                        "labels": [int(v) for v in sample.labels]})
        ids.append(sample.id)
    cut = int(round(cfg.count * cfg.train_fraction))
    manifest = {
        "classes": list(CLASS_NAMES),
        "samples": samples,
        "split": {"train": ids[:cut], "eval": ids[cut:]},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(data_dir) -> dict:
    with open(Path(data_dir) / "manifest.json") as fh:
        return json.load(fh)


def load_split(data_dir, split: str) -> list[Sample]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    wanted = set(manifest["split"][split])
    out = []
    for entry in manifest["samples"]:
        if entry["id"] not in wanted:
            continue
        out.append(Sample(id=entry["id"],
                          image=load_png(data_dir / entry["file"]),
                          labels=np.asarray(entry["labels"], dtype=np.float64)))
    return out


# ---------------------------------------------------------------------------
# PNG I/O and value conversions
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path) -> None:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"expected HxWx3 uint8, got {image.dtype} "
                          f"{image.shape}")
    PILImage.fromarray(image, "RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """8-bit RGB as HxWx3 uint8; 8-bit grayscale is promoted by replication."""
    try:
        with PILImage.open(path) as img:
            mode = img.mode
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode PNG {path}: {exc}") from exc
    if mode == "RGB":
        return arr.copy()
    if mode == "L":
        return np.repeat(arr[:, :, None], 3, axis=2)
    if mode in ("I", "I;16"):
        raise FormatError("16-bit PNG is not supported for images")
    raise FormatError(f"unsupported PNG mode {mode!r}")


def u8_to_unit(image: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 -> (1, 3, H, W) float64 in [0, 1]."""
    return (image.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]


def unit_to_u8(image: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8, rounding halves away from zero."""
    if image.ndim == 4:
        image = image[0].transpose(1, 2, 0)
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def to_batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.concatenate([u8_to_unit(s.image) for s in samples], axis=0)
    labels = np.stack([s.labels for s in samples], axis=0)
    return images, labels
