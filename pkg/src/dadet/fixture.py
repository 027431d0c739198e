"""Synthetic-shapes benchmark: colored geometric objects on textured backgrounds.

The fixture provides a labeled clear-weather source set, a validation split,
and a library of synthetic rain-streak maps, all at desk scale. Classes are
color-coded shapes (reddish circles, greenish squares, bluish triangles) so a
small detector can learn them within a couple of thousand iterations, while
fog corruption still shifts the input distribution enough to open a domain
gap.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import DataPaths, RunConfig, SynthesisConfig
from .datasets import write_annotations
from .detector import DetectorConfig
from .synthesis import derive_rng, save_image
from .training import TrainConfig

FIXTURE_CATEGORIES = ("circle", "square", "triangle")

# Dominant color channel per class: circle red, square green, triangle blue.
_CLASS_CHANNEL = {"circle": 0, "square": 1, "triangle": 2}


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.55, size=(height // 16, width // 16, 3))
    zoomed = ndimage.zoom(coarse, (16, 16, 1), order=1)[:height, :width]
    noise = rng.normal(0.0, 0.015, size=(height, width, 3))
    return np.clip(zoomed + noise, 0.0, 1.0)


def _object_color(rng: np.random.Generator, category: str) -> np.ndarray:
    color = rng.uniform(0.05, 0.25, size=3)
    color[_CLASS_CHANNEL[category]] = rng.uniform(0.75, 0.95)
    return color


def _shape_mask(category: str, box: tuple[float, float, float, float],
                height: int, width: int) -> np.ndarray:
    x1, y1, x2, y2 = box
    ys, xs = np.mgrid[0:height, 0:width]
    ys = ys + 0.5
    xs = xs + 0.5
    if category == "circle":
        cy, cx = (y1 + y2) / 2.0, (x1 + x2) / 2.0
        r = (x2 - x1) / 2.0
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r**2
    if category == "square":
        return (xs >= x1) & (xs <= x2) & (ys >= y1) & (ys <= y2)
    # Upward triangle: apex at the top edge center, base along the bottom edge.
    cx = (x1 + x2) / 2.0
    t = (ys - y1) / max(y2 - y1, 1e-6)
    half = t * (x2 - x1) / 2.0
    return (ys >= y1) & (ys <= y2) & (np.abs(xs - cx) <= half)


def _boxes_overlap(box: tuple, others: list[tuple], limit: float = 0.15) -> bool:
    from .evaluation import compute_iou

    return any(compute_iou(box, other) > limit for other in others)


def render_image(
    rng: np.random.Generator, height: int, width: int
) -> tuple[np.ndarray, list[dict]]:
    """One textured background with 1..4 color-coded shapes and their boxes."""
    image = _background(rng, height, width)
    records: list[dict] = []
    boxes: list[tuple] = []
    for _ in range(int(rng.integers(1, 5))):
        category = FIXTURE_CATEGORIES[int(rng.integers(len(FIXTURE_CATEGORIES)))]
        for _attempt in range(12):
            size = float(rng.uniform(24, 56))
            aspect = float(rng.uniform(0.8, 1.25))
            w = size
            h = size * aspect
            if h > height - 8 or w > width - 8:
                continue
            x1 = float(rng.uniform(4, width - w - 4))
            y1 = float(rng.uniform(4, height - h - 4))
            box = (x1, y1, x1 + w, y1 + h)
            if _boxes_overlap(box, boxes):
                continue
            mask = _shape_mask(category, box, height, width)
            color = _object_color(rng, category)
            shading = rng.normal(0.0, 0.02, size=(height, width, 1))
            image = np.where(mask[:, :, None], np.clip(color + shading, 0.0, 1.0), image)
            boxes.append(box)
            records.append({"category": category, "box": [round(v, 2) for v in box]})
            break
    return np.clip(image, 0.0, 1.0), records


def render_rain_map(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Bright near-vertical streaks over a dark field, in [0, 1]."""
    canvas = np.zeros((height, width), dtype=np.float64)
    seeds = rng.random((height, width)) < 0.0025
    canvas[seeds] = rng.uniform(0.6, 1.0, size=int(seeds.sum()))
    angle = math.radians(rng.uniform(70.0, 110.0))
    length = int(rng.integers(15, 30))
    kernel = np.zeros((length, length))
    c = (length - 1) / 2.0
    for t in np.linspace(-c, c, 4 * length):
        r = int(round(c + t * math.sin(angle)))
        col = int(round(c + t * math.cos(angle)))
        if 0 <= r < length and 0 <= col < length:
            kernel[r, col] = 1.0
    kernel /= kernel.sum()
    streaks = ndimage.convolve(canvas, kernel, mode="constant") * length * 0.9
    streaks = ndimage.gaussian_filter(streaks, sigma=0.6)
    return np.clip(streaks, 0.0, 1.0)


def make_fixture(
    output_dir: Path | str,
    seed: int = 0,
    num_train: int = 200,
    num_val: int = 60,
    height: int = 128,
    width: int = 256,
    num_rain_maps: int = 6,
) -> Path:
    """Generate the benchmark dataset, rain library and a ready run config."""
    root = Path(output_dir)
    index = 0
    for split, count in (("train", num_train), ("val", num_val)):
        img_dir = root / "images" / split
        img_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(count):
            rng = derive_rng(seed, index)
            index += 1
            image, boxes = render_image(rng, height, width)
            name = f"{split}_{i:04d}.png"
            save_image(img_dir / name, image)
            records.append({"file": name, "boxes": boxes})
        write_annotations(root, split, FIXTURE_CATEGORIES, records)

    rain_dir = root / "rain_maps"
    rain_dir.mkdir(parents=True, exist_ok=True)
    for i in range(num_rain_maps):
        rng = derive_rng(seed, 10_000_000 + i)
        rain = render_rain_map(rng, height + 32, width + 64)
        save_image(rain_dir / f"rain_{i:02d}.png", np.repeat(rain[:, :, None], 3, axis=2))

    config = fixture_run_config(root, seed)
    config.save(root / "config.yaml")
    return root


def fixture_run_config(root: Path, seed: int) -> RunConfig:
    """Desk-scale run configuration wired to the fixture's directory layout."""
    root = Path(root).resolve()
    return RunConfig(
        seed=seed,
        categories=FIXTURE_CATEGORIES,
        paths=DataPaths(
            source_root=str(root),
            target_root=str(root.parent / f"{root.name}_foggy"),
            aux_root=str(root.parent / f"{root.name}_rainy"),
            rain_library=str(root / "rain_maps"),
            train_split="train",
            val_split="val",
        ),
        detector=DetectorConfig(
            categories=FIXTURE_CATEGORIES,
            channels=(8, 16, 32, 48),
        ),
        train=TrainConfig(
            phase1_iters=2000,
            phase2_iters=800,
        ),
        synthesis=SynthesisConfig(fog_density=0.8, atmospheric_light=0.9),
    )
