"""Dataset manifests: directory layout validation and annotation ingestion.

Expected layout under a dataset root:

    images/<split>/*.png
    annotations/<split>.json     (labeled splits only)

The annotation file is a flat JSON object: a category list plus one record
per image with its box list. Target-domain splits are ingested unlabeled and
never carry annotations, matching the unsupervised protocol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .adversarial import Domain
from .detector import BoxAnnotation
from .errors import IngestionError

# Table-style default category list for street scenes.
DEFAULT_CATEGORIES = (
    "bus", "bicycle", "car", "motorcycle", "person", "rider", "train", "truck",
)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class ManifestEntry:
    file: str
    path: Path
    boxes: tuple[BoxAnnotation, ...] | None  # None for unlabeled entries


@dataclass
class DatasetManifest:
    root: Path
    split: str
    categories: tuple[str, ...]
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labeled(self) -> bool:
        return bool(self.entries) and self.entries[0].boxes is not None


@dataclass
class DetectionSample:
    """One image with its domain tag and (for source images) annotations."""

    image_id: str
    image: np.ndarray
    domain: Domain
    annotations: tuple[BoxAnnotation, ...] | None = None


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size  # (width, height)


def _validate_boxes(
    entry_name: str,
    raw_boxes: list[dict],
    categories: tuple[str, ...],
    image_path: Path,
) -> tuple[BoxAnnotation, ...]:
    if not raw_boxes:
        return ()
    width, height = _image_size(image_path)
    boxes = []
    for raw in raw_boxes:
        category = raw.get("category")
        if category not in categories:
            raise IngestionError(f"{entry_name}: unknown category {category!r}")
        coords = raw.get("box")
        if coords is None or len(coords) != 4:
            raise IngestionError(f"{entry_name}: box must be [x1, y1, x2, y2]")
        x1, y1, x2, y2 = (float(v) for v in coords)
        if x1 >= x2 or y1 >= y2:
            raise IngestionError(f"{entry_name}: inverted box {coords}")
        x1, x2 = max(x1, 0.0), min(x2, float(width))
        y1, y2 = max(y1, 0.0), min(y2, float(height))
        if x1 >= x2 or y1 >= y2:
            raise IngestionError(f"{entry_name}: box {coords} lies outside the image")
        boxes.append(BoxAnnotation(category=category, box=(x1, y1, x2, y2)))
    return tuple(boxes)


def ingest_dataset(
    root: Path | str,
    split: str,
    labeled: bool,
    categories: tuple[str, ...] = DEFAULT_CATEGORIES,
) -> DatasetManifest:
    """Build a validated manifest with deterministic (lexicographic) entry order."""
    root = Path(root)
    images_dir = root / "images" / split
    if not images_dir.is_dir():
        raise IngestionError(f"missing images directory {images_dir}")
    if not labeled:
        entries = [
            ManifestEntry(file=p.name, path=p, boxes=None)
            for p in sorted(images_dir.iterdir())
            if p.suffix.lower() in IMAGE_EXTENSIONS
        ]
        return DatasetManifest(root=root, split=split, categories=tuple(categories),
                               entries=entries)

    ann_path = root / "annotations" / f"{split}.json"
    if not ann_path.is_file():
        raise IngestionError(f"missing annotation file {ann_path}")
    try:
        payload = json.loads(ann_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"malformed annotation JSON {ann_path}: {exc}") from exc
    file_categories = tuple(payload.get("categories", categories))
    entries = []
    for record in payload.get("images", []):
        name = record.get("file")
        if not name:
            raise IngestionError(f"{ann_path}: image record without a file name")
        path = images_dir / name
        if not path.is_file():
            raise IngestionError(f"{name}: referenced image missing from {images_dir}")
        boxes = _validate_boxes(name, record.get("boxes", []), file_categories, path)
        entries.append(ManifestEntry(file=name, path=path, boxes=boxes))
    entries.sort(key=lambda e: e.file)
    return DatasetManifest(root=root, split=split, categories=file_categories,
                           entries=entries)


def write_annotations(
    root: Path | str,
    split: str,
    categories: tuple[str, ...],
    records: list[dict],
) -> Path:
    """Write the flat annotation JSON for a split; returns the file path."""
    root = Path(root)
    ann_dir = root / "annotations"
    ann_dir.mkdir(parents=True, exist_ok=True)
    path = ann_dir / f"{split}.json"
    payload = {"categories": list(categories), "images": records}
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def boxes_from_instance_mask(mask: np.ndarray, category_of: dict[int, str]) -> list[BoxAnnotation]:
    """Convert an integer instance mask into tight box annotations.

    Ingestion utility for mask-labeled sources; instance id 0 is background
    and ids missing from category_of are skipped.
    """
    boxes = []
    for instance_id in np.unique(mask):
        if instance_id == 0 or int(instance_id) not in category_of:
            continue
        ys, xs = np.nonzero(mask == instance_id)
        boxes.append(
            BoxAnnotation(
                category=category_of[int(instance_id)],
                box=(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)),
            )
        )
    return boxes
