"""Dataset manifests, mask-to-box conversion, patch tiling and synthetic cells.

Manifest format (COCO-style JSON)::

    {
      "images": [{"id": 0, "file": "img_0000.png", "width": 256, "height": 256}],
      "annotations": [{"image_id": 0, "bbox": [x, y, w, h], "category_id": 1}],
      "categories": [{"id": 1, "name": "class_0"}],
      "category_map": {"7": 1}            # optional source-id -> category-id remap
    }

``file`` is relative to the manifest's directory. Model class indices are the
positions of the categories after sorting by id.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

PATCH_SIZES = (128, 256)
MIN_AREA_FRACTION = 0.5
MAX_GT_IOU = 0.3


class ValidationError(ValueError):
    """A manifest or mask violates its invariants."""


@dataclass
class Annotation:
    image_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h
    category_id: int

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "bbox": [float(v) for v in self.bbox], "category_id": self.category_id}

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        x, y, w, h = self.bbox
        return (x, y, x + w, y + h)


@dataclass
class ImageRecord:
    id: int
    file: str
    width: int
    height: int

    def to_dict(self) -> dict:
        return {"id": self.id, "file": self.file, "width": self.width, "height": self.height}


@dataclass
class DatasetManifest:
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    categories: list[dict] = field(default_factory=list)
    category_map: dict[int, int] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def class_index(self) -> dict[int, int]:
        """category id -> contiguous model class index."""
        return {c["id"]: i for i, c in enumerate(sorted(self.categories, key=lambda c: c["id"]))}

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out

    def class_counts(self) -> dict[str, int]:
        names = {c["id"]: c["name"] for c in self.categories}
        counts = Counter(a.category_id for a in self.annotations)
        return {names[cid]: counts.get(cid, 0) for cid in sorted(names)}

    def to_dict(self) -> dict:
        d = {
            "images": [im.to_dict() for im in self.images],
            "annotations": [a.to_dict() for a in self.annotations],
            "categories": [dict(c) for c in self.categories],
        }
        if self.category_map:
            d["category_map"] = {str(k): v for k, v in self.category_map.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            images = [ImageRecord(int(im["id"]), str(im["file"]), int(im["width"]), int(im["height"])) for im in d["images"]]
            cmap = {int(k): int(v) for k, v in d.get("category_map", {}).items()}
            anns = [
                Annotation(int(a["image_id"]), tuple(float(v) for v in a["bbox"]), cmap.get(int(a["category_id"]), int(a["category_id"])))
                for a in d.get("annotations", [])
            ]
            cats = [{"id": int(c["id"]), "name": str(c["name"])} for c in d["categories"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed manifest: {exc}") from exc
        return cls(images, anns, cats, cmap)

    def validate(self, clip: bool = True) -> "DatasetManifest":
        """Check references and box extents; clip boxes to image bounds when ``clip``."""
        problems = []
        image_ids = {im.id: im for im in self.images}
        if len(image_ids) != len(self.images):
            problems.append("duplicate image ids")
        cat_ids = {c["id"] for c in self.categories}
        for i, a in enumerate(self.annotations):
            if a.image_id not in image_ids:
                problems.append(f"annotation {i} references missing image id {a.image_id}")
                continue
            if a.category_id not in cat_ids:
                problems.append(f"annotation {i} references missing category id {a.category_id}")
            if len(a.bbox) != 4:
                problems.append(f"annotation {i} bbox must have 4 numbers")
                continue
            x, y, w, h = a.bbox
            if not (w > 0 and h > 0):
                problems.append(f"annotation {i} has non-positive extent w={w} h={h}")
                continue
            im = image_ids[a.image_id]
            if clip:
                x0, y0 = max(x, 0.0), max(y, 0.0)
                x1, y1 = min(x + w, im.width), min(y + h, im.height)
                if x1 <= x0 or y1 <= y0:
                    problems.append(f"annotation {i} lies outside image {a.image_id}")
                    continue
                if (x0, y0, x1, y1) != (x, y, x + w, y + h):
                    a.bbox = (x0, y0, x1 - x0, y1 - y0)
        if problems:
            raise ValidationError("; ".join(problems))
        return self


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1))


def load_dataset(path: str | Path) -> DatasetManifest:
    """Read and validate a manifest; logs per-class annotation counts."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(path)
    manifest = DatasetManifest.from_dict(json.loads(path.read_text())).validate()
    logger.info("loaded %d images; per-class counts %s", len(manifest.images), manifest.class_counts())
    return manifest


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    """8-bit RGB image as (H, W, 3) uint8."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


def read_label_raster(path: str | Path) -> np.ndarray:
    """Instance labels from a 16-bit (or 8-bit) PNG or a portable graymap."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValidationError(f"label raster {path} must be single-channel, got shape {arr.shape}")
    return arr.astype(np.int64)


def write_label_raster(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.max(initial=0) > 65535 or mask.min(initial=0) < 0:
        raise ValidationError("label ids must fit in 16 bits")
    Image.fromarray(mask.astype(np.uint16)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# masks and patches
# ---------------------------------------------------------------------------


def mask_to_bboxes(mask: np.ndarray, class_of: dict[int, int] | None = None, image_id: int = 0, default_category: int = 1) -> list[Annotation]:
    """Tight axis-aligned box of every instance id > 0 in a label raster.

    ``class_of`` maps instance id -> category id; unmapped instances get
    ``default_category``. Results are ordered by instance id.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got {mask.shape}")
    if mask.size and mask.min() < 0:
        raise ValidationError("mask labels must be non-negative")
    out = []
    for inst, slc in enumerate(ndimage.find_objects(mask.astype(np.int64)), start=1):
        if slc is None:
            continue
        rows, cols = slc
        cat = (class_of or {}).get(inst, default_category)
        out.append(Annotation(image_id, (cols.start, rows.start, cols.stop - cols.start, rows.stop - rows.start), cat))
    return out


def extract_patches(
    image: np.ndarray,
    annotations: Sequence[Annotation],
    size: int = 256,
    stride: int | None = None,
    min_area_fraction: float = MIN_AREA_FRACTION,
) -> list[tuple[np.ndarray, list[Annotation], tuple[int, int]]]:
    """Tile ``image`` into ``size``-square patches on a ``stride`` grid.

    Boxes are translated into patch coordinates and clipped; a box is kept only
    if at least ``min_area_fraction`` of its area survives the clip. Returns
    (patch, annotations, (x0, y0) offset) triples.
    """
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    stride = stride or size
    out = []
    for y0 in range(0, h - size + 1, stride):
        for x0 in range(0, w - size + 1, stride):
            kept = []
            for a in annotations:
                x, y, bw, bh = a.bbox
                cx0, cy0 = max(x, x0), max(y, y0)
                cx1, cy1 = min(x + bw, x0 + size), min(y + bh, y0 + size)
                if cx1 <= cx0 or cy1 <= cy0:
                    continue
                if (cx1 - cx0) * (cy1 - cy0) < min_area_fraction * bw * bh:
                    continue
                kept.append(Annotation(a.image_id, (cx0 - x0, cy0 - y0, cx1 - cx0, cy1 - cy0), a.category_id))
            out.append((image[y0 : y0 + size, x0 : x0 + size].copy(), kept, (x0, y0)))
    return out


# ---------------------------------------------------------------------------
# synthetic cells
# ---------------------------------------------------------------------------

_PALETTE = np.array(
    [
        (120, 40, 140),  # purple
        (200, 60, 70),  # red
        (50, 90, 170),  # blue
        (60, 140, 60),  # green
        (190, 140, 40),  # ochre
        (40, 150, 160),  # teal
    ],
    dtype=np.float64,
)
_BACKGROUND = np.array((235, 215, 225), dtype=np.float64)


@dataclass
class SynthConfig:
    radius_min: float = 9.0
    radius_max: float = 20.0
    noise_std: float = 8.0
    max_retries: int = 200


def _class_radius_range(k: int, num_classes: int, cfg: SynthConfig) -> tuple[float, float]:
    span = (cfg.radius_max - cfg.radius_min) / num_classes
    lo = cfg.radius_min + k * span
    return lo, lo + span


def _render_ellipse(canvas: np.ndarray, cx: float, cy: float, rx: float, ry: float, color: np.ndarray) -> None:
    h, w = canvas.shape[:2]
    y0, y1 = max(int(np.floor(cy - ry)), 0), min(int(np.ceil(cy + ry)), h)
    x0, x1 = max(int(np.floor(cx - rx)), 0), min(int(np.ceil(cx + rx)), w)
    ys = np.arange(y0, y1)[:, None] + 0.5
    xs = np.arange(x0, x1)[None, :] + 0.5
    r2 = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2
    inside = r2 <= 1.0
    # darker rim, lighter core
    shade = 0.75 + 0.35 * (1.0 - r2)
    region = canvas[y0:y1, x0:x1]
    region[inside] = np.clip(color[None, :] * shade[inside][:, None], 0, 255)


def synth_generate(
    n_images: int,
    size: int = 256,
    num_classes: int = 3,
    density: float = 6.0,
    seed: int = 0,
    cfg: SynthConfig | None = None,
) -> tuple[DatasetManifest, list[np.ndarray]]:
    """Deterministic images of axis-aligned elliptical "cells" on a noisy background.

    ``density`` is the expected number of cells per 256x256 area. The class of a
    cell fixes both its colour and its radius range. Ground-truth boxes are the
    exact continuous bounding boxes of the ellipses; any two boxes in an image
    overlap with IoU of at most 0.3.
    """
    from .boxes import iou_matrix

    cfg = cfg or SynthConfig()
    if num_classes > len(_PALETTE):
        raise ValueError(f"at most {len(_PALETTE)} synthetic classes")
    rng = np.random.default_rng(seed)
    manifest = DatasetManifest(categories=[{"id": k + 1, "name": f"class_{k}"} for k in range(num_classes)])
    images = []
    for img_id in range(n_images):
        canvas = _BACKGROUND[None, None, :] + rng.normal(0, cfg.noise_std, (size, size, 3))
        n_cells = int(rng.poisson(density * (size / 256.0) ** 2)) if density > 0 else 0
        boxes: list[tuple[float, float, float, float]] = []
        for _ in range(n_cells):
            for _attempt in range(cfg.max_retries):
                k = int(rng.integers(num_classes))
                lo, hi = _class_radius_range(k, num_classes, cfg)
                rx, ry = rng.uniform(lo, hi, 2)
                cx = rng.uniform(rx, size - rx)
                cy = rng.uniform(ry, size - ry)
                box = (cx - rx, cy - ry, cx + rx, cy + ry)
                if not boxes or iou_matrix(np.array([box]), np.array(boxes)).max() <= MAX_GT_IOU:
                    break
            else:
                raise ValueError(
                    f"could not place {n_cells} cells in image {img_id} with pairwise IoU <= {MAX_GT_IOU}; lower the density"
                )
            boxes.append(box)
            color = _PALETTE[k] + rng.normal(0, 6, 3)
            _render_ellipse(canvas, cx, cy, rx, ry, color)
            manifest.annotations.append(Annotation(img_id, (box[0], box[1], 2 * rx, 2 * ry), k + 1))
        canvas += rng.normal(0, cfg.noise_std / 2, canvas.shape)
        images.append(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
        manifest.images.append(ImageRecord(img_id, f"img_{img_id:04d}.png", size, size))
    return manifest, images


def write_dataset(directory: str | Path, manifest: DatasetManifest, images: Sequence[np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec, img in zip(manifest.images, images):
        write_image(directory / rec.file, img)
    path = directory / "manifest.json"
    save_manifest(manifest, path)
    return path


def load_images(manifest: DatasetManifest, root: str | Path) -> list[np.ndarray]:
    root = Path(root)
    if root.is_file():
        root = root.parent
    out = []
    for rec in manifest.images:
        img = read_image(root / rec.file)
        if img.shape[:2] != (rec.height, rec.width):
            raise ValidationError(f"image {rec.file} is {img.shape[1]}x{img.shape[0]}, manifest says {rec.width}x{rec.height}")
        out.append(img)
    return out
