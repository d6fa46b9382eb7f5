"""Synthetic shapes detection data and COCO-format annotation ingestion.

Images are colored geometric shapes (rectangle / disc / triangle, class ids
0/1/2) over 1/f-noise backgrounds. ``size_mix`` controls the fraction of
small-object-dominated images (summed ground-truth box area < 0.5) versus
large-object-dominated ones (>= 0.5), so both augmentation branches are
exercised. All randomness is split per image index: sample i depends only
on (seed, i).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BoxSet

logger = logging.getLogger(__name__)

CLASS_NAMES = ("rectangle", "disc", "triangle")


@dataclass(frozen=True, eq=False)
class DetectionSample:
    """One image (H×W×3 in [0,1], or None for an unhydrated reference) plus
    its labeled ground-truth boxes."""

    image: np.ndarray | None
    ground_truth: BoxSet

    def __post_init__(self):
        if self.image is not None:
            if self.image.ndim != 3 or self.image.shape[2] != 3:
                raise ValueError(f"image must be H×W×3, got {self.image.shape}")
            h, w = self.image.shape[:2]
            if (h, w) != tuple(self.ground_truth.image_size):
                raise ValueError(
                    f"image size {(h, w)} disagrees with ground truth "
                    f"{self.ground_truth.image_size}"
                )


def pink_noise_image(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Grayscale 1/f-spectrum noise in [0,1] with mid-gray mean."""
    white = rng.standard_normal((h, w))
    spec = np.fft.fft2(white)
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    radius = np.hypot(fy[:, None], fx[None, :])
    floor = 1.0 / max(h, w)
    spec = spec / np.maximum(radius, floor)
    spec[0, 0] = 0.0
    img = np.fft.ifft2(spec).real
    sd = img.std()
    if sd > 0:
        img = img / sd * 0.12
    return np.clip(img + 0.5, 0.0, 1.0)


def _shape_mask(kind: int, box, size: int) -> np.ndarray:
    """Rasterize a shape inscribed in a normalized box on a size×size grid."""
    x0, y0, x1, y1 = box
    coords = (np.arange(size) + 0.5) / size
    xx = coords[None, :]
    yy = coords[:, None]
    if kind == 0:  # rectangle
        return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    if kind == 1:  # disc (inscribed ellipse)
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    # triangle: apex top-center, base bottom edge
    ax, ay = (x0 + x1) / 2, y0
    bx, by = x0, y1
    cx2, cy2 = x1, y1

    def half_plane(px, py, qx, qy):
        return (qx - px) * (yy - py) - (qy - py) * (xx - px)

    d1 = half_plane(ax, ay, bx, by)
    d2 = half_plane(bx, by, cx2, cy2)
    d3 = half_plane(cx2, cy2, ax, ay)
    return ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))


def _sample_box(rng: np.random.Generator, area: float) -> tuple[float, float, float, float]:
    aspect = rng.uniform(0.6, 1.6)
    bw = min(0.96, np.sqrt(area * aspect))
    bh = min(0.96, area / bw if bw > 0 else np.sqrt(area))
    x0 = rng.uniform(0.02, 1.0 - bw - 0.02)
    y0 = rng.uniform(0.02, 1.0 - bh - 0.02)
    return (float(x0), float(y0), float(x0 + bw), float(y0 + bh))


def synth_sample(index: int, seed: int, image_size: int, small_dominated: bool) -> DetectionSample:
    rng = np.random.default_rng([seed, index])
    gray = pink_noise_image(image_size, image_size, rng)
    tint = rng.uniform(0.7, 1.0, size=3)
    image = gray[:, :, None] * tint[None, None, :]

    if small_dominated:
        areas = rng.uniform(0.01, 0.05, size=int(rng.integers(2, 5)))
    else:
        areas = [float(rng.uniform(0.55, 0.75))]
        if rng.random() < 0.5:
            areas.append(float(rng.uniform(0.01, 0.04)))

    boxes, labels = [], []
    for area in areas:
        kind = int(rng.integers(0, len(CLASS_NAMES)))
        box = _sample_box(rng, float(area))
        color = rng.integers(0, 2, size=3) * 0.85 + 0.075 + rng.uniform(-0.05, 0.05, size=3)
        mask = _shape_mask(kind, box, image_size)
        image[mask] = color
        boxes.append(box)
        labels.append(kind)

    image = np.clip(image, 0.0, 1.0)
    gt = BoxSet(
        boxes=tuple(boxes),
        scores=tuple(1.0 for _ in boxes),
        image_size=(image_size, image_size),
        labels=tuple(labels),
    )
    return DetectionSample(image=image, ground_truth=gt)


def synth_dataset(
    n: int, image_size: int = 64, size_mix: float = 0.5, seed: int = 0
) -> list[DetectionSample]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (0.0 <= size_mix <= 1.0):
        raise ValueError(f"size_mix must be in [0,1], got {size_mix}")
    samples = []
    for i in range(n):
        gate = np.random.default_rng([seed, i, 1]).random()
        samples.append(synth_sample(i, seed, image_size, small_dominated=gate < size_mix))
    return samples


# --- COCO-format interchange -------------------------------------------------


def export_coco(samples: list[DetectionSample], out_dir: str | Path) -> Path:
    """Write samples as an image directory plus one COCO-style annotation file."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for i, sample in enumerate(samples):
        if sample.image is None:
            raise ValueError(f"sample {i} has no pixel data to export")
        h, w = sample.image.shape[:2]
        file_name = f"images/{i:05d}.png"
        Image.fromarray((sample.image * 255).round().astype(np.uint8)).save(out_dir / file_name)
        images.append({"id": i, "file_name": file_name, "height": h, "width": w})
        gt = sample.ground_truth
        labels = gt.labels if gt.labels is not None else tuple(0 for _ in range(len(gt)))
        for (x0, y0, x1, y1), label in zip(gt.boxes, labels):
            bbox = [x0 * w, y0 * h, (x1 - x0) * w, (y1 - y0) * h]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": i,
                    "category_id": int(label),
                    "bbox": [round(v, 4) for v in bbox],
                    "area": round(bbox[2] * bbox[3], 4),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i, "name": name} for i, name in enumerate(CLASS_NAMES)],
    }
    ann_path = out_dir / "annotations.json"
    ann_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return ann_path


def load_coco_annotations(path: str | Path, load_images: bool = True) -> list[DetectionSample]:
    """Read a COCO-style annotation document into detection samples.

    Boxes convert from pixel [x, y, width, height] to normalized corners.
    Zero-area boxes are skipped with one counted warning. Image pixels load
    from file_name relative to the annotation file; ``load_images=False``
    returns unhydrated references (image=None).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"annotation file not found: {path}")
    doc = json.loads(path.read_text())
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ValueError(f"annotation document missing key: {key!r}")

    image_index: dict[int, dict] = {}
    for entry in doc["images"]:
        for key in ("id", "height", "width"):
            if key not in entry:
                raise ValueError(f"image entry missing key: {key!r}")
        image_index[entry["id"]] = entry

    per_image: dict[int, list] = {img_id: [] for img_id in image_index}
    skipped = 0
    for ann in doc["annotations"]:
        for key in ("image_id", "category_id", "bbox"):
            if key not in ann:
                raise ValueError(f"annotation missing key: {key!r}")
        img_id = ann["image_id"]
        if img_id not in image_index:
            raise ValueError(f"annotation references unresolvable image id {img_id}")
        x, y, bw, bh = ann["bbox"]
        if bw <= 0 or bh <= 0:
            skipped += 1
            continue
        entry = image_index[img_id]
        h, w = entry["height"], entry["width"]
        x0 = min(max(x / w, 0.0), 1.0)
        y0 = min(max(y / h, 0.0), 1.0)
        x1 = min(max((x + bw) / w, 0.0), 1.0)
        y1 = min(max((y + bh) / h, 0.0), 1.0)
        if x0 >= x1 or y0 >= y1:
            skipped += 1
            continue
        per_image[img_id].append(((x0, y0, x1, y1), int(ann["category_id"])))

    if skipped:
        logger.warning("skipped %d zero-area or out-of-bounds boxes", skipped)

    samples = []
    for img_id in sorted(image_index):
        entry = image_index[img_id]
        boxes = tuple(b for b, _ in per_image[img_id])
        labels = tuple(l for _, l in per_image[img_id])
        gt = BoxSet(
            boxes=boxes,
            scores=tuple(1.0 for _ in boxes),
            image_size=(entry["height"], entry["width"]),
            labels=labels,
        )
        image = None
        if load_images:
            file_name = entry.get("file_name")
            if file_name is None:
                raise ValueError(f"image entry {img_id} missing key: 'file_name'")
            img_path = path.parent / file_name
            if not img_path.exists():
                raise FileNotFoundError(f"image file not found: {img_path}")
            image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        samples.append(DetectionSample(image=image, ground_truth=gt))
    return samples
