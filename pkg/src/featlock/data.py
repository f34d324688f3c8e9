"""Synthetic detection data, a VOC-XML adapter, and image-space transforms.

Synthetic images contain bright geometric shapes (the class is the shape,
the color is random) on a dark noisy background, so a detector can reach a
high mAP within a few thousand iterations on CPU.  The same on-disk layout
(``images/*.png`` + ``annotations/*.xml`` + ``manifest.json``) serves both
generated data and real VOC-style annotations.

All boxes are corner-form ``(xmin, ymin, xmax, ymax)`` normalized to
``[0, 1]``; pixel ``(r, c)`` of an ``S``-pixel image covers the square
``[c/S, (c+1)/S] x [r/S, (r+1)/S]``.
"""

from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from featlock.errors import AnnotationError, DimensionError

SHAPE_CLASSES = ("circle", "square", "triangle")


@dataclass
class Sample:
    """One image plus its ground-truth objects.

    image: float32 ``(3, H, W)`` in [0, 1]
    boxes: float64 ``(N, 4)`` normalized corner-form
    labels: int64 ``(N,)`` class ids
    difficult: bool ``(N,)``, excluded from AP scoring (VOC convention)
    """

    image: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    difficult: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DimensionError(f"image must be (3, H, W), got {self.image.shape}")
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.labels)} labels")
        if self.difficult is None:
            self.difficult = np.zeros(len(self.boxes), dtype=bool)
        else:
            self.difficult = np.asarray(self.difficult, dtype=bool).reshape(-1)
            if len(self.difficult) != len(self.boxes):
                raise ValueError("difficult mask length mismatch")
        if len(self.boxes):
            if self.boxes.min() < -1e-9 or self.boxes.max() > 1 + 1e-9:
                raise ValueError("boxes must lie within [0, 1]")
            if not (self.boxes[:, 0] < self.boxes[:, 2]).all() or not (
                self.boxes[:, 1] < self.boxes[:, 3]
            ).all():
                raise ValueError("boxes must satisfy xmin < xmax and ymin < ymax")

    @property
    def num_objects(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a reproducible synthetic detection set."""

    num_images: int
    image_size: int = 96
    classes: tuple[str, ...] = SHAPE_CLASSES
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.28, 0.55)
    noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if not self.classes or not set(self.classes) <= set(SHAPE_CLASSES):
            raise ValueError(f"classes must be drawn from {SHAPE_CLASSES}")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ValueError("objects_per_image must satisfy 1 <= lo <= hi")
        slo, shi = self.size_range
        if not (0.0 < slo <= shi <= 1.0):
            raise ValueError("size_range must satisfy 0 < lo <= hi <= 1")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


def draw_shape(image: np.ndarray, shape: str, cx: float, cy: float, size: float, color) -> tuple:
    """Rasterize one filled shape in place; return its tight normalized box.

    ``size`` is the side (square/triangle) or diameter (circle) as a
    fraction of the image; the returned box is the analytic bound
    ``(cx - size/2, cy - size/2, cx + size/2, cy + size/2)``, which every
    rasterized pixel center lies inside.
    """
    _, h, w = image.shape
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    gx, gy = np.meshgrid(xs, ys)
    half = size / 2.0
    if shape == "circle":
        mask = (gx - cx) ** 2 + (gy - cy) ** 2 <= half**2
    elif shape == "square":
        mask = np.maximum(np.abs(gx - cx), np.abs(gy - cy)) <= half
    elif shape == "triangle":
        # upward triangle: apex at (cx, cy-half), base across the bottom edge
        mask = (gy >= cy - half) & (gy <= cy + half) & (np.abs(gx - cx) <= (gy - (cy - half)) / 2.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    image[:, mask] = np.asarray(color, dtype=image.dtype).reshape(3, 1)
    return (cx - half, cy - half, cx + half, cy + half)


def _iou_scalar(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _generate_sample(spec: SynthSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    base = rng.uniform(0.0, 0.25, size=(3, 1, 1))
    image = np.clip(base + rng.normal(0.0, spec.noise_level, size=(3, s, s)), 0.0, 1.0)
    image = image.astype(np.float32)

    lo, hi = spec.objects_per_image
    n_objects = int(rng.integers(lo, hi + 1))
    boxes, labels = [], []
    for _ in range(n_objects):
        label = int(rng.integers(0, len(spec.classes)))
        size = float(rng.uniform(*spec.size_range))
        color = rng.uniform(0.45, 1.0, size=3)
        cx = cy = 0.5
        for _attempt in range(20):
            cx = float(rng.uniform(size / 2, 1 - size / 2))
            cy = float(rng.uniform(size / 2, 1 - size / 2))
            cand = (cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2)
            if all(_iou_scalar(cand, b) <= 0.3 for b in boxes):
                break
        box = draw_shape(image, spec.classes[label], cx, cy, size, color)
        boxes.append(box)
        labels.append(label)
    return Sample(image=image, boxes=np.array(boxes), labels=np.array(labels))


def generate_dataset(spec: SynthSpec) -> list[Sample]:
    """Generate ``spec.num_images`` samples, deterministic per (seed, index)."""
    return [_generate_sample(spec, i) for i in range(spec.num_images)]


# ---------------------------------------------------------------------------
# VOC-style annotation ingestion


@dataclass(frozen=True)
class VocObject:
    name: str
    xmin: int
    ymin: int
    xmax: int
    ymax: int
    difficult: bool = False


@dataclass(frozen=True)
class VocRecord:
    """Parsed VOC annotation; pixel coordinates are 1-based inclusive."""

    filename: str
    width: int
    height: int
    objects: tuple[VocObject, ...]


def _required_child(parent: ET.Element, tag: str, context: str) -> ET.Element:
    child = parent.find(tag)
    if child is None:
        raise AnnotationError(f"missing <{tag}> in {context}")
    return child


def _required_int(parent: ET.Element, tag: str, context: str) -> int:
    node = _required_child(parent, tag, context)
    try:
        return int(float(node.text))
    except (TypeError, ValueError):
        raise AnnotationError(f"<{tag}> in {context} is not an integer: {node.text!r}") from None


def parse_voc_annotation(xml_text: str) -> VocRecord:
    """Parse a VOC-style annotation document.

    Raises :class:`AnnotationError` with line/column context on malformed
    XML and a field-naming message when a required element is absent or a
    box violates the 1-based pixel convention (1 <= xmin < xmax <= width).
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise AnnotationError(f"malformed annotation XML at line {line}, column {col}: {exc}") from exc

    filename_node = root.find("filename")
    filename = filename_node.text.strip() if filename_node is not None and filename_node.text else ""
    size = _required_child(root, "size", "<annotation>")
    width = _required_int(size, "width", "<size>")
    height = _required_int(size, "height", "<size>")
    if width < 1 or height < 1:
        raise AnnotationError(f"non-positive image dims {width}x{height}")

    objects = []
    for obj in root.findall("object"):
        name_node = _required_child(obj, "name", "<object>")
        name = (name_node.text or "").strip()
        if not name:
            raise AnnotationError("<object> has an empty <name>")
        bndbox = _required_child(obj, "bndbox", f"object {name!r}")
        ctx = f"<bndbox> of object {name!r}"
        xmin = _required_int(bndbox, "xmin", ctx)
        ymin = _required_int(bndbox, "ymin", ctx)
        xmax = _required_int(bndbox, "xmax", ctx)
        ymax = _required_int(bndbox, "ymax", ctx)
        if not (1 <= xmin < xmax <= width) or not (1 <= ymin < ymax <= height):
            raise AnnotationError(
                f"box ({xmin},{ymin},{xmax},{ymax}) of object {name!r} violates "
                f"1 <= min < max <= {width}x{height}"
            )
        diff_node = obj.find("difficult")
        difficult = diff_node is not None and (diff_node.text or "").strip() == "1"
        objects.append(VocObject(name, xmin, ymin, xmax, ymax, difficult))
    return VocRecord(filename=filename, width=width, height=height, objects=tuple(objects))


def voc_record_to_arrays(record: VocRecord, classes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized (boxes, labels, difficult) for a record; unknown names raise."""
    boxes, labels, difficult = [], [], []
    class_index = {name: i for i, name in enumerate(classes)}
    for obj in record.objects:
        if obj.name not in class_index:
            raise AnnotationError(f"object class {obj.name!r} not in dataset classes {tuple(classes)}")
        boxes.append(
            (
                (obj.xmin - 1) / record.width,
                (obj.ymin - 1) / record.height,
                obj.xmax / record.width,
                obj.ymax / record.height,
            )
        )
        labels.append(class_index[obj.name])
        difficult.append(obj.difficult)
    return (
        np.array(boxes, dtype=np.float64).reshape(-1, 4),
        np.array(labels, dtype=np.int64),
        np.array(difficult, dtype=bool),
    )


def _sample_to_voc_xml(sample: Sample, filename: str, classes) -> str:
    _, h, w = sample.image.shape
    ann = ET.Element("annotation")
    ET.SubElement(ann, "filename").text = filename
    size = ET.SubElement(ann, "size")
    ET.SubElement(size, "width").text = str(w)
    ET.SubElement(size, "height").text = str(h)
    ET.SubElement(size, "depth").text = "3"
    for box, label, diff in zip(sample.boxes, sample.labels, sample.difficult):
        obj = ET.SubElement(ann, "object")
        ET.SubElement(obj, "name").text = classes[int(label)]
        ET.SubElement(obj, "difficult").text = "1" if diff else "0"
        bnd = ET.SubElement(obj, "bndbox")
        xmin = min(max(int(math.floor(box[0] * w)) + 1, 1), w)
        ymin = min(max(int(math.floor(box[1] * h)) + 1, 1), h)
        xmax = min(max(int(math.ceil(box[2] * w)), xmin + 1), w)
        ymax = min(max(int(math.ceil(box[3] * h)), ymin + 1), h)
        ET.SubElement(bnd, "xmin").text = str(xmin)
        ET.SubElement(bnd, "ymin").text = str(ymin)
        ET.SubElement(bnd, "xmax").text = str(xmax)
        ET.SubElement(bnd, "ymax").text = str(ymax)
    ET.indent(ann)
    return ET.tostring(ann, encoding="unicode")


def save_image(image: np.ndarray, path) -> None:
    """Write a float [0,1] (3,H,W) image as 8-bit PNG."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def load_image(path) -> np.ndarray:
    """Read an image file as float32 (3,H,W) in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_dataset(splits: dict[str, list[Sample]], root, classes=SHAPE_CLASSES) -> None:
    """Write splits to the shared on-disk layout (PNG + VOC XML + manifest)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    manifest = {"classes": list(classes), "splits": {}}
    for split, samples in splits.items():
        ids = []
        for i, sample in enumerate(samples):
            image_id = f"{split}_{i:05d}"
            save_image(sample.image, root / "images" / f"{image_id}.png")
            xml = _sample_to_voc_xml(sample, f"{image_id}.png", classes)
            (root / "annotations" / f"{image_id}.xml").write_text(xml)
            ids.append(image_id)
        manifest["splits"][split] = ids
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root, split: str) -> tuple[list[Sample], list[str]]:
    """Read one split back; returns (samples, class names)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    classes = manifest["classes"]
    if split not in manifest["splits"]:
        raise ValueError(f"split {split!r} not in manifest (has {sorted(manifest['splits'])})")
    samples = []
    for image_id in manifest["splits"][split]:
        image = load_image(root / "images" / f"{image_id}.png")
        record = parse_voc_annotation((root / "annotations" / f"{image_id}.xml").read_text())
        boxes, labels, difficult = voc_record_to_arrays(record, classes)
        samples.append(Sample(image=image, boxes=boxes, labels=labels, difficult=difficult))
    return samples, classes


# ---------------------------------------------------------------------------
# Geometric / photometric transforms


@lru_cache(maxsize=512)
def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic overlap weights for 1-D area resampling."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    for t in range(n_out):
        left, right = t * scale, (t + 1) * scale
        s0, s1 = int(math.floor(left)), min(int(math.ceil(right)), n_in)
        for s in range(s0, s1):
            overlap = min(right, s + 1) - max(left, s)
            if overlap > 0:
                weights[t, s] = overlap / scale
    return weights


def area_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average resampling of a (C,H,W) image; exact block averaging
    for integer downscales."""
    image = np.asarray(image)
    c, h, w = image.shape
    wh = _area_weights(h, out_h)
    ww = _area_weights(w, out_w)
    tmp = np.matmul(image.astype(np.float64), ww.T)
    out = np.matmul(wh[None, :, :], tmp)
    return out.astype(image.dtype)


def resize_and_normalize(sample: Sample, target: int) -> Sample:
    """Resize to ``target x target``; normalized boxes are resize-invariant."""
    _, h, w = sample.image.shape
    if h == target and w == target:
        return Sample(sample.image, sample.boxes, sample.labels, sample.difficult)
    image = area_resize(sample.image, target, target)
    return Sample(image, sample.boxes, sample.labels, sample.difficult)


def flip_sample(sample: Sample) -> Sample:
    """Horizontal mirror of image and boxes (an involution)."""
    image = sample.image[:, :, ::-1].copy()
    boxes = sample.boxes.copy()
    if len(boxes):
        boxes = np.stack([1.0 - sample.boxes[:, 2], sample.boxes[:, 1], 1.0 - sample.boxes[:, 0], sample.boxes[:, 3]], axis=1)
    return Sample(image, boxes, sample.labels, sample.difficult)


def crop_sample(sample: Sample, y0: int, x0: int, crop_h: int, crop_w: int) -> Sample | None:
    """Pixel-aligned crop keeping objects whose centers fall inside.

    Returns None when no object center survives; surviving boxes are
    clipped to the crop and renormalized.
    """
    _, h, w = sample.image.shape
    if not (0 <= y0 and y0 + crop_h <= h and 0 <= x0 and x0 + crop_w <= w and crop_h > 0 and crop_w > 0):
        raise DimensionError(f"crop ({y0},{x0},{crop_h},{crop_w}) outside image ({h},{w})")
    if len(sample.boxes) == 0:
        image = sample.image[:, y0 : y0 + crop_h, x0 : x0 + crop_w].copy()
        return Sample(image, sample.boxes.copy(), sample.labels.copy(), sample.difficult.copy())

    centers_x = (sample.boxes[:, 0] + sample.boxes[:, 2]) / 2 * w
    centers_y = (sample.boxes[:, 1] + sample.boxes[:, 3]) / 2 * h
    keep = (centers_x >= x0) & (centers_x < x0 + crop_w) & (centers_y >= y0) & (centers_y < y0 + crop_h)
    if not keep.any():
        return None
    boxes_px = sample.boxes[keep] * np.array([w, h, w, h], dtype=np.float64)
    boxes_px -= np.array([x0, y0, x0, y0], dtype=np.float64)
    boxes = boxes_px / np.array([crop_w, crop_h, crop_w, crop_h], dtype=np.float64)
    boxes = np.clip(boxes, 0.0, 1.0)
    image = sample.image[:, y0 : y0 + crop_h, x0 : x0 + crop_w].copy()
    return Sample(image, boxes, sample.labels[keep].copy(), sample.difficult[keep].copy())


def photometric_jitter(sample: Sample, brightness: float, contrast: float) -> Sample:
    """Scale brightness then stretch contrast about the mean; clip to [0,1]."""
    image = sample.image * brightness
    mean = image.mean()
    image = np.clip((image - mean) * contrast + mean, 0.0, 1.0).astype(np.float32)
    return Sample(image, sample.boxes, sample.labels, sample.difficult)


def augment(sample: Sample, seed: int) -> Sample:
    """Training-time augmentation: flip (p=0.5), random crop, photometric.

    The crop resamples up to 10 times for a window that keeps at least one
    object center, then degrades to the identity crop.  Purely a function
    of (sample, seed).
    """
    rng = np.random.default_rng(seed)
    out = sample
    if rng.random() < 0.5:
        out = flip_sample(out)

    _, h, w = out.image.shape
    for _try in range(10):
        crop_h = int(rng.integers(math.ceil(0.5 * h), h + 1))
        crop_w = int(rng.integers(math.ceil(0.5 * w), w + 1))
        y0 = int(rng.integers(0, h - crop_h + 1))
        x0 = int(rng.integers(0, w - crop_w + 1))
        cropped = crop_sample(out, y0, x0, crop_h, crop_w)
        if cropped is not None:
            out = cropped
            break

    brightness = float(rng.uniform(0.8, 1.2))
    contrast = float(rng.uniform(0.8, 1.2))
    return photometric_jitter(out, brightness, contrast)
