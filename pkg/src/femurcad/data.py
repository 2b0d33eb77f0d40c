"""Dataset ingestion: the seven-class fracture taxonomy, manifest files,
bounding-box crops with bilinear resize, side canonicalization, and a
deterministic synthetic generator that stands in for clinical data.

Manifests are JSON Lines: a header object carrying the format version
and provenance, then one sample per line with
{"id", "path", "bbox": [x, y, w, h], "side": "left|right", "label"}.
Images are 8-bit grayscale PNG or raw float32 grids (the same container
the clustering module uses for feature files).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Base for manifest ingestion failures."""


class ManifestParseError(ManifestError):
    """A manifest line failed to parse; the message carries the line number."""


class ManifestValidationError(ManifestError):
    """A parsed sample violates an invariant; the message names the sample."""


class FractureLabel(str, Enum):
    UNBROKEN = "Unbroken"
    A1 = "A1"
    A2 = "A2"
    A3 = "A3"
    B1 = "B1"
    B2 = "B2"
    B3 = "B3"

    @property
    def parent(self) -> str:
        if self is FractureLabel.UNBROKEN:
            return "Unbroken"
        return self.value[0]

    @classmethod
    def parse(cls, text: str) -> "FractureLabel":
        try:
            return cls(text)
        except ValueError:
            raise ManifestValidationError(
                f"unknown label {text!r}; expected one of {[l.value for l in cls]}") from None


LABEL_ORDER = [FractureLabel.UNBROKEN, FractureLabel.A1, FractureLabel.A2,
               FractureLabel.A3, FractureLabel.B1, FractureLabel.B2, FractureLabel.B3]
LABEL_INDEX = {label: i for i, label in enumerate(LABEL_ORDER)}
LABEL_NAMES = [label.value for label in LABEL_ORDER]


@dataclass
class Sample:
    id: str
    bbox: tuple  # (x, y, w, h) in source pixels
    side: str
    label: FractureLabel
    path: Optional[str] = None
    pixels: Optional[np.ndarray] = None  # inline alternative to a path

    def to_json(self) -> dict:
        return {"id": self.id, "path": self.path, "bbox": list(self.bbox),
                "side": self.side, "label": self.label.value}


@dataclass
class DatasetManifest:
    version: int = MANIFEST_VERSION
    provenance: str = ""
    samples: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> dict:
        return {s.id: s for s in self.samples}


def class_histogram(manifest: DatasetManifest) -> dict:
    counts = {label: 0 for label in LABEL_ORDER}
    for sample in manifest.samples:
        counts[sample.label] += 1
    return counts


# -- image files ---------------------------------------------------------------

# Raw grids reuse the feature-vector container (count = height, width = width)
# so images can round-trip without any codec in play.
RAW_MAGIC = "femurcad-features"


def save_image(path, image: np.ndarray) -> None:
    """Write a [0, 1] grayscale array as 8-bit PNG or raw float32 grid."""
    path = Path(path)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[0]
    if path.suffix == ".f32":
        header = f"{RAW_MAGIC} {image.shape[0]} {image.shape[1]}\n".encode("ascii")
        path.write_bytes(header + np.ascontiguousarray(image, dtype="<f4").tobytes())
    else:
        quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(quantized, mode="L").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Load a grayscale image as float32 in [0, 1]."""
    path = Path(path)
    if path.suffix == ".f32":
        blob = path.read_bytes()
        newline = blob.index(b"\n")
        magic, h, w = blob[:newline].decode("ascii").split()
        if magic != RAW_MAGIC:
            raise ManifestValidationError(f"{path}: not a raw image grid")
        return np.frombuffer(blob[newline + 1:], dtype="<f4").reshape(int(h), int(w)).copy()
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def image_dimensions(path) -> tuple:
    """(height, width) without decoding the full image."""
    path = Path(path)
    if path.suffix == ".f32":
        with open(path, "rb") as fh:
            parts = fh.readline().decode("ascii").split()
        return int(parts[1]), int(parts[2])
    with Image.open(path) as img:
        return img.height, img.width


# -- manifest I/O ------------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format_version": manifest.version,
                             "provenance": manifest.provenance}) + "\n")
        for sample in manifest.samples:
            fh.write(json.dumps(sample.to_json()) + "\n")


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    """Parse and validate a JSONL manifest.

    Violations report the offending line number (parse) or sample id
    (validation). With check_images the referenced files must exist and
    contain each sample's bounding box.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestParseError(f"{path}:1: empty manifest file, header line required")
    try:
        header = json.loads(lines[0])
        version = int(header["format_version"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(f"{path}:1: bad manifest header: {exc}") from None
    if version != MANIFEST_VERSION:
        raise ManifestValidationError(f"{path}: unsupported manifest version {version}")

    manifest = DatasetManifest(version=version, provenance=str(header.get("provenance", "")))
    seen: set = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            sample = Sample(id=str(row["id"]),
                            bbox=tuple(int(v) for v in row["bbox"]),
                            side=str(row["side"]),
                            label=FractureLabel.parse(row["label"]),
                            path=row.get("path"))
            if len(sample.bbox) != 4:
                raise ValueError("bbox needs exactly four entries")
        except ManifestValidationError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestParseError(f"{path}:{lineno}: malformed sample row: {exc}") from None
        _validate_sample(sample, seen, path.parent if check_images else None)
        seen.add(sample.id)
        manifest.samples.append(sample)
    return manifest


def _validate_sample(sample: Sample, seen: set, image_root: Optional[Path]) -> None:
    if sample.id in seen:
        raise ManifestValidationError(f"sample {sample.id}: duplicate id")
    if sample.side not in ("left", "right"):
        raise ManifestValidationError(f"sample {sample.id}: side must be left or right")
    x, y, w, h = sample.bbox
    if w <= 0 or h <= 0:
        raise ManifestValidationError(f"sample {sample.id}: bbox has non-positive extent")
    if x < 0 or y < 0:
        raise ManifestValidationError(f"sample {sample.id}: bbox origin out of bounds")
    if sample.pixels is not None:
        dims = sample.pixels.shape[-2:]
    elif image_root is not None:
        if sample.path is None:
            raise ManifestValidationError(f"sample {sample.id}: neither path nor pixels")
        file_path = image_root / sample.path
        if not file_path.exists():
            raise ManifestValidationError(f"sample {sample.id}: missing image {file_path}")
        dims = image_dimensions(file_path)
    else:
        return
    if y + h > dims[0] or x + w > dims[1]:
        raise ManifestValidationError(
            f"sample {sample.id}: bbox {sample.bbox} exceeds image {dims[1]}x{dims[0]}")


# -- geometry ---------------------------------------------------------------------


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resample of a (H, W) array."""
    image = np.asarray(image, dtype=np.float32)
    in_h, in_w = image.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0, in_h - 1)
    xs = np.clip(xs, 0, in_w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bottom = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def crop_resize(image: np.ndarray, bbox: tuple, target: int = 224) -> np.ndarray:
    """Crop the bounding box, resize to target x target, scale to [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[0]
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    else:
        image = image.astype(np.float32)
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise ManifestValidationError(f"degenerate bbox {bbox}")
    if y + h > image.shape[0] or x + w > image.shape[1] or x < 0 or y < 0:
        raise ManifestValidationError(f"bbox {bbox} exceeds image {image.shape}")
    crop = image[y:y + h, x:x + w]
    return bilinear_resize(crop, target, target)[None]


def normalize_side(tensor: np.ndarray, side: str) -> np.ndarray:
    """Mirror right-side images about the vertical axis; identity on left."""
    tensor = np.asarray(tensor)
    if side == "left":
        return tensor.copy()
    if side == "right":
        return np.ascontiguousarray(tensor[..., ::-1])
    raise ManifestValidationError(f"side must be left or right, got {side!r}")


def rotate_image(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center with bilinear sampling and edge clamping."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_y = np.clip(cos_t * yy - sin_t * xx + cy, 0, h - 1)
    src_x = np.clip(sin_t * yy + cos_t * xx + cx, 0, w - 1)
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = src_y - y0
    wx = src_x - x0
    out = (image[y0, x0] * (1 - wy) * (1 - wx) + image[y0, x1] * (1 - wy) * wx
           + image[y1, x0] * wy * (1 - wx) + image[y1, x1] * wy * wx)
    return out.astype(np.float32)


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(np.asarray(image, dtype=np.float32) * factor, 0.0, 1.0)


# -- synthetic dataset --------------------------------------------------------------

SYNTH_SIZE = 96
SYNTH_BBOX = (4, 4, 88, 88)
SYNTH_NOISE = 0.02
MOTIF_JITTERS = range(-2, 3)  # vertical offsets the renderer may apply

_BACKGROUND = 0.06
_LINE_VALUE = 0.15
_LINE_WIDTH = 4.5

# Each motif is a list of stroke endpoints ((x0, y0), (x1, y1)) on the
# canonical left-side silhouette; classes differ in position, count, angle.
_MOTIFS = {
    FractureLabel.UNBROKEN: [],
    FractureLabel.A1: [((46, 30), (70, 44))],
    FractureLabel.A2: [((44, 26), (68, 40)), ((48, 38), (72, 52))],
    FractureLabel.A3: [((46, 46), (70, 30))],
    FractureLabel.B1: [((24, 40), (44, 28))],
    FractureLabel.B2: [((22, 36), (42, 24)), ((28, 48), (48, 36))],
    FractureLabel.B3: [((30, 18), (34, 42))],
}


def _draw_disk(img: np.ndarray, cx: float, cy: float, radius: float, value: float) -> None:
    yy, xx = np.ogrid[:img.shape[0], :img.shape[1]]
    img[(xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2] = value


def _draw_band(img: np.ndarray, x0: int, x1: int, y0: int, y1: int, value: float) -> None:
    img[y0:y1, x0:x1] = value


def _draw_stroke(img: np.ndarray, p0: tuple, p1: tuple, value: float, width: float) -> None:
    """Paint all pixels within width/2 of the segment p0-p1."""
    (x0, y0), (x1, y1) = p0, p1
    yy, xx = np.mgrid[:img.shape[0], :img.shape[1]]
    dx, dy = x1 - x0, y1 - y0
    length_sq = dx * dx + dy * dy
    t = ((xx - x0) * dx + (yy - y0) * dy) / max(length_sq, 1e-9)
    t = np.clip(t, 0.0, 1.0)
    dist_sq = (xx - (x0 + t * dx)) ** 2 + (yy - (y0 + t * dy)) ** 2
    img[dist_sq <= (width / 2.0) ** 2] = value


def render_synthetic(label: FractureLabel, jitter: int = 0, size: int = SYNTH_SIZE) -> np.ndarray:
    """Noise-free canonical (left-side) femur template with the class motif."""
    if jitter not in MOTIF_JITTERS:
        raise ManifestValidationError(f"jitter {jitter} outside {list(MOTIF_JITTERS)}")
    scale = size / SYNTH_SIZE
    img = np.full((size, size), _BACKGROUND, dtype=np.float32)
    # stylized proximal femur: shaft, head, neck bridge, trochanter bump
    _draw_band(img, int(44 * scale), int(60 * scale), int(28 * scale), int(92 * scale), 0.78)
    _draw_disk(img, 30 * scale, 26 * scale, 12 * scale, 0.82)
    _draw_stroke(img, (32 * scale, 30 * scale), (50 * scale, 42 * scale), 0.74, 11 * scale)
    _draw_disk(img, 60 * scale, 30 * scale, 9 * scale, 0.70)
    for (x0, y0), (x1, y1) in _MOTIFS[label]:
        _draw_stroke(img, (x0 * scale, (y0 + jitter) * scale),
                     (x1 * scale, (y1 + jitter) * scale),
                     _LINE_VALUE, _LINE_WIDTH * scale)
    return img


def synth_generate(n_per_class: int, seed: int = 0, out_dir=None,
                   size: int = SYNTH_SIZE) -> tuple:
    """Deterministic synthetic dataset: (manifest, {sample_id: image}).

    Each image is the class motif template at a seeded jitter plus seeded
    Gaussian noise; roughly half the samples are mirrored and tagged as
    right-side. With out_dir the PNGs and manifest.jsonl are written and
    sample paths point at the files.
    """
    if n_per_class < 1:
        raise ManifestValidationError("n_per_class must be at least 1")
    rng = np.random.default_rng(seed)
    jitters = list(MOTIF_JITTERS)
    manifest = DatasetManifest(provenance=f"synthetic femur motifs (seed={seed})")
    images: dict = {}
    for label in LABEL_ORDER:
        for i in range(n_per_class):
            sample_id = f"synth-{label.value}-{i:04d}"
            jitter = jitters[rng.integers(0, len(jitters))]
            side = "right" if rng.random() < 0.5 else "left"
            img = render_synthetic(label, jitter, size=size)
            img = np.clip(img + rng.normal(0.0, SYNTH_NOISE, size=img.shape), 0.0, 1.0)
            img = img.astype(np.float32)
            if side == "right":
                img = np.ascontiguousarray(img[:, ::-1])
            images[sample_id] = img
            scale = size / SYNTH_SIZE
            bbox = tuple(int(round(v * scale)) for v in SYNTH_BBOX)
            manifest.samples.append(Sample(id=sample_id, bbox=bbox, side=side,
                                           label=label, path=f"images/{sample_id}.png",
                                           pixels=img))
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for sample in manifest.samples:
            save_image(out_dir / sample.path, images[sample.id])
        save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest, images


# -- array materialization -------------------------------------------------------------


@dataclass
class ArrayDataset:
    """Preprocessed tensors for a manifest: cropped, resized, side-normalized."""

    ids: list
    images: np.ndarray  # (N, 1, S, S) in [0, 1]
    labels: np.ndarray  # (N,) indices into LABEL_ORDER
    index: dict

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[-2:]

    def image_for(self, sample_id: str) -> np.ndarray:
        return self.images[self.index[sample_id]]

    def label_for(self, sample_id: str) -> int:
        return int(self.labels[self.index[sample_id]])

    def pairs(self) -> list:
        return [(sid, int(self.labels[self.index[sid]])) for sid in self.ids]


def build_array_dataset(manifest: DatasetManifest, image_size: int,
                        root=None) -> ArrayDataset:
    """Run every sample through crop -> resize -> side canonicalization."""
    root = Path(root) if root is not None else None
    ids, tensors, labels = [], [], []
    for sample in manifest.samples:
        if sample.pixels is not None:
            source = sample.pixels
        else:
            if sample.path is None:
                raise ManifestValidationError(f"sample {sample.id}: no pixels and no path")
            file_path = (root / sample.path) if root is not None else Path(sample.path)
            source = load_image(file_path)
        tensor = crop_resize(source, sample.bbox, target=image_size)
        tensor = normalize_side(tensor, sample.side)
        ids.append(sample.id)
        tensors.append(tensor)
        labels.append(LABEL_INDEX[sample.label])
    images = np.stack(tensors) if tensors else np.zeros((0, 1, image_size, image_size), np.float32)
    return ArrayDataset(ids=ids, images=images,
                        labels=np.asarray(labels, dtype=np.int64),
                        index={sid: i for i, sid in enumerate(ids)})
