"""Reproducible image data: procedural glyphs with a planted attribute bias,
plus the MNIST IDX container.

Glyph attributes are ``size, thickness, slant, curvature, marker``. The class
is ``large`` iff ``size > 0.5``; the marker (a horizontal bar across the upper
third) has no bearing on the class but is drawn far more often for large
glyphs, which is the spurious correlation the bias analysis should surface.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pgm

ATTRIBUTE_NAMES = ("size", "thickness", "slant", "curvature", "marker")
CLASS_NAMES = ("small", "large")
MARKER = ATTRIBUTE_NAMES.index("marker")
SIZE = ATTRIBUTE_NAMES.index("size")
SUPERSAMPLE = 4

# glyph geometry in normalized coordinates, image spans [-1, 1]
_R_MIN, _R_MAX = 0.3, 0.95
_HALF_STROKE_MIN, _HALF_STROKE_MAX = 0.05, 0.16
_MAX_SHEAR = 0.45
_MARKER_Y = (-0.75, -0.58)
_MARKER_X = 0.6


class DatasetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GlyphAttributes:
    size: float
    thickness: float
    slant: float
    curvature: float
    marker: int

    def __post_init__(self):
        for name in ATTRIBUTE_NAMES[:4]:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DatasetConfigError(f"{name}={v} outside [0, 1]")
        if self.marker not in (0, 1):
            raise DatasetConfigError("marker must be 0 or 1")

    def as_vector(self) -> np.ndarray:
        return np.array([self.size, self.thickness, self.slant, self.curvature, self.marker], float)

    @classmethod
    def from_vector(cls, v) -> "GlyphAttributes":
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(round(v[4])))

    @property
    def label(self) -> int:
        return int(self.size > 0.5)


@dataclass(frozen=True)
class GlyphDatasetConfig:
    n_samples: int = 10_000
    seed: int = 0
    image_size: int = 16
    bias: dict = field(default_factory=lambda: {"large": 0.70, "small": 0.10})

    def __post_init__(self):
        if self.n_samples <= 0:
            raise DatasetConfigError("n_samples must be positive")
        if self.image_size < 8:
            raise DatasetConfigError("image_size must be at least 8")
        if set(self.bias) != set(CLASS_NAMES):
            raise DatasetConfigError(f"bias table needs exactly the classes {CLASS_NAMES}")
        for k, p in self.bias.items():
            if not 0.0 <= float(p) <= 1.0:
                raise DatasetConfigError(f"bias probability for {k!r} must be in [0, 1], got {p}")


@dataclass
class LabeledImages:
    """A batch of images with labels and, for glyphs, attribute vectors."""

    images: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray | None = None
    attribute_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx) -> "LabeledImages":
        attrs = None if self.attributes is None else self.attributes[idx]
        return LabeledImages(self.images[idx], self.labels[idx], attrs, self.attribute_names)

    def split(self, n_first: int) -> tuple["LabeledImages", "LabeledImages"]:
        return self[:n_first], self[n_first:]


def _grid(image_size: int) -> tuple[np.ndarray, np.ndarray]:
    n = image_size * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(c, c)  # xs, ys; row 0 is the top


def _downsample(mask: np.ndarray, image_size: int) -> np.ndarray:
    s = SUPERSAMPLE
    return mask.reshape(image_size, s, image_size, s).mean(axis=(1, 3))


def render_glyph(attrs: GlyphAttributes, image_size: int = 16) -> np.ndarray:
    """Rasterize a glyph with box-filter anti-aliasing."""
    xs, ys = _grid(image_size)
    r = _R_MIN + attrs.size * (_R_MAX - _R_MIN)
    half = _HALF_STROKE_MIN + attrs.thickness * (_HALF_STROKE_MAX - _HALF_STROKE_MIN)
    shear = (attrs.slant - 0.5) * 2.0 * _MAX_SHEAR
    # superellipse exponent: curvature 1 -> circle, 0 -> near-square
    n = 2.0 + (1.0 - attrs.curvature) * 8.0
    u = (xs - shear * ys) / r
    v = ys / r
    rho = (np.abs(u) ** n + np.abs(v) ** n) ** (1.0 / n)
    # stroke grows inward from the outline so the outer extent depends on size alone
    depth = (1.0 - rho) * r
    glyph = (depth >= 0.0) & (depth <= 2.0 * half)
    img = _downsample(glyph.astype(np.float64), image_size)
    if attrs.marker:
        bar = (ys >= _MARKER_Y[0]) & (ys <= _MARKER_Y[1]) & (np.abs(xs) <= _MARKER_X)
        img = np.maximum(img, _downsample(bar.astype(np.float64), image_size))
    return img


def marker_rows(image_size: int = 16) -> np.ndarray:
    """Row indices touched by the marker bar."""
    bar = render_glyph(GlyphAttributes(0.0, 0.0, 0.5, 1.0, 1), image_size)
    blank = render_glyph(GlyphAttributes(0.0, 0.0, 0.5, 1.0, 0), image_size)
    return np.flatnonzero(np.any(bar != blank, axis=1))


def sample_attributes(config: GlyphDatasetConfig) -> np.ndarray:
    """Draw an ``(n, 5)`` attribute table; marker is conditioned on the class."""
    rng = np.random.default_rng(config.seed)
    n = config.n_samples
    cont = rng.uniform(0.0, 1.0, size=(n, 4))
    large = cont[:, SIZE] > 0.5
    p_marker = np.where(large, config.bias["large"], config.bias["small"])
    marker = (rng.random(n) < p_marker).astype(np.float64)
    return np.column_stack([cont, marker])


def sample_dataset(config: GlyphDatasetConfig | None = None) -> LabeledImages:
    config = config or GlyphDatasetConfig()
    attrs = sample_attributes(config)
    images = np.stack([render_glyph(GlyphAttributes.from_vector(a), config.image_size)
                       for a in attrs])
    labels = (attrs[:, SIZE] > 0.5).astype(np.int64)
    return LabeledImages(images, labels, attrs, ATTRIBUTE_NAMES)


# -- export -----------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def export_dataset(data: LabeledImages, directory: str | os.PathLike,
                   splits: list[str] | None = None) -> Path:
    """Write one P5 file per image plus a JSON-lines manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST, "w") as f:
        for i in range(len(data)):
            name = f"images/{i:06d}.pgm"
            pgm.write_pgm(directory / name, data.images[i])
            row = {"file": name, "label": int(data.labels[i])}
            if splits is not None:
                row["split"] = splits[i]
            if data.attributes is not None:
                row["attributes"] = dict(zip(data.attribute_names,
                                             (float(v) for v in data.attributes[i])))
            f.write(json.dumps(row) + "\n")
    return directory / MANIFEST


def read_manifest(directory: str | os.PathLike) -> list[dict]:
    with open(Path(directory) / MANIFEST) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_exported(directory: str | os.PathLike, split: str | None = None) -> LabeledImages:
    directory = Path(directory)
    rows = [r for r in read_manifest(directory) if split is None or r.get("split") == split]
    images = np.stack([pgm.read_pgm(directory / r["file"]) for r in rows])
    labels = np.array([r["label"] for r in rows], dtype=np.int64)
    attrs, names = None, ()
    if rows and "attributes" in rows[0]:
        names = tuple(rows[0]["attributes"])
        attrs = np.array([[r["attributes"][k] for k in names] for r in rows])
    return LabeledImages(images, labels, attrs, names)


# -- IDX ----------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


class IdxTruncated(IdxError):
    pass


def _read_idx(path, magic_expected: int, ndims: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 + 4 * ndims:
        raise IdxTruncated(f"{path}: header truncated")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != magic_expected:
        raise IdxMagicError(f"{path}: bad magic 0x{magic:08x}, expected 0x{magic_expected:08x}")
    dims = struct.unpack(">" + "I" * ndims, data[4:4 + 4 * ndims])
    body = data[4 + 4 * ndims:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise IdxTruncated(f"{path}: expected {need} bytes of data, found {len(body)}")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledImages:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxCountMismatch(f"{len(images)} images but {len(labels)} labels")
    return LabeledImages(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def render_batch(attributes: np.ndarray, image_size: int = 16) -> np.ndarray:
    """Render a stack of attribute vectors; the marker column is rounded."""
    return np.stack([render_glyph(GlyphAttributes.from_vector(a), image_size)
                     for a in np.asarray(attributes)])
