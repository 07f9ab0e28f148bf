"""Dataset container, class-split manifests and the procedural synthetic generator."""

from __future__ import annotations

import colorsys
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, InvalidArgumentError, InvalidSplitError

FSD_MAGIC = b"FSD1"
FSD_VERSION = 1
# magic, version, class_count, image_count, H, W, C
_HEADER = struct.Struct("<4sHIIHHH")
_RECORD_LABEL = struct.Struct("<I")


@dataclass(eq=False)
class Dataset:
    """Immutable image store: ``images`` [M, C, H, W] float32 in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InvalidArgumentError("images must be [M,C,H,W] with one label per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidArgumentError("label outside [0, class_count)")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)
        self._by_class: Optional[Dict[int, np.ndarray]] = None

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices_of(self, class_id: int) -> np.ndarray:
        if self._by_class is None:
            order = np.argsort(self.labels, kind="stable")
            bounds = np.searchsorted(self.labels[order], np.arange(self.class_count + 1))
            self._by_class = {c: order[bounds[c]:bounds[c + 1]] for c in range(self.class_count)}
        return self._by_class[int(class_id)]


def quantize(images: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def dataset_bytes(images: np.ndarray, labels: np.ndarray, class_count: int) -> bytes:
    images = np.asarray(images)
    if images.ndim != 4:
        raise InvalidArgumentError("images must be [M,C,H,W]")
    m, c, h, w = images.shape
    q = quantize(images)
    parts = [_HEADER.pack(FSD_MAGIC, FSD_VERSION, class_count, m, h, w, c)]
    for label, img in zip(np.asarray(labels), q):
        if not 0 <= label < class_count:
            raise InvalidArgumentError(f"label {label} outside [0, {class_count})")
        parts.append(_RECORD_LABEL.pack(int(label)))
        parts.append(img.tobytes())
    return b"".join(parts)


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(dataset.images, dataset.labels, dataset.class_count))


def parse_dataset(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    magic, version, class_count, m, h, w, c = _HEADER.unpack_from(blob, 0)
    if magic != FSD_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FSD_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    rec = _RECORD_LABEL.size + c * h * w
    expected = _HEADER.size + m * rec
    if len(blob) < expected:
        bad = _HEADER.size + (len(blob) - _HEADER.size) // rec * rec
        raise FormatError(f"truncated: expected {expected} bytes, found {len(blob)}", bad)
    if len(blob) > expected:
        raise FormatError("trailing bytes after last record", expected)
    body = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size, count=m * rec).reshape(m, rec)
    labels = body[:, :4].copy().view("<u4").reshape(m).astype(np.int64)
    bad = np.nonzero(labels >= class_count)[0]
    if len(bad):
        raise FormatError(f"class id {labels[bad[0]]} >= class_count {class_count}",
                          _HEADER.size + int(bad[0]) * rec)
    images = body[:, 4:].reshape(m, c, h, w).astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels, class_count)


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def convert_raw_directory(root, height: int, width: int, channels: int = 3) -> Dataset:
    """Build a dataset from ``root/<class>/<file>.raw`` files of C*H*W u8 bytes.

    Class directories are sorted by name and numbered from 0.
    """
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    size = channels * height * width
    images, labels = [], []
    for cid, d in enumerate(class_dirs):
        for f in sorted(d.glob("*.raw")):
            raw = f.read_bytes()
            if len(raw) != size:
                raise FormatError(f"{f} has {len(raw)} bytes, expected {size}", min(len(raw), size))
            images.append(np.frombuffer(raw, dtype=np.uint8).reshape(channels, height, width))
            labels.append(cid)
    arr = (np.stack(images).astype(np.float32) / np.float32(255.0)) if images else \
        np.zeros((0, channels, height, width), dtype=np.float32)
    return Dataset(arr, np.asarray(labels, dtype=np.int64), len(class_dirs))


# -- split manifests -------------------------------------------------------------

@dataclass
class SplitManifest:
    base: List[int]
    val: List[int]
    novel: List[int]

    def validate(self, class_count: Optional[int] = None):
        sets = [set(self.base), set(self.val), set(self.novel)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise InvalidSplitError("base/val/novel class lists must be pairwise disjoint")
        if class_count is not None:
            every = sets[0] | sets[1] | sets[2]
            if every and (min(every) < 0 or max(every) >= class_count):
                raise InvalidSplitError(f"manifest references classes outside [0, {class_count})")

    def to_text(self) -> str:
        lines = []
        for section in ("base", "val", "novel"):
            lines.append(f"[{section}]")
            lines.extend(str(c) for c in getattr(self, section))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        sections: Dict[str, List[int]] = {"base": [], "val": [], "novel": []}
        current = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in sections:
                    raise InvalidSplitError(f"line {lineno}: unknown section {line}")
                continue
            if current is None:
                raise InvalidSplitError(f"line {lineno}: class id before any section header")
            try:
                sections[current].append(int(line))
            except ValueError:
                raise InvalidSplitError(f"line {lineno}: not a class id: {line!r}") from None
        manifest = cls(**sections)
        manifest.validate()
        return manifest

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def split_classes(class_count: int, base_frac: float, val_frac: float, seed: int) -> SplitManifest:
    """Shuffle class ids deterministically, then cut into base/val/novel."""
    if base_frac <= 0 or val_frac <= 0 or base_frac + val_frac > 1:
        raise InvalidArgumentError("fractions must be positive and sum to at most 1")
    n_base = int(round(base_frac * class_count))
    n_val = int(round(val_frac * class_count))
    n_novel = class_count - n_base - n_val
    if min(n_base, n_val, n_novel) <= 0:
        raise InvalidArgumentError(
            f"split of {class_count} classes gives sizes {n_base}/{n_val}/{n_novel}; each must be > 0")
    perm = np.random.default_rng(seed).permutation(class_count)
    return SplitManifest(sorted(int(c) for c in perm[:n_base]),
                         sorted(int(c) for c in perm[n_base:n_base + n_val]),
                         sorted(int(c) for c in perm[n_base + n_val:]))


# -- synthetic generator ------------------------------------------------------------

SHAPES = ("disc", "ring", "bar", "cross", "checker")


@dataclass
class ClassStyle:
    shape: str
    hue_bucket: int
    frequency: float
    hue: float
    saturation: float
    scale: Tuple[float, float]


@dataclass
class SynthSpec:
    num_classes: int = 32
    images_per_class: int = 200
    height: int = 32
    width: int = 32
    channels: int = 3
    noise_level: float = 0.15
    jitter: float = 1.0
    color_jitter: float = 0.06
    clutter: int = 2
    seed: int = 0
    shapes: Tuple[str, ...] = SHAPES
    hue_buckets: int = 4
    hue_offset: float = 0.0
    frequencies: Tuple[float, ...] = (0.0, 0.18)

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.frequencies = tuple(float(f) for f in self.frequencies)

    def validate(self):
        if self.num_classes < 1:
            raise InvalidArgumentError("num_classes must be >= 1")
        if self.images_per_class < 0:
            raise InvalidArgumentError("images_per_class must be >= 0")
        if self.height < 4 or self.width < 4:
            raise InvalidArgumentError("images must be at least 4x4")
        if self.channels not in (1, 3):
            raise InvalidArgumentError("channels must be 1 or 3")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise InvalidArgumentError(f"unknown shapes {sorted(unknown)}")
        if self.hue_buckets < 1 or not self.frequencies:
            raise InvalidArgumentError("need at least one hue bucket and one frequency")
        capacity = len(self.shapes) * self.hue_buckets * len(self.frequencies)
        if self.num_classes > capacity:
            raise InvalidArgumentError(
                f"{self.num_classes} classes exceed the {capacity} distinct (shape, hue, frequency) triples")
        if self.noise_level < 0 or self.jitter < 0 or self.color_jitter < 0 or self.clutter < 0:
            raise InvalidArgumentError("noise_level, jitter, color_jitter and clutter must be >= 0")


def class_styles(spec: SynthSpec) -> List[ClassStyle]:
    """Per-class generative parameters; distinct classes get distinct triples."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    triples = list(itertools.product(spec.shapes, range(spec.hue_buckets), spec.frequencies))
    chosen = rng.permutation(len(triples))[:spec.num_classes]
    styles = []
    for t in chosen:
        shape, bucket, freq = triples[t]
        hue = (spec.hue_offset + (bucket + rng.uniform(0.2, 0.8)) / spec.hue_buckets) % 1.0
        lo = rng.uniform(0.22, 0.3)
        styles.append(ClassStyle(shape, int(bucket), float(freq), float(hue),
                                 float(rng.uniform(0.65, 0.95)), (lo, lo + 0.1)))
    return styles


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.sqrt(u * u + v * v)
    if kind == "disc":
        return r <= 1.0
    if kind == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if kind == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)
    if kind == "cross":
        return ((np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)) | ((np.abs(v) <= 1.0) & (np.abs(u) <= 0.3))
    if kind == "checker":
        inside = (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
        cells = (np.floor((u + 1) * 2) + np.floor((v + 1) * 2)) % 2 == 0
        return inside & cells
    raise InvalidArgumentError(f"unknown shape {kind!r}")


def _pose(rng, h, w, radius_frac, jitter):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cx = w * (0.5 + jitter * rng.uniform(-0.15, 0.15))
    cy = h * (0.5 + jitter * rng.uniform(-0.15, 0.15))
    radius = min(h, w) * radius_frac
    angle = jitter * rng.uniform(0.0, 2 * np.pi)
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy
    return u, v, radius


def _rgb(hue, sat, val, channels):
    rgb = np.asarray(colorsys.hsv_to_rgb(hue % 1.0, min(max(sat, 0.0), 1.0), min(max(val, 0.0), 1.0)))
    return rgb if channels == 3 else rgb.mean(keepdims=True)


def render(style: ClassStyle, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One image: background, small distractor blobs, then the class shape on top.

    With ``jitter == 0`` the pose, colour and background are fixed and no
    distractors are drawn, so only the additive noise varies between images.
    """
    h, w, j, ch = spec.height, spec.width, spec.jitter, spec.channels
    background = 0.15 + j * rng.uniform(-0.1, 0.1, size=ch)
    img = np.broadcast_to(background[:, None, None], (ch, h, w)).copy()
    for _ in range(spec.clutter if j else 0):
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = min(h, w) * rng.uniform(0.06, 0.12)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
        color = _rgb(rng.uniform(), rng.uniform(0.2, 0.9), rng.uniform(0.3, 0.8), ch)
        img = np.where(blob[None], color[:, None, None], img)
    mid = 0.5 * (style.scale[0] + style.scale[1])
    u, v, radius = _pose(rng, h, w, mid + j * (rng.uniform(*style.scale) - mid), j)
    mask = _shape_mask(style.shape, u, v)
    stripes = 0.65 + 0.35 * np.cos(2 * np.pi * style.frequency * u * radius)
    cj = spec.color_jitter * j
    color = _rgb(style.hue + rng.uniform(-cj, cj), style.saturation + rng.uniform(-2 * cj, 2 * cj),
                 0.85 + rng.uniform(-2 * cj, 2 * cj), ch)
    img = np.where(mask[None], color[:, None, None] * stripes[None], img)
    if spec.noise_level:
        img = img + rng.uniform(-spec.noise_level, spec.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Render ``num_classes * images_per_class`` images; a pure function of ``spec``."""
    styles = class_styles(spec)
    m = spec.num_classes * spec.images_per_class
    images = np.zeros((m, spec.channels, spec.height, spec.width), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_classes), spec.images_per_class)
    for c, style in enumerate(styles):
        rng = np.random.default_rng([spec.seed, 1, c])
        for i in range(spec.images_per_class):
            images[c * spec.images_per_class + i] = render(style, spec, rng)
    # Store exactly what the container would hold so in-memory and on-disk runs agree.
    images = quantize(images).astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels, spec.num_classes)
