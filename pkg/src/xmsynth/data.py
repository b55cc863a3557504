"""Paired-slice ingestion, preprocessing, batching, and procedural phantoms.

On-disk layout::

    <root>/t1/<id>.png      source modality
    <root>/t2/<id>.png      target modality
    <root>/labels/<id>.png  tissue labels (phantoms only)
    <root>/manifest.csv     id,split
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import DataError, ValidationError
from .tensor import Rng

BACKGROUND, MATTER, FLUID, LESION = 0, 1, 2, 3
TISSUE_NAMES = ("background", "matter", "fluid", "lesion")
SOURCE_TABLE = (0.05, 0.6, 0.25, 0.45)
TARGET_TABLE = (0.05, 0.35, 0.9, 0.8)


def normalize(img) -> np.ndarray:
    """Map [0, 1] intensities to [-1, 1] (mean 0.5, std 0.5)."""
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValidationError("normalize: input must lie in [0, 1]")
    return (img - 0.5) / 0.5


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a 2-D image to ``size x size`` with half-pixel centers.

    Output pixel ``i`` samples the input at ``(i + 0.5) * H / size - 0.5``,
    clamped to the valid range, so outputs never leave the input's bounds.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (size, size):
        return img.copy()

    def axis(n_in):
        pos = np.clip((np.arange(size) + 0.5) * n_in / size - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h)
    c0, c1, fc = axis(w)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def read_png(path) -> np.ndarray:
    """Decode an 8- or 16-bit grayscale PNG to floats in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return np.clip(arr, 0.0, 1.0)


def write_png(path, img01: np.ndarray):
    """Write a [0, 1] 2-D array as an 8-bit grayscale PNG."""
    u8 = np.round(np.clip(img01, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def preprocess(img01: np.ndarray, image_size: int, in_channels: int) -> np.ndarray:
    """Resize, normalize to [-1, 1], and replicate to ``in_channels``."""
    x = normalize(np.clip(resize_bilinear(img01, image_size), 0.0, 1.0))
    return np.repeat(x[None].astype(np.float32), in_channels, axis=0)


@dataclass
class DatasetManifest:
    root: Path
    split: str
    ids: List[str]
    image_size: int
    in_channels: int

    @property
    def count(self) -> int:
        return len(self.ids)


class PairedArrays:
    """In-memory (source, target) pairs, shaped (N, C, S, S) in [-1, 1]."""

    def __init__(self, source, target=None):
        self.source = np.asarray(source, dtype=np.float32)
        self.target = None if target is None else np.asarray(target, dtype=np.float32)
        if self.target is not None and self.source.shape != self.target.shape:
            raise ValidationError(f"source {self.source.shape} and target {self.target.shape} differ")

    def __len__(self):
        return len(self.source)

    def take(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices)
        return self.source[idx], None if self.target is None else self.target[idx]


class PairedDataset:
    """Lazily decoded paired slices from a ``t1/``/``t2/`` directory."""

    def __init__(self, manifest: DatasetManifest, require_target: bool = True):
        self.manifest = manifest
        self.has_target = require_target or (manifest.root / "t2").is_dir()
        self._cache: dict = {}

    @property
    def ids(self) -> List[str]:
        return self.manifest.ids

    def __len__(self):
        return self.manifest.count

    def _load(self, modality: str, stem: str) -> np.ndarray:
        key = (modality, stem)
        if key not in self._cache:
            m = self.manifest
            self._cache[key] = preprocess(read_png(m.root / modality / f"{stem}.png"), m.image_size, m.in_channels)
        return self._cache[key]

    def take(self, indices) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        stems = [self.manifest.ids[i] for i in np.asarray(indices).reshape(-1)]
        src = np.stack([self._load("t1", s) for s in stems])
        tgt = np.stack([self._load("t2", s) for s in stems]) if self.has_target else None
        return src, tgt

    def arrays(self) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        return self.take(np.arange(len(self)))


def _stems(directory: Path) -> set:
    return {p.stem for p in directory.glob("*.png")}


def load_paired_dataset(
    root, image_size: int = 256, in_channels: int = 3, split: str = "train", require_target: bool = True
) -> PairedDataset:
    """Index ``root/t1`` and ``root/t2``; images are decoded on first access.

    With ``require_target=False`` a missing ``t2/`` is allowed (synthesis only).
    """
    root = Path(root)
    t1 = root / "t1"
    t2 = root / "t2"
    if not t1.is_dir():
        raise DataError(f"missing source directory {t1}")
    src = _stems(t1)
    if t2.is_dir():
        tgt = _stems(t2)
        orphans = sorted(src ^ tgt)
        if orphans:
            raise ValidationError(f"unpaired image stems (present in only one of t1/, t2/): {', '.join(orphans)}")
    elif require_target:
        raise DataError(f"missing target directory {t2}")
    if not src:
        raise ValidationError(f"no PNG slices under {t1}")
    manifest = DatasetManifest(root, split, sorted(src), image_size, in_channels)
    return PairedDataset(manifest, require_target)


def as_pairs(data) -> "PairedArrays | PairedDataset":
    if isinstance(data, (PairedArrays, PairedDataset)):
        return data
    if isinstance(data, tuple) and len(data) == 2:
        return PairedArrays(*data)
    raise ValidationError("expected a PairedDataset, PairedArrays, or (source, target) tuple")


def batch_iterator(
    n: int, batch_size: int, seed: int = 0, epoch: int = 0, drop_last: bool = False, shuffle: bool = True
) -> Iterator[np.ndarray]:
    """Yield index batches over ``range(n)``, permuted by ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    n = len(n) if hasattr(n, "__len__") else int(n)
    order = Rng(seed).substream("shuffle", epoch).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        batch = order[start : start + batch_size]
        if drop_last and len(batch) < batch_size:
            return
        yield batch


# -- phantoms ------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    count: int = 200
    size: int = 64
    seed: int = 0
    min_ellipses: int = 2
    max_ellipses: int = 6
    noise: float = 0.02
    source_table: Tuple[float, ...] = SOURCE_TABLE
    target_table: Tuple[float, ...] = TARGET_TABLE

    def validate(self):
        if self.count < 1:
            raise ValidationError("phantom count must be >= 1")
        if self.size < 32:
            raise ValidationError(f"phantom size must be >= 32, got {self.size}")
        if not 1 <= self.min_ellipses <= self.max_ellipses:
            raise ValidationError("phantom ellipse range is empty")


def _ellipse_mask(size, cy, cx, ay, ax, theta):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def phantom_labels(spec: PhantomSpec, index: int) -> np.ndarray:
    """Tissue label map for phantom ``index``: a head ellipse plus inclusions."""
    rng = Rng(spec.seed).substream("phantom-geometry", index)
    size = spec.size
    labels = np.zeros((size, size), dtype=np.uint8)
    n = int(rng.integers(spec.min_ellipses, spec.max_ellipses + 1))
    cy, cx = size * (0.5 + rng.uniform(-0.04, 0.04, size=2))
    ay, ax = size * rng.uniform(0.36, 0.44), size * rng.uniform(0.30, 0.40)
    theta = rng.uniform(-0.3, 0.3)
    head = _ellipse_mask(size, cy, cx, ay, ax, theta)
    labels[head] = MATTER
    for _ in range(n - 1):
        tissue = FLUID if rng.uniform() < 0.6 else LESION
        r, phi = rng.uniform(0.0, 0.55), rng.uniform(0, 2 * np.pi)
        ey, ex = cy + r * ay * np.sin(phi), cx + r * ax * np.cos(phi)
        sy, sx = size * rng.uniform(0.05, 0.16, size=2)
        mask = _ellipse_mask(size, ey, ex, sy, sx, rng.uniform(0, np.pi)) & head
        labels[mask] = tissue
    return labels


def phantom_pair(spec: PhantomSpec, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(labels, source, target)`` with intensities in [0, 1].

    Source and target draw independent noise, so the target depends only on
    the label map and its own noise.
    """
    labels = phantom_labels(spec, index)
    src_noise = Rng(spec.seed).substream("phantom-source-noise", index)
    tgt_noise = Rng(spec.seed).substream("phantom-target-noise", index)
    src = np.asarray(spec.source_table)[labels] + src_noise.normal(0.0, spec.noise, labels.shape)
    tgt = np.asarray(spec.target_table)[labels] + tgt_noise.normal(0.0, spec.noise, labels.shape)
    return labels, np.clip(src, 0.0, 1.0), np.clip(tgt, 0.0, 1.0)


def make_phantom_dataset(spec: PhantomSpec, out_dir, split: str = "train") -> DatasetManifest:
    """Write ``spec.count`` phantom pairs, label sidecars, and ``manifest.csv``."""
    spec.validate()
    root = Path(out_dir)
    try:
        for sub in ("t1", "t2", "labels"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        ids = []
        for i in range(spec.count):
            stem = f"{i:05d}"
            labels, src, tgt = phantom_pair(spec, i)
            write_png(root / "t1" / f"{stem}.png", src)
            write_png(root / "t2" / f"{stem}.png", tgt)
            Image.fromarray(labels).save(root / "labels" / f"{stem}.png", format="PNG")
            ids.append(stem)
        tmp = root / "manifest.csv.tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "split"])
            writer.writerows([stem, split] for stem in ids)
        os.replace(tmp, root / "manifest.csv")
    except OSError as exc:
        raise DataError(f"cannot write phantom dataset to {root}: {exc}") from exc
    return DatasetManifest(root, split, ids, spec.size, 1)
