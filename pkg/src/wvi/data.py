"""Dataset ingestion and file export.

Image datasets come in as IDX files (optionally gzipped), normalized to
[0, 1]; three deterministic 2-D synthetic generators cover quick
experiments. Images go out as binary PGM, points as CSV.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
SYNTH_KINDS = ("ring8", "checkerboard", "moons")


class DataError(ValueError):
    """Malformed dataset file or request."""


@dataclass
class DatasetHandle:
    """Flat (N, D) examples in [0, 1], with optional image geometry."""

    examples: np.ndarray
    name: str = ""
    split: str = "train"
    image_shape: Optional[tuple] = None

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float64)
        if self.examples.ndim != 2 or self.examples.shape[0] < 1:
            raise DataError(f"examples must be a non-empty (N, D) array, "
                            f"got shape {self.examples.shape}")
        lo, hi = self.examples.min(), self.examples.max()
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"examples must lie in [0, 1], got range [{lo}, {hi}]")

    def __len__(self):
        return self.examples.shape[0]

    @property
    def dim(self) -> int:
        return self.examples.shape[1]


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_mnist_idx(path, downsample: int = 1, limit: int = 0) -> DatasetHandle:
    """Load an IDX image file (gzip detected by magic bytes).

    downsample > 1 mean-pools square blocks of that side length; limit > 0
    keeps only the first images.
    """
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise DataError(f"{path}: truncated header")
        (magic,) = struct.unpack(">I", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(
                f"{path}: bad magic, expected {IDX_IMAGE_MAGIC:#010x}, "
                f"found {magic:#010x}")
        count, rows, cols = struct.unpack(">III", fh.read(12))
        payload = fh.read()
    if len(payload) != count * rows * cols:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, "
                        f"expected {count}x{rows}x{cols}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    if limit > 0:
        images = images[:limit]
    data = images.astype(np.float64) / 255.0
    if downsample > 1:
        if rows % downsample or cols % downsample:
            raise DataError(f"{path}: {rows}x{cols} images do not divide by {downsample}")
        r, c = rows // downsample, cols // downsample
        data = data.reshape(len(data), r, downsample, c, downsample).mean(axis=(2, 4))
        rows, cols = r, c
    return DatasetHandle(examples=data.reshape(len(data), rows * cols),
                         name=path.name, image_shape=(rows, cols))


def synth_dataset(kind: str, n: int, seed: int) -> DatasetHandle:
    """Deterministic 2-D synthetic dataset in the unit square."""
    if n < 1:
        raise DataError(f"need n >= 1 points, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if kind == "ring8":
        angles = 2.0 * np.pi * np.arange(8) / 8.0
        centers = 0.5 + 0.35 * np.column_stack([np.cos(angles), np.sin(angles)])
        pts = centers[rng.integers(0, 8, size=n)] + rng.normal(0.0, 0.02, (n, 2))
    elif kind == "checkerboard":
        cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
        picks = rng.integers(0, len(cells), size=n)
        corners = np.array([cells[p] for p in picks], dtype=np.float64)
        pts = (corners + rng.uniform(0.0, 1.0, (n, 2))) / 4.0
    elif kind == "moons":
        theta = rng.uniform(0.0, np.pi, n)
        upper = rng.integers(0, 2, size=n).astype(bool)
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.column_stack([x, y]) * 0.3 + np.array([0.35, 0.4])
        pts += rng.normal(0.0, 0.01, (n, 2))
    else:
        raise DataError(f"unknown synthetic dataset {kind!r}, choose from {SYNTH_KINDS}")
    return DatasetHandle(examples=np.clip(pts, 0.0, 1.0), name=kind)


def split_train_val(handle: DatasetHandle, val_count: int, seed: int = 0):
    """Deterministic shuffle split into train and validation handles."""
    n = len(handle)
    if not 0 < val_count < n:
        raise DataError(f"val_count must be in (0, {n}), got {val_count}")
    order = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    train = handle.examples[order[: n - val_count]]
    val = handle.examples[order[n - val_count :]]
    common = dict(name=handle.name, image_shape=handle.image_shape)
    return (DatasetHandle(examples=train, split="train", **common),
            DatasetHandle(examples=val, split="validation", **common))


def write_pgm(path, image: np.ndarray):
    """Binary PGM (P5, maxval 255); values are clamped into [0, 255]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DataError(f"PGM needs a 2-D image, got shape {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of write_pgm, for round-trip checks."""
    with open(path, "rb") as fh:
        parts = []
        while len(parts) < 4:
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: truncated PGM header")
            if line.startswith(b"#"):
                continue
            parts.extend(line.split())
        if parts[0] != b"P5" or parts[3] != b"255":
            raise DataError(f"{path}: not an 8-bit P5 file")
        w, h = int(parts[1]), int(parts[2])
        pixels = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def load_points_csv(path) -> np.ndarray:
    """Numeric CSV, one point per row; ragged rows are rejected by line."""
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values = [float(v) for v in line.split(",")]
            except ValueError as err:
                raise DataError(f"{path}: line {lineno}: {err}") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataError(f"{path}: line {lineno} has {len(values)} values, "
                                f"expected {width}")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no points found")
    return np.asarray(rows, dtype=np.float64)
