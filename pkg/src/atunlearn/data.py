"""Mixture-of-Gaussians ring data, nearest-center mode assignment and IDX image files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MoGSpec:
    n_modes: int = 8
    radius: float = 2.0
    sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_modes < 2:
            raise ValueError("n_modes must be >= 2")
        if not self.radius > 0 or not self.sigma > 0:
            raise ValueError("radius and sigma must be positive")

    @property
    def centers(self) -> np.ndarray:
        angles = 2 * np.pi * np.arange(self.n_modes) / self.n_modes
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


@dataclass(frozen=True)
class LabeledBatch:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.points[idx], self.labels[idx])


def sample_mog(spec: MoGSpec, n: int, modes=None) -> LabeledBatch:
    """Draw ``n`` labelled points; ``modes`` restricts the uniform mode draw."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(spec.seed)
    allowed = np.arange(spec.n_modes) if modes is None else np.asarray(sorted(set(modes)), dtype=int)
    labels = allowed[rng.integers(0, len(allowed), size=n)]
    noise = rng.standard_normal((n, 2))
    return LabeledBatch(spec.centers[labels] + spec.sigma * noise, labels.astype(np.int64))


def assign_modes(points, spec: MoGSpec) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != 2:
        raise ValueError(f"expected 2-d points, got dimension {points.shape[1]}")
    d2 = ((points[:, None, :] - spec.centers[None, :, :]) ** 2).sum(axis=-1)
    # argmin returns the first minimum, i.e. the lowest mode index on ties
    return d2.argmin(axis=1)


def assign_mode(point, spec: MoGSpec) -> int:
    return int(assign_modes(np.asarray(point)[None, :], spec)[0])


def distance_to_centers(points, centers) -> np.ndarray:
    points = np.atleast_2d(points)
    return np.sqrt(((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1))


def _read_idx(path, expected_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IDXFormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise IDXFormatError(f"{path}: payload has {body.size} bytes, header promises {int(np.prod(dims))}")
    return body.reshape(dims)


def load_idx_images(images_path, labels_path) -> LabeledBatch:
    """Read an IDX image/label file pair; pixels are scaled to [-1, 1] and flattened."""
    images = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    points = images.reshape(len(images), -1).astype(np.float64) / 127.5 - 1.0
    return LabeledBatch(points, labels.astype(np.int64))


def write_idx_images(images_path, labels_path, images, labels) -> None:
    """Write uint8 images of shape (n, rows, cols) and their labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS, len(labels)) + labels.tobytes())
