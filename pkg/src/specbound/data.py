"""Labeled image datasets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass
class LabeledDataset:
    """Images ``(m, H, W, C)`` in [0, 1] with integer labels.

    ``provenance`` tags each sample (``"base"``, ``"translate"``, ``"elastic"``)
    and ``source`` holds the index of the base image it came from (-1 if
    unknown).
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    provenance: np.ndarray = field(default=None)
    source: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be (m, H, W, C), got {self.images.shape}")
        m = self.images.shape[0]
        if self.labels.shape != (m,):
            raise InputError("labels must be a vector with one entry per image")
        if m and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError("labels out of range")
        if self.provenance is None:
            self.provenance = np.full(m, "base", dtype="<U16")
        else:
            self.provenance = np.asarray(self.provenance, dtype="<U16")
        if self.source is None:
            self.source = np.arange(m, dtype=np.int64)
        else:
            self.source = np.asarray(self.source, dtype=np.int64)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.num_classes, self.provenance[idx], self.source[idx]
        )

    def max_norm(self) -> float:
        """Largest l2 norm of an input image (the bound ``B`` on ``||x||_2``)."""
        if len(self) == 0:
            return 0.0
        flat = self.images.reshape(len(self), -1).astype(np.float64)
        return float(np.sqrt(np.max(np.sum(flat * flat, axis=1))))


def synthetic_dataset(m: int, shape=(32, 32, 3), num_classes: int = 10, seed: int = 0, noise: float = 0.15) -> LabeledDataset:
    """Seeded stand-in for an image dataset with learnable class structure.

    Each class has a fixed random mean image; samples add Gaussian noise,
    are clipped to [0, 1] and quantized to multiples of 1/255 (so they survive
    a round trip through the 8-bit CIFAR-10 format unchanged).
    """
    from .tensor import Rng

    rng = Rng(seed)
    means = rng.child(0).uniform(0.2, 0.8, (num_classes,) + tuple(shape))
    labels = rng.child(1).integers(0, num_classes, m)
    imgs = means[labels] + rng.child(2).normal((m,) + tuple(shape), scale=noise)
    imgs = np.rint(np.clip(imgs, 0.0, 1.0) * 255.0) / 255.0
    return LabeledDataset(imgs.astype(np.float32), labels, num_classes)
