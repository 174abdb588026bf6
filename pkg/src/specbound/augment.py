"""Translations, elastic deformations and mixed base/augmented datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .data import LabeledDataset
from .errors import UsageError
from .tensor import Rng


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation parameters (defaults are for 32x32 images)."""

    translation: int = 4
    alpha: float = 8.0
    sigma_e: float = 4.0
    fill: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.translation < 0 or self.alpha < 0:
            raise UsageError("translation radius and alpha must be non-negative")
        if self.sigma_e <= 0:
            raise UsageError("sigma_e must be positive")
        if self.fill not in ("zero", "wrap"):
            raise UsageError(f"unknown fill rule {self.fill!r}")


def translate(img: np.ndarray, dx: int, dy: int, fill: str = "zero") -> np.ndarray:
    """Shift an ``(H, W, C)`` image ``dx`` columns right and ``dy`` rows down."""
    h, w = img.shape[:2]
    if abs(dx) > w or abs(dy) > h:
        raise UsageError("shift larger than the image")
    if fill == "wrap":
        return np.roll(img, (dy, dx), axis=(0, 1))
    if fill != "zero":
        raise UsageError(f"unknown fill rule {fill!r}")
    out = np.zeros_like(img)
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def displacement_field(shape: tuple, alpha: float, sigma_e: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed uniform[-1, 1] displacements (rows, cols) scaled by ``alpha``."""
    h, w = shape
    dy = gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma_e, mode="constant", truncate=3.0)
    dx = gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma_e, mode="constant", truncate=3.0)
    return alpha * dy, alpha * dx


def elastic_deform(img: np.ndarray, alpha: float, sigma_e: float, rng: Rng) -> np.ndarray:
    """Random elastic deformation, bilinear resampling with zero boundary."""
    if alpha < 0:
        raise UsageError("alpha must be non-negative")
    if alpha == 0:
        return img.copy()
    h, w = img.shape[:2]
    dy, dx = displacement_field((h, w), alpha, sigma_e, rng)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rows + dy, cols + dx])
    if img.ndim == 2:
        return map_coordinates(img, coords, order=1, mode="constant", cval=0.0)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = map_coordinates(img[..., ch], coords, order=1, mode="constant", cval=0.0)
    return out


def random_translate(img: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    t = cfg.translation
    dx, dy = (int(v) for v in rng.integers(-t, t + 1, size=2))
    return translate(img, dx, dy, cfg.fill)


def build_mixed_dataset(base: LabeledDataset, pct_augment: float, kind: str, cfg: AugmentConfig) -> LabeledDataset:
    """Same-size dataset where a ``pct_augment`` share of slots are augmentations.

    ``round(pct * m)`` base images are dropped; the retained images fill the
    first slots and augmentations of distinct retained images (chosen
    uniformly, seeded by ``cfg.seed``) fill the rest.  Image ``j`` of the
    augmented block uses ``Rng(cfg.seed).child(j)``.
    """
    if not 0.0 <= pct_augment <= 0.5:
        raise UsageError("pct_augment must lie in [0, 0.5]")
    if kind not in ("translate", "elastic"):
        raise UsageError(f"unknown augmentation kind {kind!r}")
    m = len(base)
    n_aug = int(round(pct_augment * m))
    if n_aug == 0:
        return base.subset(np.arange(m))
    rng = Rng(cfg.seed)
    perm = rng.permutation(m)
    retained = np.sort(perm[: m - n_aug])
    sources = retained[rng.choice(len(retained), n_aug, replace=False)]
    aug = np.empty((n_aug,) + base.image_shape, dtype=base.images.dtype)
    for j, src in enumerate(sources):
        r = rng.child(j)
        if kind == "translate":
            aug[j] = random_translate(base.images[src], cfg, r)
        else:
            aug[j] = elastic_deform(base.images[src], cfg.alpha, cfg.sigma_e, r)
    kept = base.subset(retained)
    return LabeledDataset(
        np.concatenate([kept.images, aug]),
        np.concatenate([kept.labels, base.labels[sources]]),
        base.num_classes,
        np.concatenate([kept.provenance, np.full(n_aug, kind, dtype="<U16")]),
        np.concatenate([kept.source, base.source[sources]]),
    )
