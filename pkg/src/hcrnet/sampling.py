"""Patch grid, train/test splitting, and entropy-driven oversampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError, SplitError
from .rasters import NODATA

TRAIN, TEST, EXCLUDED = "train", "test", "excluded"


@dataclass
class PatchIndex:
    """Non-overlapping patch grid over a raster.

    `origins` holds the top-left (row, col) of each patch, `tags` the split
    assignment, `weights` the sampling weight of each train patch (zero
    elsewhere until :func:`oversampling_weights` fills them in).
    """
    patch_size: int
    origins: np.ndarray        # (N, 2) int64
    tags: np.ndarray           # (N,) object of TRAIN/TEST/EXCLUDED
    weights: np.ndarray        # (N,) float64

    def ids(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.tags == tag)

    def window(self, raster: np.ndarray, patch_id: int) -> np.ndarray:
        r, c = self.origins[patch_id]
        s = self.patch_size
        return raster[..., r:r + s, c:c + s]

    def __len__(self):
        return len(self.origins)


def split_patches(labels: np.ndarray, gt_labels: np.ndarray | None,
                  patch_size: int, train_fraction: float, seed: int) -> PatchIndex:
    """Tile the raster into non-overlapping patches fully inside its bounds,
    exclude every patch touching a ground-truth pixel, and split the rest
    into train/test at `train_fraction` with a seeded shuffle."""
    h, w = labels.shape
    if patch_size < 1:
        raise InputError(f"patch_size must be positive, got {patch_size}")
    if patch_size > h or patch_size > w:
        raise InputError(f"patch_size {patch_size} exceeds raster extents {h}x{w}")
    if not 0.0 < train_fraction < 1.0:
        raise InputError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rows = np.arange(0, h - patch_size + 1, patch_size)
    cols = np.arange(0, w - patch_size + 1, patch_size)
    origins = np.array([(r, c) for r in rows for c in cols], dtype=np.int64)
    tags = np.empty(len(origins), dtype=object)
    eligible = []
    for i, (r, c) in enumerate(origins):
        if gt_labels is not None and \
                (gt_labels[r:r + patch_size, c:c + patch_size] != NODATA).any():
            tags[i] = EXCLUDED
        else:
            eligible.append(i)
    if not eligible:
        raise SplitError("every patch touches a ground-truth pixel; nothing left to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(eligible))
    n_train = int(round(train_fraction * len(eligible)))
    if n_train == 0 or n_train == len(eligible):
        raise SplitError(
            f"train_fraction {train_fraction} leaves an empty split "
            f"({n_train} of {len(eligible)} eligible patches)")
    for rank, j in enumerate(order):
        tags[eligible[j]] = TRAIN if rank < n_train else TEST
    return PatchIndex(patch_size, origins, tags, np.zeros(len(origins)))


def patch_entropy(patch_labels: np.ndarray) -> float:
    """Shannon entropy (bits) of the class distribution inside one patch,
    ignoring nodata. An all-nodata patch contributes zero and is flagged."""
    valid = patch_labels[patch_labels != NODATA]
    if valid.size == 0:
        warnings.warn("patch contains only nodata pixels; entropy set to 0", stacklevel=2)
        return 0.0
    counts = np.bincount(valid.astype(np.int64))
    p = counts[counts > 0] / valid.size
    return float(-(p * np.log2(p)).sum())


def oversampling_weights(index: PatchIndex, labels: np.ndarray, priors: np.ndarray,
                         epsilon: float = 0.1, prior_floor: float = 1e-4) -> np.ndarray:
    """Sampling weight per patch: (epsilon + normalized entropy) divided by
    the scene prior of the patch's modal class (floored), then normalized to
    sum to one over train patches. Non-train patches get weight zero.

    Mixed patches and patches dominated by rare classes are both drawn more
    often, which counters the class imbalance of the scene.
    """
    priors = np.asarray(priors, dtype=np.float64)
    if priors.ndim != 1 or priors.size == 0:
        raise InputError(f"priors must be a 1D distribution, got shape {priors.shape}")
    if (priors < 0).any() or abs(priors.sum() - 1.0) > 1e-6:
        raise InputError("priors must be non-negative and sum to 1")
    n_classes = priors.size
    max_entropy = np.log2(n_classes) if n_classes > 1 else 1.0
    weights = np.zeros(len(index), dtype=np.float64)
    for i in index.ids(TRAIN):
        window = index.window(labels, int(i))
        valid = window[window != NODATA]
        if valid.size == 0:
            continue
        if int(valid.max()) >= n_classes:
            raise InputError(f"patch {int(i)} contains class id {int(valid.max())}, "
                             f"but priors cover only {n_classes} classes")
        counts = np.bincount(valid.astype(np.int64), minlength=n_classes)
        modal = int(np.argmax(counts))
        entropy = patch_entropy(window)
        weights[i] = (epsilon + entropy / max_entropy) / max(priors[modal], prior_floor)
    total = weights.sum()
    if total <= 0:
        raise SplitError("no labeled train patches to weight")
    weights /= total
    index.weights = weights
    return weights


def draw_patches(index: PatchIndex, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial draw (with replacement) of train patch ids."""
    train_ids = index.ids(TRAIN)
    p = index.weights[train_ids]
    total = p.sum()
    if total <= 0:
        raise SplitError("oversampling weights have not been assigned")
    return rng.choice(train_ids, size=batch_size, replace=True, p=p / total)


def empirical_priors(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Class distribution of the non-nodata pixels of a label raster."""
    valid = labels[labels != NODATA].astype(np.int64)
    if valid.size == 0:
        raise InputError("label raster has no labeled pixels")
    if int(valid.max()) >= n_classes:
        raise InputError(f"label raster contains class id {int(valid.max())}, "
                         f"but only {n_classes} classes are defined")
    counts = np.bincount(valid, minlength=n_classes)
    return counts / counts.sum()
