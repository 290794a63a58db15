"""Scikit-learn style estimator facade over the hierarchical network.

`X` is a single multitemporal scene of shape (T, C, H, W) and `y` its label
raster of shape (H, W) with 65535 as nodata, so the classifier slots into
sklearn tooling (``get_params``/``set_params``, cloning) while the heavy
lifting stays in the library modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import UsageError
from .hierarchy import LossWeights, Taxonomy, flat_taxonomy
from .model import ModelConfig, build_network
from .rasters import NODATA, check_cube, check_labels
from .train import SceneData, TrainConfig, predict_map, train


class HierarchicalCubeClassifier(ClassifierMixin, BaseEstimator):
    """Multitemporal land-cover classifier with a three-level class tree.

    Without a taxonomy the three levels all mirror the observed classes and
    the model degrades to a flat per-pixel classifier with deep supervision.

    Parameters follow the library defaults; see :class:`ModelConfig` and
    :class:`TrainConfig` for their meaning.
    """

    def __init__(self, taxonomy: Taxonomy | None = None, patch_size: int = 30,
                 stem_filters: int = 32, block_filters: tuple = (32, 64, 64),
                 temporal_kernel: int = 3, spatial_kernel: int = 3,
                 learning_rate: float = 1e-3, weight_decay: float = 1e-4,
                 loss_weights: LossWeights | None = None, batch_size: int = 8,
                 max_epochs: int = 30, patience: int = 5, min_delta: float = 0.0,
                 train_fraction: float = 0.3, val_pixels_per_class: int = 25,
                 seed: int = 0):
        self.taxonomy = taxonomy
        self.patch_size = patch_size
        self.stem_filters = stem_filters
        self.block_filters = block_filters
        self.temporal_kernel = temporal_kernel
        self.spatial_kernel = spatial_kernel
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.loss_weights = loss_weights
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.train_fraction = train_fraction
        self.val_pixels_per_class = val_pixels_per_class
        self.seed = seed

    def fit(self, X, y, gt_labels=None):
        """Train on one scene. `X` is (T,C,H,W), `y` is (H,W) micro labels.

        `gt_labels` optionally supplies the sparse validation raster; when
        omitted, validation pixels are carved out of `y`.
        """
        X = check_cube(X, name="X")
        y = check_labels(y, name="y")
        if self.taxonomy is not None:
            tax = self.taxonomy
        else:
            observed = np.unique(y[y != NODATA])
            if observed.size == 0:
                raise UsageError("y contains no labeled pixels")
            n = int(observed.max()) + 1
            tax = flat_taxonomy([str(i) for i in range(n)])
        config = ModelConfig(
            timesteps=X.shape[0], channels=X.shape[1], patch_size=self.patch_size,
            stem_filters=self.stem_filters, block_filters=tuple(self.block_filters),
            temporal_kernel=self.temporal_kernel, spatial_kernel=self.spatial_kernel)
        data = SceneData.prepare(
            X, y, tax, gt_labels=gt_labels, patch_size=self.patch_size,
            train_fraction=self.train_fraction, seed=self.seed,
            val_pixels_per_class=self.val_pixels_per_class)
        net = build_network(config, tax, seed=self.seed)
        tcfg = TrainConfig(
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            loss_weights=self.loss_weights or LossWeights(),
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, min_delta=self.min_delta, seed=self.seed)
        net, history = train(net, data, tcfg)
        self.network_ = net
        self.taxonomy_ = tax
        self.history_ = history
        self.classes_ = np.arange(tax.n_classes("micro"))
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise UsageError("this classifier has not been fitted yet")

    def predict(self, X) -> np.ndarray:
        """Micro-class label raster (H,W) for a scene (T,C,H,W)."""
        self._check_fitted()
        return predict_map(self.network_, check_cube(X, name="X"),
                           batch_size=self.batch_size)["micro"]

    def predict_level(self, X, level: str) -> np.ndarray:
        """Label raster predicted by the head of the requested level."""
        self._check_fitted()
        maps = predict_map(self.network_, check_cube(X, name="X"),
                           batch_size=self.batch_size)
        if level not in maps:
            raise UsageError(f"unknown level {level!r}, expected one of {sorted(maps)}")
        return maps[level]

    def predict_proba(self, X) -> np.ndarray:
        """Micro-class probabilities, shape (n_micro, H, W)."""
        self._check_fitted()
        _, probs = predict_map(self.network_, check_cube(X, name="X"),
                               batch_size=self.batch_size, emit_probs=True)
        return probs["micro"]

    def score(self, X, y) -> float:
        """Overall accuracy against a label raster, ignoring nodata."""
        self._check_fitted()
        y = check_labels(y, name="y")
        pred = self.predict(X)
        mask = y != NODATA
        if not mask.any():
            raise UsageError("y contains no labeled pixels to score against")
        return float((pred[mask] == y[mask]).mean())
