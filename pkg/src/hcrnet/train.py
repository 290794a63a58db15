"""Training loop, fine-tuning protocol, and full-scene inference.

Training reads weak labels from the train patches of a scene and stops
early on a validation loss computed over sparse ground-truth pixels that
live in patches excluded from both splits. Fine-tuning reuses a pretrained
trunk on a new scene in three steps: replace the micro head, warm the new
head up alone for a fixed number of iterations, then release every layer.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (ConfigError, InputError, NumericError, SplitError,
                     TaxonomyError, UsageError)
from .hierarchy import (LossWeights, Taxonomy, Transitions, total_loss)
from .model import Network
from .optim import Adam
from .rasters import NODATA, check_cube, check_labels
from .sampling import (PatchIndex, draw_patches, empirical_priors,
                       oversampling_weights, split_patches)
from .synthetic import sample_sparse_labels
from . import tensor as T

_TERM_ORDER = ("cce_macro", "cce_intermediate", "cce_micro",
               "penalty_micro_intermediate", "penalty_intermediate_macro",
               "penalty_micro_macro")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    min_delta: float = 0.0
    seed: int = 0
    steps_per_epoch: Optional[int] = None
    val_weighting: str = "uniform"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("batch_size", "max_epochs", "patience"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.min_delta < 0:
            raise ConfigError(f"min_delta must be >= 0, got {self.min_delta}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"steps_per_epoch must be positive, got {self.steps_per_epoch}")
        if self.val_weighting not in ("uniform", "inverse-prior"):
            raise ConfigError(
                f"val_weighting must be 'uniform' or 'inverse-prior', got {self.val_weighting!r}")


@dataclass
class EpochStats:
    epoch: int                    # 1-based
    train_loss: float
    val_loss: float
    val_accuracy: float
    terms: dict
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0           # 1-based index into epochs
    warmup_losses: list = field(default_factory=list)

    @property
    def best_val_loss(self) -> float:
        return self.epochs[self.best_epoch - 1].val_loss

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_accuracy,"
                 + ",".join(f"term:{t}" for t in _TERM_ORDER)]
        for row in self.epochs:
            terms = ",".join(f"{row.terms.get(t, 0.0):.6f}" for t in _TERM_ORDER)
            lines.append(f"{row.epoch},{row.train_loss:.6f},{row.val_loss:.6f},"
                         f"{row.val_accuracy:.6f},{terms}")
        return "\n".join(lines) + "\n"


@dataclass
class SceneData:
    """One scene prepared for training: image cube, weak label raster, the
    sparse ground-truth raster used for validation, and the patch index."""
    cube: np.ndarray              # (T,C,H,W) float32
    labels: np.ndarray            # (H,W) uint16 weak labels
    gt_labels: np.ndarray         # (H,W) uint16 sparse validation pixels
    index: PatchIndex
    priors: np.ndarray            # micro-class priors of the weak labels
    val_patch_ids: np.ndarray     # patches containing ground-truth pixels

    @staticmethod
    def prepare(cube, labels, taxonomy: Taxonomy, gt_labels=None,
                patch_size: int = 30, train_fraction: float = 0.3,
                seed: int = 0, val_pixels_per_class: int = 25) -> "SceneData":
        """Validate inputs, split the patch grid, and weight train patches.

        When no ground-truth raster is given, up to `val_pixels_per_class`
        pixels per class are carved out of the labels to serve as the
        validation sample (their patches are then excluded from training).
        """
        n_micro = taxonomy.n_classes("micro")
        cube = check_cube(cube)
        labels = check_labels(labels, n_classes=n_micro)
        if cube.shape[2:] != labels.shape:
            raise InputError(f"cube extents {cube.shape[2:]} do not match "
                             f"labels {labels.shape}")
        if gt_labels is None:
            gt_labels = sample_sparse_labels(labels, val_pixels_per_class, seed)
        gt_labels = check_labels(gt_labels, name="gt_labels", n_classes=n_micro)
        if gt_labels.shape != labels.shape:
            raise InputError(f"gt_labels shape {gt_labels.shape} does not match "
                             f"labels {labels.shape}")
        index = split_patches(labels, gt_labels, patch_size, train_fraction, seed)
        priors = empirical_priors(labels, n_micro)
        oversampling_weights(index, labels, priors)
        val_ids = np.array([i for i in range(len(index))
                            if (index.window(gt_labels, i) != NODATA).any()],
                           dtype=np.int64)
        if val_ids.size == 0:
            raise SplitError("no patch contains a ground-truth pixel; "
                             "validation would be empty")
        return SceneData(cube, labels, gt_labels, index, priors, val_ids)

    def batch(self, patch_ids) -> tuple:
        xs = np.stack([self.index.window(self.cube, int(i)) for i in patch_ids])
        ys = np.stack([self.index.window(self.labels, int(i)) for i in patch_ids])
        return xs, ys


def derive_class_weights(reference: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse-frequency class weights, normalized to mean 1 over the classes
    present in `reference`. Absent classes get weight 0 and a warning."""
    valid = reference[reference != NODATA].astype(np.int64)
    if valid.size == 0:
        raise InputError("reference raster has no labeled pixels")
    counts = np.bincount(valid, minlength=n_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(n_classes, dtype=np.float64)
    inv = valid.size / counts[present]
    weights[present] = inv / inv.mean()
    if (~present).any():
        warnings.warn(f"classes {np.flatnonzero(~present).tolist()} are absent from "
                      "the reference sample and get validation weight 0", stacklevel=2)
    return weights


def _log_softmax_np(logits: np.ndarray, axis: int) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def evaluate_validation(net: Network, data: SceneData, batch_size: int = 8,
                        class_weights: Optional[np.ndarray] = None) -> tuple:
    """(loss, accuracy) of the micro head over the ground-truth pixels.

    Loss is the class-weighted mean micro cross-entropy over all validation
    pixels; accuracy is plain overall agreement of the argmax map.
    """
    total_nll = 0.0
    n_pix = 0
    n_correct = 0
    for start in range(0, data.val_patch_ids.size, batch_size):
        ids = data.val_patch_ids[start:start + batch_size]
        xs = np.stack([data.index.window(data.cube, int(i)) for i in ids])
        ys = np.stack([data.index.window(data.gt_labels, int(i)) for i in ids])
        with T.no_grad():
            logits = net.forward(xs)["micro"].data
        logp = _log_softmax_np(logits, axis=1)
        mask = ys != NODATA
        b, k, h, w = logits.shape
        if not mask.any():
            continue
        bi, yi, xi = np.nonzero(mask)
        targets = ys[mask].astype(np.int64)
        nll = -logp[bi, targets, yi, xi]
        if class_weights is not None:
            nll = nll * class_weights[targets]
        total_nll += float(nll.sum())
        n_pix += targets.size
        n_correct += int((logits[bi, :, yi, xi].argmax(axis=1) == targets).sum())
    if n_pix == 0:
        raise SplitError("validation sample is empty")
    return total_nll / n_pix, n_correct / n_pix


def weighted_validation_loss(net: Network, data: SceneData,
                             batch_size: int = 8) -> float:
    """Validation loss with inverse-frequency class weights derived from the
    ground-truth sample itself (rare classes count as much as common ones)."""
    cw = derive_class_weights(data.gt_labels, net.level_classes["micro"])
    loss, _ = evaluate_validation(net, data, batch_size, class_weights=cw)
    return loss


def _check_finite(loss_value: float, breakdown: dict, epoch: int, step: int):
    if math.isfinite(loss_value):
        return
    bad = [name for name, v in breakdown.items() if not math.isfinite(v)]
    raise NumericError(f"loss became non-finite at epoch {epoch} step {step}"
                       + (f" (term {bad[0]})" if bad else ""))


def train(net: Network, data: SceneData, config: TrainConfig) -> tuple:
    """Optimize `net` on `data` and return (net, history) with the weights of
    the best validation epoch restored. Stops once the validation loss has
    not improved by more than min_delta for `patience` consecutive epochs."""
    if net.taxonomy is None:
        raise UsageError("network has no taxonomy attached; build or load it with one")
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.parameters(), config.learning_rate, config.weight_decay)
    transitions = Transitions.build(net.taxonomy)
    n_train = data.index.ids("train").size
    steps = config.steps_per_epoch or max(1, math.ceil(n_train / config.batch_size))
    val_weights = None
    if config.val_weighting == "inverse-prior":
        val_weights = derive_class_weights(data.gt_labels, net.level_classes["micro"])

    history = TrainHistory()
    best_val = math.inf
    best_weights: Optional[dict] = None
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        tic = time.monotonic()
        loss_sum = 0.0
        term_sums = {t: 0.0 for t in _TERM_ORDER}
        for step in range(steps):
            ids = draw_patches(data.index, config.batch_size, rng)
            xs, ys = data.batch(ids)
            logits = net.forward(xs)
            loss, breakdown = total_loss(logits, ys, config.loss_weights,
                                         net.taxonomy, transitions, class_axis=1)
            _check_finite(float(loss.data), breakdown, epoch, step + 1)
            if loss.has_graph:
                opt.zero_grad()
                loss.backward()
                opt.step()
            loss_sum += float(loss.data)
            for name, v in breakdown.items():
                term_sums[name] += v
        val_loss, val_acc = evaluate_validation(net, data, config.batch_size,
                                                class_weights=val_weights)
        if not math.isfinite(val_loss):
            raise NumericError(f"validation loss became non-finite at epoch {epoch}")
        history.epochs.append(EpochStats(
            epoch=epoch,
            train_loss=loss_sum / steps,
            val_loss=val_loss,
            val_accuracy=val_acc,
            terms={t: term_sums[t] / steps for t in _TERM_ORDER},
            seconds=time.monotonic() - tic,
        ))
        if val_loss < best_val - config.min_delta:
            best_val = val_loss
            history.best_epoch = epoch
            best_weights = {name: arr.copy() for name, arr in net.weights().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_weights is not None:
        for name, p in net.params.items():
            p.data = best_weights[name]
    return net, history


def finetune(pretrained: Network, new_taxonomy: Taxonomy, data: SceneData,
             config: TrainConfig, warmup_iters: int = 20,
             penalties: bool = False) -> tuple:
    """Adapt a trained network to a new scene whose taxonomy extends the one
    it was trained on.

    Step 1 replaces the micro classifier to match the new class count (the
    rest of the network is reused bit-exactly). Step 2 trains only the new
    head for exactly `warmup_iters` optimizer steps of plain micro
    cross-entropy. Step 3 unfreezes everything and trains with micro
    cross-entropy, early-stopped on the class-weighted validation loss;
    coarse supervision, if any, enters only through the logit-reprojection
    penalties (`penalties=True`).
    """
    if warmup_iters < 0:
        raise ConfigError(f"warmup_iters must be >= 0, got {warmup_iters}")
    if pretrained.taxonomy is None:
        raise UsageError("pretrained network has no taxonomy attached")
    if not pretrained.taxonomy.embeds_into(new_taxonomy):
        raise TaxonomyError(
            "the new taxonomy does not extend the pretrained one: every "
            "pretrained micro class must keep its name and parents, coarse "
            "levels must match, and new micro classes must attach to "
            "existing parents")
    net = pretrained.prune_head("micro", new_taxonomy.n_classes("micro"),
                                seed=config.seed)
    net.taxonomy = new_taxonomy
    history = TrainHistory()

    if warmup_iters > 0:
        net.set_frozen("*", True)
        net.set_frozen("head.micro", False)
        rng = np.random.default_rng(config.seed)
        opt = Adam(net.parameters(), config.learning_rate, config.weight_decay)
        weights = LossWeights.micro_only()
        for it in range(warmup_iters):
            ids = draw_patches(data.index, config.batch_size, rng)
            xs, ys = data.batch(ids)
            logits = net.forward(xs)
            loss, breakdown = total_loss(logits, ys, weights, new_taxonomy,
                                         class_axis=1)
            _check_finite(float(loss.data), breakdown, 0, it + 1)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.warmup_losses.append(float(loss.data))
        net.set_frozen("*", False)

    lw = config.loss_weights
    micro_w = lw.cce_micro if lw.cce_micro > 0 else 1.0
    step3_weights = LossWeights(
        cce_macro=0.0, cce_intermediate=0.0, cce_micro=micro_w,
        penalty_micro_intermediate=lw.penalty_micro_intermediate if penalties else 0.0,
        penalty_intermediate_macro=0.0,
        penalty_micro_macro=lw.penalty_micro_macro if penalties else 0.0,
    )
    cfg3 = replace(config, loss_weights=step3_weights, val_weighting="inverse-prior")
    net, train_history = train(net, data, cfg3)
    train_history.warmup_losses = history.warmup_losses
    return net, train_history


def predict_map(net: Network, cube: np.ndarray, batch_size: int = 8,
                emit_probs: bool = False):
    """Classify a whole scene with all three heads.

    The cube is tiled into patch-size windows (edges reflected to fill the
    last row/column of tiles) and each head's argmax map is stitched back.
    Returns {level: (H,W) uint16 map}; with `emit_probs`, returns a second
    dict {level: (K,H,W) float32 softmax probabilities}.
    """
    cube = check_cube(cube)
    t, c, h, w = cube.shape
    if t != net.config.timesteps or c != net.config.channels:
        raise ConfigError(
            f"cube has T={t}, C={c} but the checkpoint was built for "
            f"T={net.config.timesteps}, C={net.config.channels}")
    ps = net.config.patch_size
    hp = math.ceil(h / ps) * ps
    wp = math.ceil(w / ps) * ps
    padded = np.pad(cube, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)), mode="reflect") \
        if (hp > h or wp > w) else cube
    tiles = [(r, cc) for r in range(0, hp, ps) for cc in range(0, wp, ps)]
    maps = {level: np.empty((hp, wp), dtype=np.uint16) for level in net.level_classes}
    probs = {level: np.empty((k, hp, wp), dtype=np.float32)
             for level, k in net.level_classes.items()} if emit_probs else None
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start:start + batch_size]
        xs = np.stack([padded[:, :, r:r + ps, cc:cc + ps] for r, cc in chunk])
        with T.no_grad():
            logits = net.forward(xs)
        for level, out in logits.items():
            arr = out.data
            pred = arr.argmax(axis=1).astype(np.uint16)
            for bi, (r, cc) in enumerate(chunk):
                maps[level][r:r + ps, cc:cc + ps] = pred[bi]
                if emit_probs:
                    ex = np.exp(arr[bi] - arr[bi].max(axis=0, keepdims=True))
                    probs[level][:, r:r + ps, cc:cc + ps] = ex / ex.sum(axis=0, keepdims=True)
    maps = {level: m[:h, :w] for level, m in maps.items()}
    if emit_probs:
        return maps, {level: p[:, :h, :w] for level, p in probs.items()}
    return maps
