"""Hierarchical temporal residual network.

A 3D-convolutional stem and three residual blocks shrink the temporal axis
(no padding in time, zero-padded in space, no pooling) while three branch
heads emit logit maps at increasing class detail: macro after block 1,
intermediate after block 2, micro after block 3. Skip connections carry a
temporal convolution so their output lines up with the block body.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .checkpoint import load_weights, save_weights
from .errors import ConfigError, FormatError, InputError, ShapeError, UsageError
from .hierarchy import LEVELS, Taxonomy
from . import tensor as T

_N_BLOCKS = 3  # one branch head per block


@dataclass(frozen=True)
class ModelConfig:
    timesteps: int = 12
    channels: int = 10
    patch_size: int = 30
    stem_filters: int = 32
    block_filters: tuple = (32, 64, 64)
    temporal_kernel: int = 3
    spatial_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "block_filters", tuple(self.block_filters))
        for name in ("timesteps", "channels", "patch_size", "stem_filters",
                     "temporal_kernel", "spatial_kernel"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if len(self.block_filters) != _N_BLOCKS:
            raise ConfigError(
                f"block_filters must list {_N_BLOCKS} block widths "
                f"(one head per block), got {self.block_filters}")
        if any(f < 1 for f in self.block_filters):
            raise ConfigError(f"block filter counts must be positive, got {self.block_filters}")
        if self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be odd to preserve extents, "
                              f"got {self.spatial_kernel}")
        self.temporal_schedule()  # raises when the budget runs out

    def temporal_schedule(self) -> list:
        """Timesteps remaining after the stem and after each block."""
        kt = self.temporal_kernel
        t = self.timesteps
        schedule = []
        for layer in ("stem",) + tuple(f"block{i + 1}" for i in range(_N_BLOCKS)):
            if t < kt:
                raise ConfigError(
                    f"temporal budget exhausted at {layer}: {t} timesteps remain "
                    f"but the temporal kernel needs {kt}")
            t = t - kt + 1
            schedule.append(t)
        return schedule


# attach point of each head: index into (stem, block1, block2, block3) outputs
_HEAD_STAGE = {"macro": 1, "intermediate": 2, "micro": 3}


def _layer_plan(config: ModelConfig, level_classes: dict) -> list:
    """Ordered (name, kernel_shape) pairs defining every weight tensor."""
    kt, ks = config.temporal_kernel, config.spatial_kernel
    plan = [("stem", (config.stem_filters, config.channels, kt, ks, ks))]
    widths = [config.stem_filters] + list(config.block_filters)
    for i in range(_N_BLOCKS):
        c_in, c_out = widths[i], widths[i + 1]
        plan.append((f"block{i + 1}.conv1", (c_out, c_in, kt, ks, ks)))
        plan.append((f"block{i + 1}.conv2", (c_out, c_out, 1, ks, ks)))
        plan.append((f"block{i + 1}.skip", (c_out, c_in, kt, 1, 1)))
    schedule = config.temporal_schedule()
    for level in LEVELS:
        stage = _HEAD_STAGE[level]
        width = config.block_filters[stage - 1]
        plan.append((f"head.{level}.collapse", (width, width, schedule[stage], 1, 1)))
        plan.append((f"head.{level}.classify", (level_classes[level], width, 1, 1)))
    return plan


def _init_conv(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    lim = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Network:
    """Parameter container plus the forward pass. Parameters live in a dict
    keyed by dotted names (``block2.conv1.weight``); freezing is a per-tensor
    flag toggled through :meth:`set_frozen`."""

    def __init__(self, config: ModelConfig, level_classes: dict,
                 params: dict, taxonomy: Optional[Taxonomy] = None):
        self.config = config
        self.level_classes = dict(level_classes)
        self.params = params
        self.taxonomy = taxonomy

    def parameters(self) -> list:
        return list(self.params.values())

    def weights(self) -> dict:
        """Name -> array view of every parameter, in creation order."""
        return {name: p.data for name, p in self.params.items()}

    def set_frozen(self, selector: str, frozen: bool) -> list:
        """Freeze or unfreeze parameters whose name matches `selector`
        (exact name, group prefix, or fnmatch pattern). Returns the names."""
        matched = [n for n in self.params
                   if n == selector or n.startswith(selector + ".")
                   or fnmatch.fnmatchcase(n, selector)]
        if not matched:
            raise UsageError(f"selector {selector!r} matches no parameters")
        for n in matched:
            self.params[n].frozen = frozen
        return matched

    def frozen_state(self) -> dict:
        return {n: p.frozen for n, p in self.params.items()}

    def _p(self, name: str) -> T.Parameter:
        return self.params[name]

    def _conv(self, x, layer: str) -> T.Tensor:
        out = T.conv3d(x, self._p(f"{layer}.weight"), name=layer)
        return T.add(out, self._p(f"{layer}.bias"))

    def _block(self, x, name: str) -> T.Tensor:
        body = T.relu(self._conv(x, f"{name}.conv1"))
        body = self._conv(body, f"{name}.conv2")
        skip = self._conv(x, f"{name}.skip")
        return T.relu(T.add(body, skip))

    def _head(self, feat, level: str) -> T.Tensor:
        h = T.relu(self._conv(feat, f"head.{level}.collapse"))
        logits = T.conv1x1(h, self._p(f"head.{level}.classify.weight"),
                           name=f"head.{level}.classify")
        logits = T.add(logits, self._p(f"head.{level}.classify.bias"))
        b, _, k, hh, ww = logits.shape
        return T.reshape(logits, (b, k, hh, ww))

    def forward(self, x) -> dict:
        """Run a batch through the trunk and all three heads.

        Accepts (B,T,C,H,W) or a single (T,C,H,W) sample; returns a dict of
        logit Tensors shaped (B, n_classes(level), H, W).
        """
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x))
        if x.ndim == 4:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 5:
            raise ShapeError(f"input must be (B,T,C,H,W) or (T,C,H,W), got {x.shape}")
        if x.shape[1] != self.config.timesteps or x.shape[2] != self.config.channels:
            raise ShapeError(
                f"input has T={x.shape[1]}, C={x.shape[2]}; the network was built "
                f"for T={self.config.timesteps}, C={self.config.channels}")
        t = T.relu(self._conv(x, "stem"))
        feats = []
        for i in range(_N_BLOCKS):
            t = self._block(t, f"block{i + 1}")
            feats.append(t)
        return {level: self._head(feats[_HEAD_STAGE[level] - 1], level) for level in LEVELS}

    def prune_head(self, level: str, n_classes: int, seed: int) -> "Network":
        """Replace the `level` classifier with a freshly initialized one of
        `n_classes` outputs. Every other parameter object is reused, so the
        rest of the network is preserved bit-exactly."""
        if level not in LEVELS:
            raise UsageError(f"unknown head {level!r}, expected one of {LEVELS}")
        if n_classes < 1:
            raise InputError(f"pruned head needs at least one class, got {n_classes}")
        rng = np.random.default_rng(seed)
        width = self.params[f"head.{level}.classify.weight"].data.shape[1]
        dtype = self.params[f"head.{level}.classify.weight"].data.dtype
        params = dict(self.params)
        wname, bname = f"head.{level}.classify.weight", f"head.{level}.classify.bias"
        params[wname] = T.Parameter(_init_conv(rng, (n_classes, width, 1, 1), dtype), wname)
        params[bname] = T.Parameter(np.zeros((n_classes, 1, 1), dtype=dtype), bname)
        counts = dict(self.level_classes)
        counts[level] = n_classes
        return Network(self.config, counts, params, taxonomy=self.taxonomy)

    def astype(self, dtype) -> "Network":
        """Deep-copied network with parameters cast to `dtype` (for gradient
        verification in float64). Frozen flags are preserved."""
        params = {}
        for name, p in self.params.items():
            q = T.Parameter(p.data.astype(dtype), name, frozen=p.frozen)
            params[name] = q
        return Network(self.config, self.level_classes, params, taxonomy=self.taxonomy)

    def load_state(self, weights: dict) -> None:
        """Copy arrays into existing parameters (shapes must match)."""
        for name, p in self.params.items():
            if name not in weights:
                raise FormatError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(weights[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise FormatError(
                    f"parameter {name!r} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.copy()
        extra = set(weights) - set(self.params)
        if extra:
            raise FormatError(f"checkpoint has unknown parameters: {sorted(extra)[:4]}")


def build_network(config: ModelConfig, taxonomy: Taxonomy, seed: int) -> Network:
    """Construct and initialize the network for a taxonomy. The same seed
    always yields bit-identical parameters."""
    rng = np.random.default_rng(seed)
    counts = {level: taxonomy.n_classes(level) for level in LEVELS}
    params: dict = {}
    for name, shape in _layer_plan(config, counts):
        wname, bname = f"{name}.weight", f"{name}.bias"
        params[wname] = T.Parameter(_init_conv(rng, shape, np.float32), wname)
        params[bname] = T.Parameter(np.zeros((shape[0], 1, 1), dtype=np.float32), bname)
    return Network(config, counts, params, taxonomy=taxonomy)


# --- persistence --------------------------------------------------------------

def _manifest_text(net: Network) -> str:
    cfg = net.config
    lines = [
        "format=htnw-manifest",
        "version=1",
        f"timesteps={cfg.timesteps}",
        f"channels={cfg.channels}",
        f"patch_size={cfg.patch_size}",
        f"stem_filters={cfg.stem_filters}",
        f"block_filters={','.join(str(f) for f in cfg.block_filters)}",
        f"temporal_kernel={cfg.temporal_kernel}",
        f"spatial_kernel={cfg.spatial_kernel}",
    ]
    for level in LEVELS:
        lines.append(f"classes_{level}={net.level_classes[level]}")
    if net.taxonomy is not None:
        lines.append(f"taxonomy_sha256={net.taxonomy.digest()}")
    return "\n".join(lines) + "\n"


def manifest_path(checkpoint_path: str) -> str:
    return checkpoint_path + ".manifest"


def save_network(net: Network, path: str) -> None:
    """Write weights to `path` (see checkpoint format) and a text manifest
    with the architecture dimensions and taxonomy hash to `path`.manifest."""
    save_weights(net.weights(), path)
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        fh.write(_manifest_text(net))


def _parse_manifest(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise FormatError(f"missing checkpoint manifest {path}")
    entries = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"malformed manifest line {line!r} in {path}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    if entries.get("format") != "htnw-manifest":
        raise FormatError(f"{path} is not a checkpoint manifest")
    return entries


def load_network(path: str, taxonomy: Optional[Taxonomy] = None) -> Network:
    """Rebuild a network from a checkpoint and its manifest. When a taxonomy
    is supplied its hash must match the one recorded at save time."""
    entries = _parse_manifest(manifest_path(path))
    try:
        config = ModelConfig(
            timesteps=int(entries["timesteps"]),
            channels=int(entries["channels"]),
            patch_size=int(entries["patch_size"]),
            stem_filters=int(entries["stem_filters"]),
            block_filters=tuple(int(f) for f in entries["block_filters"].split(",")),
            temporal_kernel=int(entries["temporal_kernel"]),
            spatial_kernel=int(entries["spatial_kernel"]),
        )
        counts = {level: int(entries[f"classes_{level}"]) for level in LEVELS}
    except KeyError as exc:
        raise FormatError(f"checkpoint manifest is missing key {exc.args[0]!r}")
    except ValueError as exc:
        raise FormatError(f"checkpoint manifest has a malformed value: {exc}")
    if taxonomy is not None:
        recorded = entries.get("taxonomy_sha256")
        if recorded is not None and recorded != taxonomy.digest():
            raise ConfigError(
                "taxonomy does not match the one the checkpoint was trained with "
                f"(hash {taxonomy.digest()[:12]} vs recorded {recorded[:12]})")
        for level in LEVELS:
            if taxonomy.n_classes(level) != counts[level]:
                raise ConfigError(
                    f"taxonomy has {taxonomy.n_classes(level)} {level} classes, "
                    f"checkpoint expects {counts[level]}")
    net = build_network(config, taxonomy, seed=0) if taxonomy is not None else None
    if net is None:
        params: dict = {}
        for name, shape in _layer_plan(config, counts):
            wname, bname = f"{name}.weight", f"{name}.bias"
            params[wname] = T.Parameter(np.zeros(shape, dtype=np.float32), wname)
            params[bname] = T.Parameter(np.zeros((shape[0], 1, 1), dtype=np.float32), bname)
        net = Network(config, counts, params, taxonomy=None)
    net.load_state(load_weights(path))
    return net
