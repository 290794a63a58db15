"""Seeded synthetic multitemporal scenes with a known class layout.

Each class occupies spatially coherent blobs (rank-thresholded smoothed
noise, so class areas match the requested priors almost exactly) and emits a
per-class temporal signature: a seasonal sinusoid on a base offset plus a
faster cosine pattern term, sampled per channel with a phase shift, plus
i.i.d. Gaussian pixel noise. Signatures are constructed so classes sharing a
macro group sit close together (offsets well apart across macro groups,
pattern phases apart within them), which gives the scenes a realistic
hierarchy: coarse classes are easy, fine classes are the hard part.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InputError, ParseError
from .hierarchy import Taxonomy
from .rasters import NODATA


@dataclass
class ClassSpec:
    name: str
    prior: float
    offset: float = 0.0
    amplitude: float = 1.0
    phase: float = 0.0
    pattern_amp: float = 1.0
    pattern_phase: float = 0.0
    pattern_freq: float = 2.0


@dataclass
class SceneSpec:
    timesteps: int = 12
    channels: int = 10
    height: int = 300
    width: int = 300
    noise_sigma: float = 0.5
    blob_scale: float = 12.0
    classes: list = field(default_factory=list)

    def validate(self):
        for name in ("timesteps", "channels", "height", "width"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InputError(f"scene {name} must be a positive integer, got {v!r}")
        if self.noise_sigma < 0:
            raise InputError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blob_scale <= 0:
            raise InputError(f"blob_scale must be positive, got {self.blob_scale}")
        if not self.classes:
            raise InputError("scene defines no classes")
        priors = np.array([c.prior for c in self.classes], dtype=np.float64)
        if (priors < 0).any() or abs(priors.sum() - 1.0) > 1e-6:
            raise InputError("class priors must be non-negative and sum to 1")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise InputError("duplicate class names in scene spec")

    def priors(self) -> np.ndarray:
        return np.array([c.prior for c in self.classes], dtype=np.float64)

    def signatures(self) -> np.ndarray:
        """Noise-free signature lookup table, shape (n_classes, T, C)."""
        t = np.arange(self.timesteps, dtype=np.float64) / self.timesteps
        c = np.arange(self.channels, dtype=np.float64) / self.channels
        tt, cc = np.meshgrid(t, c, indexing="ij")
        lut = np.empty((len(self.classes), self.timesteps, self.channels), dtype=np.float64)
        for i, cs in enumerate(self.classes):
            seasonal = cs.amplitude * np.sin(2 * math.pi * tt + cs.phase + 2 * math.pi * cc)
            pattern = cs.pattern_amp * np.cos(
                2 * math.pi * cs.pattern_freq * tt + cs.pattern_phase + 2 * math.pi * cc)
            lut[i] = cs.offset + seasonal + pattern
        return lut


_SCENE_KEYS = ("timesteps", "channels", "height", "width", "noise_sigma", "blob_scale")
_CLASS_FLOAT_KEYS = ("prior", "offset", "amplitude", "phase",
                     "pattern_amp", "pattern_phase", "pattern_freq")


def format_scene_config(spec: SceneSpec) -> str:
    out = io.StringIO()
    out.write("[scene]\n")
    for key in _SCENE_KEYS:
        out.write(f"{key} = {getattr(spec, key)}\n")
    for i, cs in enumerate(spec.classes):
        out.write(f"\n[class.{i}]\n")
        out.write(f"name = {cs.name}\n")
        for key in _CLASS_FLOAT_KEYS:
            out.write(f"{key} = {getattr(cs, key)!r}\n")
    return out.getvalue()


def parse_scene_config(text: str) -> SceneSpec:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError("expected a [scene] section header", line=exc.lineno)
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if getattr(exc, "errors", None) else None
        raise ParseError(f"malformed scene config: {exc.message.splitlines()[0]}", line=lineno)
    except configparser.Error as exc:
        raise ParseError(f"malformed scene config: {exc}")
    if "scene" not in parser:
        raise ParseError("missing [scene] section")
    spec = SceneSpec()
    for key in parser["scene"]:
        if key not in _SCENE_KEYS:
            raise ParseError(f"unknown [scene] key {key!r}")
        raw = parser["scene"][key]
        try:
            value = int(raw) if key in ("timesteps", "channels", "height", "width") else float(raw)
        except ValueError:
            raise ParseError(f"[scene] key {key!r} has a non-numeric value {raw!r}")
        setattr(spec, key, value)
    class_sections = [s for s in parser.sections() if s != "scene"]
    for s in class_sections:
        if not s.startswith("class."):
            raise ParseError(f"unexpected section [{s}]")
    expected = [f"class.{i}" for i in range(len(class_sections))]
    if sorted(class_sections, key=lambda s: (len(s), s)) != expected:
        raise ParseError(f"class sections must be contiguous class.0..class.{len(class_sections) - 1}")
    for i in range(len(class_sections)):
        section = parser[f"class.{i}"]
        if "name" not in section:
            raise ParseError(f"[class.{i}] is missing the name key")
        kwargs = {"name": section["name"]}
        for key in section:
            if key == "name":
                continue
            if key not in _CLASS_FLOAT_KEYS:
                raise ParseError(f"unknown [class.{i}] key {key!r}")
            try:
                kwargs[key] = float(section[key])
            except ValueError:
                raise ParseError(f"[class.{i}] key {key!r} has a non-numeric value")
        if "prior" not in kwargs:
            raise ParseError(f"[class.{i}] is missing the prior key")
        spec.classes.append(ClassSpec(**kwargs))
    spec.validate()
    return spec


def load_scene_config(path: str) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene_config(fh.read())


def save_scene_config(spec: SceneSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_scene_config(spec))


def default_scene_spec(taxonomy: Taxonomy, priors, timesteps: int = 12,
                       channels: int = 10, height: int = 300, width: int = 300,
                       noise_sigma: float = 0.5, blob_scale: float = 12.0,
                       macro_gap: float = 2.0, pattern_amp: float = 1.0) -> SceneSpec:
    """Scene spec whose signatures follow the taxonomy: macro groups are
    separated by `macro_gap` in offset (4 sigma at the defaults) and micro
    classes within a macro group by their pattern phase (at least 2 sigma
    apart at the defaults).

    `priors` is either a mapping from micro class name to prior or a sequence
    in micro id order.
    """
    names = taxonomy.names("micro")
    if isinstance(priors, dict):
        missing = [n for n in names if n not in priors]
        if missing:
            raise InputError(f"priors missing for micro classes: {missing}")
        prior_vec = [float(priors[n]) for n in names]
    else:
        prior_vec = [float(p) for p in priors]
        if len(prior_vec) != len(names):
            raise InputError(f"expected {len(names)} priors, got {len(prior_vec)}")
    macro_of = taxonomy.parent_map("micro", "macro")
    n_macro = taxonomy.n_classes("macro")
    classes = []
    for i, name in enumerate(names):
        m = int(macro_of[i])
        siblings = np.flatnonzero(macro_of == m)
        rank = int(np.flatnonzero(siblings == i)[0])
        classes.append(ClassSpec(
            name=name,
            prior=prior_vec[i],
            offset=m * macro_gap,
            amplitude=1.0,
            phase=2 * math.pi * m / n_macro,
            pattern_amp=pattern_amp,
            pattern_phase=2 * math.pi * rank / max(len(siblings), 1),
            pattern_freq=2.0 + (rank % 2),
        ))
    spec = SceneSpec(timesteps=timesteps, channels=channels, height=height,
                     width=width, noise_sigma=noise_sigma, blob_scale=blob_scale,
                     classes=classes)
    spec.validate()
    return spec


def _quotas(priors: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of `total` pixels to the priors."""
    exact = priors * total
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:short]] += 1
    return base


def synthesize_scene(spec: SceneSpec, seed: int):
    """Render (cube, labels) for a scene spec. Same seed, same bytes.

    Returns a float32 cube of shape (T, C, H, W) and a uint16 label raster of
    shape (H, W) with every pixel labeled.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    n = len(spec.classes)
    smooth = gaussian_filter(rng.standard_normal((h, w)), sigma=spec.blob_scale,
                             mode="reflect")
    order = rng.permutation(n)
    ranks = np.argsort(smooth, axis=None, kind="stable")
    quotas = _quotas(spec.priors(), h * w)
    labels = np.empty(h * w, dtype=np.uint16)
    pos = 0
    for cid in order:
        q = int(quotas[cid])
        labels[ranks[pos:pos + q]] = cid
        pos += q
    labels = labels.reshape(h, w)
    lut = spec.signatures().astype(np.float32)
    cube = np.ascontiguousarray(lut[labels.astype(np.int64)].transpose(2, 3, 0, 1))
    if spec.noise_sigma > 0:
        cube += spec.noise_sigma * rng.standard_normal(cube.shape, dtype=np.float32)
    return cube, labels


def sample_sparse_labels(labels: np.ndarray, per_class: int, seed: int) -> np.ndarray:
    """Sparse ground-truth raster: up to `per_class` random pixels per class
    keep their label, everything else becomes nodata. Mirrors a
    photointerpreted reference sample where rare classes are deliberately
    covered instead of sampled proportionally."""
    if per_class < 1:
        raise InputError(f"per_class must be positive, got {per_class}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    sparse = np.full(labels.shape, NODATA, dtype=np.uint16)
    flat = labels.reshape(-1)
    for cid in np.unique(flat):
        if cid == NODATA:
            continue
        idx = np.flatnonzero(flat == cid)
        take = rng.choice(idx, size=min(per_class, idx.size), replace=False)
        sparse.reshape(-1)[take] = cid
    return sparse
