"""Three-level class taxonomy, probability/logit projection, and the
hierarchy-aware training loss.

A taxonomy maps every micro class to one intermediate class and every
intermediate class to one macro class (a tree). Predictions over fine
classes are moved to a coarser level either by summing probabilities
through a transition matrix or by reprojecting logits directly in log
space, which keeps the operation usable inside a differentiable loss.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from .errors import (ConfigError, InputError, ParseError, ShapeError,
                     TaxonomyError, UsageError)
from .rasters import NODATA
from . import tensor as T

LEVELS = ("macro", "intermediate", "micro")


def _level_index(level: str) -> int:
    if level not in LEVELS:
        raise UsageError(f"unknown level {level!r}, expected one of {LEVELS}")
    return LEVELS.index(level)


class Taxonomy:
    """Immutable three-level class tree with dense ids per level."""

    def __init__(self, macro_names, intermediate_names, micro_names,
                 micro_parent, intermediate_parent):
        self._names = {
            "macro": tuple(macro_names),
            "intermediate": tuple(intermediate_names),
            "micro": tuple(micro_names),
        }
        self._micro_parent = np.asarray(micro_parent, dtype=np.int64)
        self._intermediate_parent = np.asarray(intermediate_parent, dtype=np.int64)
        self._validate()

    def _validate(self):
        for level, names in self._names.items():
            if not names:
                raise TaxonomyError(f"taxonomy has no {level} classes")
            if len(set(names)) != len(names):
                raise TaxonomyError(f"duplicate {level} class names")
        if self._micro_parent.shape != (self.n_classes("micro"),):
            raise TaxonomyError("micro parent map length mismatch")
        if self._intermediate_parent.shape != (self.n_classes("intermediate"),):
            raise TaxonomyError("intermediate parent map length mismatch")
        if (self._micro_parent.min() < 0
                or self._micro_parent.max() >= self.n_classes("intermediate")):
            raise TaxonomyError("micro parent id out of range")
        if (self._intermediate_parent.min() < 0
                or self._intermediate_parent.max() >= self.n_classes("macro")):
            raise TaxonomyError("intermediate parent id out of range")
        for j in range(self.n_classes("intermediate")):
            if not (self._micro_parent == j).any():
                raise TaxonomyError(
                    f"intermediate class {self._names['intermediate'][j]!r} has no micro children")
        for j in range(self.n_classes("macro")):
            if not (self._intermediate_parent == j).any():
                raise TaxonomyError(
                    f"macro class {self._names['macro'][j]!r} has no intermediate children")

    def n_classes(self, level: str) -> int:
        _level_index(level)
        return len(self._names[level])

    def names(self, level: str) -> tuple:
        _level_index(level)
        return self._names[level]

    def parent_map(self, from_level: str, to_level: str) -> np.ndarray:
        """Dense array mapping each `from_level` id to its `to_level` ancestor."""
        fi, ti = _level_index(from_level), _level_index(to_level)
        if fi == ti:
            return np.arange(self.n_classes(from_level), dtype=np.int64)
        if fi < ti:
            raise UsageError(f"{from_level} is not finer than {to_level}")
        if (from_level, to_level) == ("micro", "intermediate"):
            return self._micro_parent.copy()
        if (from_level, to_level) == ("intermediate", "macro"):
            return self._intermediate_parent.copy()
        return self._intermediate_parent[self._micro_parent]

    def canonical_text(self) -> str:
        """Stable textual form used for hashing and for writing .hcsv files."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        inter = self._names["intermediate"]
        macro = self._names["macro"]
        for mid, name in enumerate(self._names["micro"]):
            iid = int(self._micro_parent[mid])
            gid = int(self._intermediate_parent[iid])
            writer.writerow([mid, name, iid, inter[iid], gid, macro[gid]])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def drop_micro(self, names_to_drop) -> "Taxonomy":
        """Return a taxonomy without the given micro classes, re-densifying ids
        and pruning any ancestor left with no children."""
        drop = set(names_to_drop)
        unknown = drop - set(self._names["micro"])
        if unknown:
            raise TaxonomyError(f"cannot drop unknown micro classes: {sorted(unknown)}")
        keep = [i for i, n in enumerate(self._names["micro"]) if n not in drop]
        if not keep:
            raise TaxonomyError("cannot drop every micro class")
        kept_inter = sorted({int(self._micro_parent[i]) for i in keep})
        inter_remap = {old: new for new, old in enumerate(kept_inter)}
        kept_macro = sorted({int(self._intermediate_parent[j]) for j in kept_inter})
        macro_remap = {old: new for new, old in enumerate(kept_macro)}
        return Taxonomy(
            [self._names["macro"][j] for j in kept_macro],
            [self._names["intermediate"][j] for j in kept_inter],
            [self._names["micro"][i] for i in keep],
            [inter_remap[int(self._micro_parent[i])] for i in keep],
            [macro_remap[int(self._intermediate_parent[j])] for j in kept_inter],
        )

    def embeds_into(self, other: "Taxonomy") -> bool:
        """True when every micro class of self exists in `other` with the same
        named ancestors, and the coarse levels agree class-for-class."""
        if (self._names["macro"] != other._names["macro"]
                or self._names["intermediate"] != other._names["intermediate"]):
            return False
        other_micro = {n: i for i, n in enumerate(other._names["micro"])}
        for i, name in enumerate(self._names["micro"]):
            j = other_micro.get(name)
            if j is None:
                return False
            if int(self._micro_parent[i]) != int(other._micro_parent[j]):
                return False
        return True

    def __eq__(self, other):
        return isinstance(other, Taxonomy) and self.canonical_text() == other.canonical_text()

    def __repr__(self):
        counts = {lvl: self.n_classes(lvl) for lvl in LEVELS}
        return f"Taxonomy({counts})"


def flat_taxonomy(micro_names) -> Taxonomy:
    """Degenerate taxonomy where every level mirrors the micro classes."""
    names = list(micro_names)
    ids = list(range(len(names)))
    return Taxonomy(names, names, names, ids, ids)


def parse_taxonomy(text: str) -> Taxonomy:
    """Parse the hierarchy CSV: one row per micro class with the columns
    micro_id, micro_name, intermediate_id, intermediate_name, macro_id,
    macro_name. ``#`` starts a comment; blank lines are skipped."""
    micro_rows: dict[int, tuple] = {}
    inter_names: dict[int, str] = {}
    inter_parent: dict[int, int] = {}
    macro_names: dict[int, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            row = next(csv.reader([line]))
        except csv.Error as exc:
            raise ParseError(f"malformed CSV row: {exc}", line=lineno)
        if len(row) != 6:
            raise ParseError(f"expected 6 fields, got {len(row)}", line=lineno)
        row = [f.strip() for f in row]
        if any(not f for f in row):
            raise ParseError("empty field", line=lineno)
        try:
            mid, iid, gid = int(row[0]), int(row[2]), int(row[4])
        except ValueError:
            raise ParseError("class ids must be integers", line=lineno)
        if min(mid, iid, gid) < 0:
            raise ParseError("class ids must be non-negative", line=lineno)
        m_name, i_name, g_name = row[1], row[3], row[5]
        if mid in micro_rows:
            raise ParseError(f"duplicate micro id {mid}", line=lineno)
        for store, key, name, what in ((inter_names, iid, i_name, "intermediate"),
                                       (macro_names, gid, g_name, "macro")):
            if key in store and store[key] != name:
                raise ParseError(
                    f"{what} id {key} reused with conflicting name "
                    f"{name!r} (was {store[key]!r})", line=lineno)
            store[key] = name
        if iid in inter_parent and inter_parent[iid] != gid:
            raise ParseError(
                f"intermediate id {iid} mapped to two macro ids "
                f"({inter_parent[iid]} and {gid}); the hierarchy must be a tree", line=lineno)
        inter_parent[iid] = gid
        micro_rows[mid] = (m_name, iid, lineno)
    if not micro_rows:
        raise ParseError("no class rows found", line=1)

    def dense(ids):
        return {orig: new for new, orig in enumerate(sorted(ids))}

    micro_order = sorted(micro_rows)
    inter_order = dense(inter_names)
    macro_order = dense(macro_names)
    for level, store in (("micro", {i: micro_rows[i][0] for i in micro_order}),
                         ("intermediate", inter_names), ("macro", macro_names)):
        names = list(store.values())
        if len(set(names)) != len(names):
            seen, dup = set(), None
            for n in names:
                if n in seen:
                    dup = n
                    break
                seen.add(n)
            raise ParseError(f"duplicate {level} class name {dup!r}", line=1)
    try:
        return Taxonomy(
            [macro_names[g] for g in sorted(macro_names)],
            [inter_names[i] for i in sorted(inter_names)],
            [micro_rows[m][0] for m in micro_order],
            [inter_order[micro_rows[m][1]] for m in micro_order],
            [macro_order[inter_parent[i]] for i in sorted(inter_names)],
        )
    except TaxonomyError as exc:
        raise ParseError(str(exc), line=1)


def load_taxonomy(path: str) -> Taxonomy:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_taxonomy(fh.read())


def save_taxonomy(tax: Taxonomy, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# micro_id,micro_name,intermediate_id,intermediate_name,macro_id,macro_name\n")
        fh.write(tax.canonical_text())


# --- transition matrices -----------------------------------------------------

@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic map from fine classes (rows) to coarse classes (cols)."""
    from_level: str
    to_level: str
    matrix: np.ndarray

    @staticmethod
    def from_indicator(indicator: np.ndarray, from_level: str = "micro",
                       to_level: str = "macro") -> "TransitionMatrix":
        ind = np.asarray(indicator, dtype=np.float64)
        if ind.ndim != 2:
            raise ShapeError(f"indicator must be 2D, got shape {ind.shape}")
        if (ind < 0).any():
            raise InputError("indicator entries must be non-negative")
        col_sums = ind.sum(axis=0)
        if (col_sums == 0).any():
            bad = int(np.argmax(col_sums == 0))
            raise TaxonomyError(f"coarse class {bad} has no fine children (all-zero column)")
        row_sums = ind.sum(axis=1, keepdims=True)
        if (row_sums == 0).any():
            bad = int(np.argmax(row_sums.ravel() == 0))
            raise TaxonomyError(f"fine class {bad} belongs to no coarse class (all-zero row)")
        return TransitionMatrix(from_level, to_level, ind / row_sums)


def build_transition(tax: Taxonomy, from_level: str, to_level: str) -> TransitionMatrix:
    """One-hot transition matrix from a finer level to a coarser one."""
    fi, ti = _level_index(from_level), _level_index(to_level)
    if fi == ti:
        raise UsageError("from_level and to_level must differ")
    if fi < ti:
        raise UsageError(f"{from_level} is coarser than {to_level}; transitions go fine to coarse")
    parents = tax.parent_map(from_level, to_level)
    ind = np.zeros((tax.n_classes(from_level), tax.n_classes(to_level)), dtype=np.float64)
    ind[np.arange(parents.size), parents] = 1.0
    return TransitionMatrix.from_indicator(ind, from_level, to_level)


def project_probabilities(probs: np.ndarray, tm: TransitionMatrix,
                          tol: float = 1e-5) -> np.ndarray:
    """Sum fine-class probabilities into coarse classes along the last axis."""
    probs = np.asarray(probs, dtype=np.float64)
    n_from = tm.matrix.shape[0]
    if probs.shape[-1] != n_from:
        raise ShapeError(f"expected {n_from} fine-class probabilities, got {probs.shape[-1]}")
    sums = probs.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=tol):
        raise InputError("probabilities must sum to 1 along the class axis")
    if (probs < -tol).any():
        raise InputError("probabilities must be non-negative")
    return probs @ tm.matrix


def reproject_logits(z: "T.Tensor", tm: TransitionMatrix, axis: int = 0) -> "T.Tensor":
    """Map fine-class logits to coarse-class logits in log space.

    For coarse class j: out_j = log sum_i exp(z_i + log Tt_ji) - logsumexp(z),
    with Tt the transposed transition matrix. Zero transition entries
    contribute exactly nothing (log 0 -> -inf). softmax(out) equals the
    projected softmax(z), so the result feeds directly into cross-entropy.
    """
    if not isinstance(z, T.Tensor):
        z = T.Tensor(np.asarray(z))
    axis = axis % z.ndim
    n_from, n_to = tm.matrix.shape
    if z.shape[axis] != n_from:
        raise ShapeError(f"logit axis has {z.shape[axis]} classes, transition expects {n_from}")
    with np.errstate(divide="ignore"):
        log_t = np.log(tm.matrix.T).astype(z.dtype)  # (n_to, n_from)
    trailing = z.ndim - axis - 1
    log_t = log_t.reshape((n_to, n_from) + (1,) * trailing)
    z_exp = T.reshape(z, z.shape[:axis] + (1,) + z.shape[axis:])
    num = T.logsumexp(T.add(z_exp, T.Tensor(log_t)), axis=axis + 1)
    den = T.logsumexp(z, axis=axis, keepdims=True)
    return T.add(num, T.mul(den, T.Tensor(np.asarray(-1.0, dtype=z.dtype))))


def penalty_nll(z_fine: "T.Tensor", tm: TransitionMatrix, coarse_targets: np.ndarray,
                axis: int = 0, ignore_index: int = NODATA) -> "T.Tensor":
    """Negative log-likelihood of coarse targets under reprojected fine logits."""
    return T.cross_entropy(reproject_logits(z_fine, tm, axis=axis), coarse_targets,
                           axis=axis, ignore_index=ignore_index)


def aggregate_labels(labels: np.ndarray, tax: Taxonomy, to_level: str) -> np.ndarray:
    """Replace micro ids with their `to_level` ancestor ids; nodata passes through."""
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be an integer array")
    valid = labels != NODATA
    if valid.any():
        vmax, vmin = int(labels[valid].max()), int(labels[valid].min())
        if vmin < 0 or vmax >= tax.n_classes("micro"):
            raise InputError(
                f"label id {vmax if vmax >= tax.n_classes('micro') else vmin} "
                f"outside the {tax.n_classes('micro')} micro classes")
    lut = tax.parent_map("micro", to_level).astype(np.uint16)
    out = np.full(labels.shape, NODATA, dtype=np.uint16)
    out[valid] = lut[labels[valid].astype(np.int64)]
    return out


# --- training loss -----------------------------------------------------------

@dataclass
class LossWeights:
    """Non-negative weights for the three CCE terms and three penalties."""
    cce_macro: float = 1.0
    cce_intermediate: float = 1.0
    cce_micro: float = 1.0
    penalty_micro_intermediate: float = 1.0
    penalty_intermediate_macro: float = 1.0
    penalty_micro_macro: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    @classmethod
    def micro_only(cls) -> "LossWeights":
        return cls(0.0, 0.0, 1.0, 0.0, 0.0, 0.0)

    @classmethod
    def cce_only(cls) -> "LossWeights":
        return cls(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)

    def with_penalties(self, value: float) -> "LossWeights":
        return replace(self, penalty_micro_intermediate=value,
                       penalty_intermediate_macro=value, penalty_micro_macro=value)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Transitions:
    """Cached transition matrices for one taxonomy."""
    micro_intermediate: TransitionMatrix
    intermediate_macro: TransitionMatrix
    micro_macro: TransitionMatrix

    @staticmethod
    def build(tax: Taxonomy) -> "Transitions":
        return Transitions(
            build_transition(tax, "micro", "intermediate"),
            build_transition(tax, "intermediate", "macro"),
            build_transition(tax, "micro", "macro"),
        )


def total_loss(logits: dict, micro_targets: np.ndarray, weights: LossWeights,
               tax: Taxonomy, transitions: Optional[Transitions] = None,
               class_axis: int = 1, ignore_index: int = NODATA,
               micro_class_weights: Optional[np.ndarray] = None):
    """Weighted sum of per-level cross-entropies plus consistency penalties.

    `logits` maps level name to a logit Tensor with classes on `class_axis`;
    only levels used by enabled (weight > 0) terms must be present. Targets
    at coarse levels are derived from the micro targets through the taxonomy.
    Returns (loss Tensor, breakdown dict of weighted term values).
    """
    w = weights
    targets = {"micro": np.asarray(micro_targets)}

    def target(level):
        if level not in targets:
            targets[level] = aggregate_labels(targets["micro"], tax, level)
        return targets[level]

    def logit(level, term):
        if level not in logits or logits[level] is None:
            raise ConfigError(f"loss term {term} is enabled but no {level} logits were given")
        return logits[level]

    if transitions is None and (w.penalty_micro_intermediate > 0
                                or w.penalty_intermediate_macro > 0
                                or w.penalty_micro_macro > 0):
        transitions = Transitions.build(tax)

    terms: list[tuple[str, float, "T.Tensor"]] = []
    for level, wt in (("macro", w.cce_macro), ("intermediate", w.cce_intermediate),
                      ("micro", w.cce_micro)):
        if wt > 0:
            cw = micro_class_weights if level == "micro" else None
            terms.append((f"cce_{level}", wt,
                          T.cross_entropy(logit(level, f"cce_{level}"), target(level),
                                          axis=class_axis, ignore_index=ignore_index,
                                          class_weights=cw)))
    penalty_specs = (
        ("penalty_micro_intermediate", w.penalty_micro_intermediate, "micro",
         lambda: transitions.micro_intermediate, "intermediate"),
        ("penalty_intermediate_macro", w.penalty_intermediate_macro, "intermediate",
         lambda: transitions.intermediate_macro, "macro"),
        ("penalty_micro_macro", w.penalty_micro_macro, "micro",
         lambda: transitions.micro_macro, "macro"),
    )
    for name, wt, src_level, tm_fn, dst_level in penalty_specs:
        if wt > 0:
            terms.append((name, wt,
                          penalty_nll(logit(src_level, name), tm_fn(), target(dst_level),
                                      axis=class_axis, ignore_index=ignore_index)))

    breakdown: dict[str, float] = {}
    loss: Optional["T.Tensor"] = None
    for name, wt, term in terms:
        weighted = T.mul(term, T.Tensor(np.asarray(wt, dtype=term.dtype)))
        breakdown[name] = float(weighted.data)
        loss = weighted if loss is None else T.add(loss, weighted)
    if loss is None:
        return T.Tensor(np.asarray(0.0, dtype=np.float32)), breakdown
    return loss, breakdown
