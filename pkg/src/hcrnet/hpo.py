"""Sequential hyperparameter search with a Tree-structured Parzen Estimator.

Trials are split at the gamma quantile of the objective (maximized) into a
good and a bad set; each numeric dimension gets a kernel-density estimate of
both sets in its native scale (log scale for log-uniform dimensions), and
candidates drawn from the good density are ranked by the density ratio
l(x)/g(x). The first trials are drawn from the prior until enough results
exist to fit the densities.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, FormatError, NumericError, UsageError


@dataclass(frozen=True)
class Dimension:
    kind: str                    # "uniform" | "log-uniform"
    low: float
    high: float

    def __post_init__(self):
        if self.kind not in ("uniform", "log-uniform"):
            raise ConfigError(f"unknown dimension kind {self.kind!r}")
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise ConfigError("dimension bounds must be finite")
        if self.low >= self.high:
            raise ConfigError(f"dimension bounds must satisfy low < high, "
                              f"got [{self.low}, {self.high}]")
        if self.kind == "log-uniform" and self.low <= 0:
            raise ConfigError(f"log-uniform bounds must be positive, got low={self.low}")

    def to_native(self, x: float) -> float:
        return math.log(x) if self.kind == "log-uniform" else x

    def from_native(self, u: float) -> float:
        # exp(log(low)) can undershoot low by one ulp; clamp back into range
        v = math.exp(u) if self.kind == "log-uniform" else u
        return min(max(v, self.low), self.high)

    def sample(self, rng: np.random.Generator) -> float:
        u = rng.uniform(self.to_native(self.low), self.to_native(self.high))
        return self.from_native(u)


def uniform(low: float, high: float) -> Dimension:
    return Dimension("uniform", low, high)


def log_uniform(low: float, high: float) -> Dimension:
    return Dimension("log-uniform", low, high)


class SearchSpace:
    """Ordered mapping from parameter name to a :class:`Dimension`."""

    def __init__(self, dimensions: dict):
        if not dimensions:
            raise ConfigError("search space must define at least one dimension")
        for name, dim in dimensions.items():
            if not isinstance(dim, Dimension):
                raise ConfigError(f"dimension {name!r} is not a Dimension")
        self.dimensions = dict(dimensions)

    def names(self) -> list:
        return list(self.dimensions)

    def validate_params(self, params: dict):
        if set(params) != set(self.dimensions):
            raise UsageError(f"params {sorted(params)} do not match the "
                             f"search space {sorted(self.dimensions)}")
        for name, dim in self.dimensions.items():
            v = params[name]
            if not (dim.low <= v <= dim.high):
                raise UsageError(f"param {name}={v} outside [{dim.low}, {dim.high}]")


@dataclass
class Trial:
    number: int
    params: dict
    objective: Optional[float] = None
    status: str = "completed"     # "completed" | "failed"


def sample_prior(space: SearchSpace, rng: np.random.Generator) -> dict:
    return {name: dim.sample(rng) for name, dim in space.dimensions.items()}


class _Kde:
    """1D Gaussian mixture over the observed points plus one range-wide prior
    component at mid-range. The point bandwidth is Scott's rule floored at
    range/min(100, n): a tighter floor lets the estimate collapse onto the
    incumbent before the neighbourhood is mapped and the search stalls there."""

    def __init__(self, points: np.ndarray, native_low: float, native_high: float):
        pts = np.asarray(points, dtype=np.float64)
        extent = native_high - native_low
        n = pts.size
        spread = float(pts.std(ddof=0)) if n > 1 else 0.0
        scott = spread * n ** (-0.2) if spread > 0 else 0.0
        bw = max(scott, extent / min(100, max(n, 1)))
        self.centers = np.append(pts, 0.5 * (native_low + native_high))
        self.widths = np.append(np.full(n, bw), extent)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.integers(0, self.centers.size, size=size)
        return self.centers[idx] + rng.normal(0.0, 1.0, size=size) * self.widths[idx]

    def log_density(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
        z = (xs[:, None] - self.centers[None, :]) / self.widths[None, :]
        logk = -0.5 * z * z - np.log(self.widths[None, :] * math.sqrt(2 * math.pi))
        m = logk.max(axis=1, keepdims=True)
        return (m.ravel() + np.log(np.exp(logk - m).sum(axis=1))
                - math.log(self.centers.size))


def tpe_suggest(trials: list, space: SearchSpace, rng: np.random.Generator,
                gamma: float = 0.25, n_startup: int = 5,
                n_candidates: int = 24) -> dict:
    """Propose the next parameter vector.

    Completed trials are ranked by objective (higher is better; ties broken
    toward the more recent trial) and split at the `gamma` quantile. Before
    `n_startup` completed trials exist the prior is sampled instead.
    """
    done = [t for t in trials if t.status == "completed" and t.objective is not None]
    if len(done) < n_startup:
        return sample_prior(space, rng)
    ranked = sorted(done, key=lambda t: (t.objective, t.number), reverse=True)
    n_good = max(1, math.ceil(gamma * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:]
    if not bad:
        return sample_prior(space, rng)

    names = space.names()
    cand_native = np.empty((n_candidates, len(names)))
    scores = np.zeros(n_candidates)
    for d, name in enumerate(names):
        dim = space.dimensions[name]
        lo, hi = dim.to_native(dim.low), dim.to_native(dim.high)
        good_pts = np.array([dim.to_native(t.params[name]) for t in good])
        bad_pts = np.array([dim.to_native(t.params[name]) for t in bad])
        l_kde = _Kde(good_pts, lo, hi)
        g_kde = _Kde(bad_pts, lo, hi)
        xs = np.clip(l_kde.sample(rng, n_candidates), lo, hi)
        cand_native[:, d] = xs
        scores += l_kde.log_density(xs) - g_kde.log_density(xs)
    best = int(np.argmax(scores))
    return {name: space.dimensions[name].from_native(float(cand_native[best, d]))
            for d, name in enumerate(names)}


# --- trials log ----------------------------------------------------------------

def _log_header(space: SearchSpace) -> list:
    return ["trial"] + [f"param:{n}" for n in space.names()] + ["objective", "status"]


def _trial_row(trial: Trial, space: SearchSpace) -> list:
    row = [str(trial.number)]
    row += [repr(trial.params[n]) for n in space.names()]
    row.append("" if trial.objective is None else repr(trial.objective))
    row.append(trial.status)
    return row


def load_trials(path: str, space: SearchSpace) -> list:
    """Read a trials log written by :func:`run_search` for the same space."""
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    if rows[0] != _log_header(space):
        raise FormatError(f"trials log {path} does not match the search space "
                          f"(header {rows[0]!r})")
    trials = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise FormatError(f"trials log {path} line {i} has {len(row)} fields")
        try:
            number = int(row[0])
            params = {n: float(row[1 + d]) for d, n in enumerate(space.names())}
            objective = float(row[-2]) if row[-2] else None
            status = row[-1]
        except ValueError as exc:
            raise FormatError(f"trials log {path} line {i}: {exc}")
        if status not in ("completed", "failed"):
            raise FormatError(f"trials log {path} line {i}: unknown status {status!r}")
        trials.append(Trial(number, params, objective, status))
    if [t.number for t in trials] != list(range(len(trials))):
        raise FormatError(f"trials log {path} has non-contiguous trial numbers")
    return trials


def run_search(objective: Callable[[dict], float], space: SearchSpace,
               budget: int, seed: int, log_path: Optional[str] = None,
               gamma: float = 0.25, n_startup: int = 5,
               n_candidates: int = 24) -> tuple:
    """Run `budget` trials and return (best completed Trial, all trials).

    An objective that raises marks its trial failed and the search moves on.
    With `log_path`, every finished trial is appended to a CSV log; an
    existing log for the same space is picked up and the search resumes
    until `budget` total trials exist.
    """
    if budget < 1:
        raise ConfigError(f"budget must be positive, got {budget}")
    rng = np.random.default_rng(seed)
    trials: list = []
    if log_path and os.path.exists(log_path):
        trials = load_trials(log_path, space)
    log_fh = None
    if log_path:
        new_file = not os.path.exists(log_path) or os.path.getsize(log_path) == 0
        log_fh = open(log_path, "a", encoding="utf-8", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        if new_file:
            writer.writerow(_log_header(space))
            log_fh.flush()
    try:
        for number in range(len(trials), budget):
            params = tpe_suggest(trials, space, rng, gamma=gamma,
                                 n_startup=n_startup, n_candidates=n_candidates)
            space.validate_params(params)
            try:
                value = float(objective(params))
                trial = Trial(number, params, value, "completed") \
                    if math.isfinite(value) else Trial(number, params, None, "failed")
            except Exception:
                trial = Trial(number, params, None, "failed")
            trials.append(trial)
            if log_fh is not None:
                writer.writerow(_trial_row(trial, space))
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    completed = [t for t in trials if t.status == "completed"]
    if not completed:
        raise NumericError("every trial failed; no best parameters to report")
    best = max(completed, key=lambda t: (t.objective, -t.number))
    return best, trials
