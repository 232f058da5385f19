"""Frequency estimation by Gaussian kernel density over k-NN distances.

The estimate for a token is ``kappa = sum_i exp(-beta * d_i**2)`` over its
k nearest neighbours. Its log, clamped below at 0, is compared with the
log of the true type count.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateCorrelationError, ValidationError
from .gd_embed import DISTANCES, EmbeddingSet
from .knn import KnnGraph

log = logging.getLogger(__name__)

GRID_POINTS = 49
GRID_SPAN = 1e3


@dataclass(frozen=True)
class DensityConfig:
    """``beta_grid`` holds multipliers of 1 / median(d**2); ``None`` selects the
    two-anchor grid built by ``beta_grid``."""
    k: int = 2000
    beta_grid: tuple | None = None
    distance: str = "cosine"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.beta_grid is not None:
            grid = tuple(float(b) for b in self.beta_grid)
            if not grid or any(not (b > 0 and math.isfinite(b)) for b in grid):
                raise ConfigError("beta_grid must be a non-empty list of positive reals")
            object.__setattr__(self, "beta_grid", grid)
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown distance {self.distance!r}")


@dataclass
class BetaChoice:
    beta: float
    log_variance: float
    betas: np.ndarray
    variances: np.ndarray
    degenerate: bool = False


@dataclass
class FreqReport:
    estimates: dict
    chosen_beta: float
    log_variance: float
    k: int
    clamped: bool
    config: DensityConfig
    r_squared: float | None = None
    truth: dict | None = None
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        cfg = asdict(self.config)
        if cfg["beta_grid"] is not None:
            cfg["beta_grid"] = list(cfg["beta_grid"])
        return {"chosen_beta": self.chosen_beta, "log_variance": self.log_variance,
                "r_squared": self.r_squared, "k": self.k, "clamped": self.clamped,
                "config": cfg, "notes": self.notes}

    def write(self, directory, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        payload = self.to_json()
        if extra:
            payload.update(extra)
        with open(directory / "freq.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(directory / "freq.tsv", "w", encoding="utf-8", newline="") as fh:
            fh.write("id\tkappa\tlog_kappa\ttrue_count\n")
            for i, kappa in self.estimates.items():
                true = "" if self.truth is None else str(self.truth[i])
                fh.write(f"{i}\t{kappa!r}\t{log_estimate(kappa)!r}\t{true}\n")


def density_estimate(dists, beta: float) -> float:
    d = np.asarray(dists, dtype=np.float64)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValidationError("distances must be finite and non-negative")
    if not beta > 0:
        raise ValidationError("beta must be positive")
    return float(np.sum(np.exp(-beta * d * d)))


def log_estimate(kappa):
    """ln(max(kappa, 1)), in [0, ln k]."""
    return np.log(np.maximum(kappa, 1.0)) if isinstance(kappa, np.ndarray) else math.log(max(kappa, 1.0))


def effective_k(k: int, n_index: int, self_exclude: bool) -> tuple[int, bool]:
    """Clamp k to the available neighbours; the flag reports whether it changed."""
    limit = n_index - 1 if self_exclude else n_index
    if k > limit:
        log.warning("k=%d exceeds the %d available neighbours; clamped", k, limit)
        return max(limit, 1), True
    return k, False


def _squared(D: np.ndarray) -> np.ndarray:
    # missing neighbours (NaN pads) become infinitely far and contribute 0
    d2 = D * D
    d2[np.isnan(d2)] = np.inf
    return d2


def _kappas(d2: np.ndarray, beta: float) -> np.ndarray:
    return np.exp(-beta * d2).sum(axis=1)


def estimate_all(graph: KnnGraph, beta: float, k: int | None = None) -> dict:
    if k is not None and graph.k != k:
        raise ValidationError(f"graph built with k={graph.k}, configuration expects k={k}")
    if not beta > 0:
        raise ValidationError("beta must be positive")
    kappa = _kappas(_squared(graph.distance_matrix()), beta)
    return dict(zip(graph.query_ids, kappa.tolist()))


def _positive_median(v: np.ndarray) -> float:
    v = v[np.isfinite(v) & (v > 0)]
    return float(np.median(v)) if v.size else 1.0


def beta_grid(graph: KnnGraph, cfg: DensityConfig) -> np.ndarray:
    """Absolute betas to try, ascending.

    The default grid runs log-uniformly from ``1e-3 / median(d**2)`` over all
    graph distances, where nearly every kernel term is 1, to
    ``1e3 / median(d_1**2)`` over first-neighbour distances, where nearly
    every term vanishes. Explicit multipliers are scaled by
    ``1 / median(d**2)``.
    """
    d2 = graph.distance_matrix() ** 2
    med_all = _positive_median(d2.ravel())
    if cfg.beta_grid is not None:
        return np.sort(np.asarray(cfg.beta_grid)) / med_all
    lo = 1.0 / (GRID_SPAN * med_all)
    hi = GRID_SPAN / _positive_median(d2[:, 0]) if d2.shape[1] else lo * GRID_SPAN ** 2
    hi = max(hi, lo * GRID_SPAN ** 2)
    return np.logspace(math.log10(lo), math.log10(hi), GRID_POINTS)


def tune_beta(graph: KnnGraph, cfg: DensityConfig = DensityConfig()) -> BetaChoice:
    """Grid beta maximising the population variance of the log estimates.

    Ties go to the smaller beta. A graph on which no beta spreads the
    estimates returns the smallest grid value flagged as degenerate.
    """
    d2 = _squared(graph.distance_matrix())
    betas = beta_grid(graph, cfg)
    variances = np.array([np.var(log_estimate(_kappas(d2, b))) for b in betas])
    best = int(np.argmax(variances))
    degenerate = not variances[best] > 1e-12
    if degenerate:
        log.warning("log estimates have no spread for any beta; returning the smallest grid value")
        best = 0
    return BetaChoice(float(betas[best]), float(variances[best]), betas, variances, degenerate)


def r_squared_log(estimates: Mapping[str, float], truth: Mapping[str, int]) -> float:
    """Squared Pearson correlation between log estimates and log true counts."""
    if set(estimates) != set(truth):
        missing = sorted(set(estimates) ^ set(truth))[:5]
        raise ValidationError(f"estimate and truth ids differ, e.g. {missing}")
    ids = sorted(estimates)
    t = np.array([truth[i] for i in ids], dtype=np.float64)
    if np.any(t < 1):
        raise ValidationError("true counts must be >= 1")
    x = log_estimate(np.array([estimates[i] for i in ids], dtype=np.float64))
    return squared_pearson(x, np.log(t), ("log estimate", "log true count"))


def squared_pearson(x, y, names=("x", "y")) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    for name, s, v in ((names[0], sxx, x), (names[1], syy, y)):
        if s <= 0 or np.ptp(v) == 0:
            raise DegenerateCorrelationError(f"{name} is constant; correlation undefined")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, r * r)


def estimate_frequencies(graph: KnnGraph, cfg: DensityConfig, truth: Mapping[str, int] | None = None,
                         tune_graph: KnnGraph | None = None, clamped: bool = False) -> FreqReport:
    """Tune beta (on ``tune_graph`` if given), estimate, and optionally score."""
    choice = tune_beta(tune_graph or graph, cfg)
    est = estimate_all(graph, choice.beta)
    notes = ["log estimates clamped below at 1 before taking logs"]
    if choice.degenerate:
        notes.append("degenerate graph: beta fixed to the smallest grid value")
    r2 = None
    if truth is not None:
        sub = {i: truth[i] for i in est}
        r2 = r_squared_log(est, sub)
        truth = sub
    return FreqReport(est, choice.beta, choice.log_variance, graph.k, clamped, cfg, r2, truth, notes)


# -- K-means baseline ------------------------------------------------------------

def _sq_dists(X, C, xsq):
    csq = np.einsum("ij,ij->i", C, C)
    d2 = xsq[:, None] + csq[None, :] - 2.0 * (X @ C.T)
    return np.maximum(d2, 0.0)


def kmeans_plusplus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    xsq = np.einsum("ij,ij->i", X, X)
    centers = np.empty((K, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    closest = _sq_dists(X, centers[:1], xsq)[:, 0]
    for c in range(1, K):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        np.minimum(closest, _sq_dists(X, centers[c:c + 1], xsq)[:, 0], out=closest)
    return centers


def lloyd(X: np.ndarray, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4):
    """K-means with k-means++ seeding. Returns (labels, centers, inertia, iterations).

    An emptied cluster is re-seeded at the point farthest from its centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ConfigError(f"K must be in [1, {n}], got {K}")
    rng = np.random.default_rng(seed)
    xsq = np.einsum("ij,ij->i", X, X)
    C = kmeans_plusplus(X, K, rng)
    prev = None
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, C, xsq)
        labels = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), labels]
        inertia = float(point_d2.sum())
        counts = np.bincount(labels, minlength=K)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            far = np.argsort(-point_d2, kind="stable")
            taken = set()
            for c, p in zip(empty, (p for p in far if p not in taken)):
                labels[p] = c
                taken.add(p)
            counts = np.bincount(labels, minlength=K)
        order = np.argsort(labels, kind="stable")
        starts = np.r_[0, np.cumsum(counts)[:-1]]
        sums = np.add.reduceat(X[order], starts, axis=0)
        C = sums / counts[:, None]
        if prev is not None and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    d2 = _sq_dists(X, C, xsq)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    return labels, C, inertia, it


def kmeans_frequency_baseline(emb: EmbeddingSet, K: int, seed: int = 0, max_iter: int = 100,
                              tol: float = 1e-4) -> dict:
    """Estimate each token's frequency as the size of its K-means cluster."""
    if K > len(emb):
        raise ConfigError(f"K={K} exceeds the {len(emb)} embeddings")
    labels, *_ = lloyd(emb.vectors, K, seed, max_iter, tol)
    sizes = np.bincount(labels, minlength=K)
    return dict(zip(emb.ids, sizes[labels].astype(float).tolist()))


def truth_counts(emb: EmbeddingSet, reference: Sequence | None = None) -> dict:
    """True count of each item's transcription in ``reference`` (default: the set itself)."""
    ref = emb.labels if reference is None else list(reference)
    counts: dict = {}
    for t in ref:
        if t is None:
            raise ValidationError("reference contains unlabeled items")
        counts[t] = counts.get(t, 0) + 1
    out = {}
    for i, t in zip(emb.ids, emb.labels):
        if t is None:
            raise ValidationError(f"item {i} is unlabeled")
        out[i] = counts.get(t, 0)
    return out
