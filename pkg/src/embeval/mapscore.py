"""Same-different mean average precision over all token pairs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, TaskUndefinedError
from .gd_embed import DISTANCES, EmbeddingSet
from .knn import _prepare, _scale, block_distances, paired_distances

CONVENTION = ("single ranked list of all unordered token pairs; "
              "exact distance ties scored with the expected precision over tie orderings")

ROW_BLOCK = 1024


@dataclass(frozen=True)
class MapConfig:
    distance: str = "cosine"
    max_pairs: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown distance {self.distance!r}")
        if self.max_pairs is not None and self.max_pairs < 1:
            raise ConfigError("max_pairs must be positive")


@dataclass
class MapReport:
    average_precision: float
    positive_pairs: int
    total_pairs: int
    subsampled: bool
    config: MapConfig

    def to_json(self) -> dict:
        return {"average_precision": self.average_precision, "positive_pairs": self.positive_pairs,
                "total_pairs": self.total_pairs, "subsampled": self.subsampled,
                "config": asdict(self.config), "convention": CONVENTION}

    def write(self, directory, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        payload = self.to_json()
        if extra:
            payload.update(extra)
        with open(directory / "map.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")


def average_precision(distances, positive) -> float:
    """AP of a ranked list, ascending distance first.

    Within a group of exactly tied distances the precision is averaged
    over every ordering of the group, which makes the value independent
    of how ties happen to be ordered.
    """
    d = np.asarray(distances, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    P = int(pos.sum())
    if P == 0:
        raise TaskUndefinedError("average precision needs at least one positive pair")
    order = np.argsort(d, kind="stable")
    d, pos = d[order], pos[order]
    n = d.size
    starts = np.flatnonzero(np.r_[True, d[1:] != d[:-1]])
    sizes = np.diff(np.r_[starts, n])
    cum = np.r_[0, np.cumsum(pos)]
    group_pos = cum[starts + sizes] - cum[starts]
    keep = group_pos > 0
    starts, sizes, group_pos = starts[keep], sizes[keep], group_pos[keep]
    before = cum[starts]
    total = 0.0
    for r0, g, p, c0 in zip(starts, sizes, group_pos, before):
        i = np.arange(1, g + 1)
        slope = (p - 1) / (g - 1) if g > 1 else 0.0
        total += float(np.sum((p / g) * (c0 + 1 + (i - 1) * slope) / (r0 + i)))
    return total / P


def _condensed_to_pairs(k, n):
    row_start = np.arange(n) * n - np.arange(n) * (np.arange(n) + 1) // 2
    i = np.searchsorted(row_start, k, side="right") - 1
    j = k - row_start[i] + i + 1
    return i, j


def all_pair_distances(vectors, distance="cosine"):
    """Condensed upper-triangle distances (i < j), row-major."""
    x = _prepare(vectors, distance)
    scale = _scale(x) if distance == "euclidean" else 1.0
    sq = np.einsum("ij,ij->i", x, x)
    n = x.shape[0]
    parts = []
    for start in range(0, n, ROW_BLOCK):
        stop = min(n, start + ROW_BLOCK)
        block = block_distances(x[start:stop], x[start:], distance, sq[start:stop], sq[start:], scale)
        for r in range(stop - start):
            parts.append(block[r, r + 1:])
    return np.concatenate(parts) if parts else np.empty(0)


def map_score(emb: EmbeddingSet, cfg: MapConfig = MapConfig()) -> MapReport:
    codes = emb.label_codes()
    n = len(emb)
    total = n * (n - 1) // 2
    _, type_counts = np.unique(codes, return_counts=True)
    P = int(np.sum(type_counts * (type_counts - 1) // 2))
    if P == 0:
        raise TaskUndefinedError("no two tokens share a transcription; MAP is undefined")
    if cfg.max_pairs is not None and cfg.max_pairs < P:
        raise ConfigError(f"max_pairs={cfg.max_pairs} is below the {P} positive pairs")

    if cfg.max_pairs is None or total <= cfg.max_pairs:
        d = all_pair_distances(emb.vectors, cfg.distance)
        i, j = np.triu_indices(n, k=1)
        ap = average_precision(d, codes[i] == codes[j])
        return MapReport(ap, P, total, False, cfg)

    # all positives, plus a uniform sample of negatives
    pi, pj = [], []
    for c in np.unique(codes):
        idx = np.flatnonzero(codes == c)
        if idx.size > 1:
            a, b = np.triu_indices(idx.size, k=1)
            pi.append(idx[a])
            pj.append(idx[b])
    pi, pj = np.concatenate(pi), np.concatenate(pj)
    n_neg = cfg.max_pairs - P
    rng = np.random.default_rng(cfg.seed)
    draw = rng.choice(total, size=min(total, n_neg + P), replace=False)
    ni, nj = _condensed_to_pairs(draw, n)
    neg = codes[ni] != codes[nj]
    ni, nj = ni[neg][:n_neg], nj[neg][:n_neg]
    ia, ib = np.r_[pi, ni], np.r_[pj, nj]
    d = paired_distances(emb.vectors[ia], emb.vectors[ib], cfg.distance)
    labels = np.r_[np.ones(pi.size, bool), np.zeros(ni.size, bool)]
    return MapReport(average_precision(d, labels), P, int(ia.size), True, cfg)
