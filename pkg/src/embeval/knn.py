"""Exact blocked k-nearest-neighbour search.

Distances are computed block by block (query block x index block) in
float64 and merged into a bounded top-k buffer per query. Ordering is by
distance, then by id (lexicographic), so results do not depend on block
sizes or on the number of worker threads.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .gd_embed import DISTANCES, EmbeddingSet

QUERY_BLOCK = 1024
INDEX_BLOCK = 4096

# distances closer than this (relative to the data scale) are treated as exact ties
_SNAP = 1e-12
_EXCLUDED = np.iinfo(np.int64).max


def _check_distance(distance):
    if distance not in DISTANCES:
        raise ConfigError(f"unknown distance {distance!r}; expected one of {DISTANCES}")


def _prepare(vectors: np.ndarray, distance: str) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if distance == "cosine":
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / norms
    return x


def block_distances(q: np.ndarray, x: np.ndarray, distance: str,
                    qsq: np.ndarray | None = None, xsq: np.ndarray | None = None,
                    scale: float = 1.0) -> np.ndarray:
    """Distances between prepared rows of ``q`` and ``x``.

    Both inputs must already be unit-normalised for cosine. Values within
    ``_SNAP`` of each other (relative to ``scale``) are rounded onto a
    common grid so that mathematically equal distances compare equal.
    """
    g = q @ x.T
    if distance == "cosine":
        d = 1.0 - g
        np.maximum(d, 0.0, out=d)
        return np.round(d / _SNAP) * _SNAP
    if qsq is None:
        qsq = np.einsum("ij,ij->i", q, q)
    if xsq is None:
        xsq = np.einsum("ij,ij->i", x, x)
    d2 = qsq[:, None] + xsq[None, :] - 2.0 * g
    np.maximum(d2, 0.0, out=d2)
    unit = _SNAP * scale
    d2 = np.round(d2 / unit) * unit
    return np.sqrt(d2)


def paired_distances(a, b, distance: str = "cosine") -> np.ndarray:
    """Row-wise distances ``d(a[i], b[i])`` with the same snapping as the blocked path."""
    _check_distance(distance)
    pa, pb = _prepare(a, distance), _prepare(b, distance)
    g = np.einsum("ij,ij->i", pa, pb)
    if distance == "cosine":
        d = np.maximum(1.0 - g, 0.0)
        return np.round(d / _SNAP) * _SNAP
    unit = _SNAP * _scale(pa, pb)
    d2 = np.einsum("ij,ij->i", pa, pa) + np.einsum("ij,ij->i", pb, pb) - 2.0 * g
    d2 = np.round(np.maximum(d2, 0.0) / unit) * unit
    return np.sqrt(d2)


def pairwise_distances(a, b=None, distance: str = "cosine") -> np.ndarray:
    """Dense distance matrix between two sets of raw vectors."""
    _check_distance(distance)
    pa = _prepare(a, distance)
    pb = pa if b is None else _prepare(b, distance)
    scale = _scale(pa, pb) if distance == "euclidean" else 1.0
    return block_distances(pa, pb, distance, scale=scale)


def _scale(*mats) -> float:
    s = max((float(np.max(np.einsum("ij,ij->i", m, m))) if len(m) else 0.0) for m in mats)
    return s if s > 0 else 1.0


def distance(u, v, kind: str = "cosine") -> float:
    """Distance between two single vectors, computed directly."""
    _check_distance(kind)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValidationError(f"dimension mismatch {u.shape} vs {v.shape}")
    if kind == "euclidean":
        return float(np.linalg.norm(u - v))
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValidationError("cosine distance undefined for a zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


@dataclass
class KnnGraph:
    query_ids: list
    neighbor_ids: list
    distances: list
    k: int
    distance: str
    index_size: int
    self_exclude: bool = False

    def __len__(self):
        return len(self.query_ids)

    def distance_matrix(self) -> np.ndarray:
        """Neighbour distances as a ragged-safe 2-D array (NaN padded)."""
        width = max((len(d) for d in self.distances), default=0)
        out = np.full((len(self.distances), width), np.nan)
        for i, d in enumerate(self.distances):
            out[i, :len(d)] = d
        return out

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "graph.json", "w", encoding="utf-8") as fh:
            json.dump({"k": self.k, "distance": self.distance, "index_size": self.index_size,
                       "self_exclude": self.self_exclude}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(directory / "neighbors.tsv", "w", encoding="utf-8", newline="") as fh:
            fh.write("query_id\trank\tneighbor_id\tdistance\n")
            for q, ns, ds in zip(self.query_ids, self.neighbor_ids, self.distances):
                for r, (n, dist) in enumerate(zip(ns, ds), start=1):
                    fh.write(f"{q}\t{r}\t{n}\t{float(dist)!r}\n")

    @classmethod
    def load(cls, directory) -> "KnnGraph":
        directory = Path(directory)
        with open(directory / "graph.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        order, neigh, dists = [], {}, {}
        with open(directory / "neighbors.tsv", encoding="utf-8", newline="") as fh:
            fh.readline()
            for lineno, line in enumerate(fh, start=2):
                cols = line.rstrip("\r\n").split("\t")
                if len(cols) != 4:
                    raise ParseError("expected 4 columns", directory / "neighbors.tsv", lineno)
                q = cols[0]
                if q not in neigh:
                    order.append(q)
                    neigh[q], dists[q] = [], []
                neigh[q].append(cols[2])
                dists[q].append(float(cols[3]))
        return cls(order, [neigh[q] for q in order], [np.array(dists[q]) for q in order],
                   int(meta["k"]), meta["distance"], int(meta["index_size"]),
                   bool(meta.get("self_exclude", False)))


class Index:
    """Immutable exact index over an embedding set."""

    def __init__(self, emb: EmbeddingSet, distance: str | None = None,
                 query_block: int = QUERY_BLOCK, index_block: int = INDEX_BLOCK):
        distance = distance or emb.distance_default
        _check_distance(distance)
        if len(emb) == 0:
            raise ValidationError("cannot index an empty embedding set")
        if distance == "cosine":
            zero = np.flatnonzero(~np.any(emb.vectors != 0, axis=1))
            if zero.size:
                bad = [emb.ids[i] for i in zero[:10]]
                raise ValidationError(f"zero vectors under cosine distance: {bad}")
        self.emb = emb
        self.distance = distance
        self.ids = emb.ids
        self.query_block = int(query_block)
        self.index_block = int(index_block)
        self._x = _prepare(emb.vectors, distance)
        self._x.setflags(write=False)
        self._xsq = np.einsum("ij,ij->i", self._x, self._x)
        self._scale = _scale(self._x) if distance == "euclidean" else 1.0
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        ranks = np.empty(len(order), dtype=np.int64)
        ranks[order] = np.arange(len(order))
        self._ranks = ranks
        self._by_rank = np.array(order, dtype=np.int64)
        self._rank_bits = max(1, int(len(order) - 1).bit_length())
        self._rank_mask = (1 << self._rank_bits) - 1
        # largest snapped distance code: 2 / _SNAP (cosine) or 4 * scale / (_SNAP * scale)
        if (int(4 / _SNAP) + 1) << self._rank_bits >= _EXCLUDED:
            raise ValidationError(f"index of {len(order)} items is too large for exact keys")
        self._max_code = float((_EXCLUDED >> self._rank_bits) - 1)
        self._pos = {i: p for p, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self._x.shape[1]

    @property
    def block_sizes(self) -> dict:
        return {"query_block": self.query_block, "index_block": self.index_block}

    def _prepare_queries(self, vectors) -> np.ndarray:
        q = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if q.shape[1] != self.dim:
            raise ValidationError(f"query dimension {q.shape[1]} != index dimension {self.dim}")
        if self.distance == "cosine":
            norms = np.linalg.norm(q, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ValidationError("zero query vector under cosine distance")
            q = q / norms
        return q

    def _keys(self, q: np.ndarray, qsq: np.ndarray, cols: slice) -> np.ndarray:
        """Snapped distance codes and id ranks packed into exactly ordered int64 keys."""
        g = q @ self._x[cols].T
        if self.distance == "cosine":
            code = np.rint(np.maximum(1.0 - g, 0.0) / _SNAP)
        else:
            d2 = qsq[:, None] + self._xsq[cols][None, :] - 2.0 * g
            code = np.rint(np.maximum(d2, 0.0) / (_SNAP * self._scale))
            # queries far outside the index scale saturate instead of overflowing
            np.minimum(code, self._max_code, out=code)
        return (code.astype(np.int64) << self._rank_bits) | self._ranks[cols]

    def _decode(self, keys: np.ndarray):
        valid = keys != _EXCLUDED
        pos = self._by_rank[np.where(valid, keys & self._rank_mask, 0)]
        code = (keys >> self._rank_bits).astype(np.float64)
        if self.distance == "cosine":
            dist = code * _SNAP
        else:
            dist = np.sqrt(code * (_SNAP * self._scale))
        dist[~valid] = np.inf
        return pos, dist

    def _search_block(self, q: np.ndarray, k: int, excl: list[np.ndarray] | None):
        """Top-k over the whole index for a block of prepared queries."""
        m = q.shape[0]
        n = len(self.ids)
        if m == 1:
            # a one-row product goes through gemv, whose rounding differs from gemm;
            # a duplicated row keeps single queries bit-identical to batched ones
            pos, dist = self._search_block(np.vstack([q, q]), k, None if excl is None else excl * 2)
            return pos[:1], dist[:1]
        qsq = np.einsum("ij,ij->i", q, q)
        best = np.empty((m, 0), dtype=np.int64)
        for start in range(0, n, self.index_block):
            stop = min(n, start + self.index_block)
            keys = self._keys(q, qsq, slice(start, stop))
            if excl is not None:
                for r, ex in enumerate(excl):
                    hit = ex[(ex >= start) & (ex < stop)]
                    keys[r, hit - start] = _EXCLUDED
            cand = np.concatenate([best, keys], axis=1)
            if cand.shape[1] > k:
                cand = np.partition(cand, k - 1, axis=1)[:, :k]
            best = cand
        best = np.sort(best, axis=1)
        return self._decode(best)

    def search(self, vectors, k: int, exclude: Sequence[Iterable[str]] | None = None,
               workers: int = 1):
        """Neighbour positions and distances for a batch of raw query vectors.

        Returns ragged lists (excluded items shorten a row).
        """
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        q = self._prepare_queries(vectors)
        excl = None
        if exclude is not None:
            excl = [np.array(sorted(self._pos[i] for i in ex if i in self._pos), dtype=np.int64)
                    for ex in exclude]
            if len(excl) != q.shape[0]:
                raise ValidationError("one exclusion set per query is required")
        kk = min(k, len(self.ids))
        starts = list(range(0, q.shape[0], self.query_block))

        def run(start):
            stop = min(q.shape[0], start + self.query_block)
            return self._search_block(q[start:stop], kk, None if excl is None else excl[start:stop])

        if workers > 1 and len(starts) > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(s) for s in starts]
        pos, dist = [], []
        for bi, bd in parts:
            for i_row, d_row in zip(bi, bd):
                ok = np.isfinite(d_row)
                pos.append(i_row[ok])
                dist.append(d_row[ok])
        return pos, dist

    def query(self, q, k: int, exclude: Iterable[str] | None = None) -> list[tuple[str, float]]:
        pos, dist = self.search(np.asarray(q)[None, :] if np.ndim(q) == 1 else q, k,
                                None if exclude is None else [set(exclude)])
        return [(self.ids[p], float(d)) for p, d in zip(pos[0], dist[0])]


def build_index(emb: EmbeddingSet, distance: str | None = None, **kw) -> Index:
    return Index(emb, distance, **kw)


def query(index: Index, q, k: int, exclude: Iterable[str] | None = None) -> list[tuple[str, float]]:
    return index.query(q, k, exclude)


def build_graph(index: Index, queries: EmbeddingSet, k: int, self_exclude: bool = False,
                workers: int = 1) -> KnnGraph:
    if queries.dim != index.dim:
        raise ValidationError(f"query dimension {queries.dim} != index dimension {index.dim}")
    exclude = [(i,) for i in queries.ids] if self_exclude else None
    pos, dist = index.search(queries.vectors, k, exclude, workers=workers)
    return KnnGraph(list(queries.ids), [[index.ids[p] for p in row] for row in pos], dist,
                    int(k), index.distance, len(index), bool(self_exclude))
