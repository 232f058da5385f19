"""Pair mining (k-NN cosine similarity), gold pair sampling and pair objectives."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import Segment
from .errors import ConfigError, TaskUndefinedError, ValidationError
from .gd_embed import EmbeddingSet
from .knn import Index

log = logging.getLogger(__name__)

PAIR_HEADER = ("id_a", "id_b", "similarity", "y")


@dataclass(frozen=True)
class Pair:
    id_a: str
    id_b: str
    similarity: float | None = None
    y: int | None = None

    def __post_init__(self):
        if not self.id_a < self.id_b:
            raise ValidationError(f"pair ids must be canonically ordered: {self.id_a!r}, {self.id_b!r}")
        if self.similarity is not None and not math.isfinite(self.similarity):
            raise ValidationError("pair similarity must be finite")

    @classmethod
    def make(cls, a, b, similarity=None, y=None) -> "Pair":
        a, b = (a, b) if a < b else (b, a)
        return cls(a, b, similarity, y)


@dataclass(frozen=True)
class SiameseConfig:
    gamma: float = 0.5

    def __post_init__(self):
        if not -1 <= self.gamma < 1:
            raise ConfigError(f"gamma must lie in [-1, 1), got {self.gamma}")


def write_pairs(path, pairs: Sequence[Pair]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(PAIR_HEADER) + "\n")
        for p in pairs:
            sim = "" if p.similarity is None else repr(float(p.similarity))
            y = "" if p.y is None else str(p.y)
            fh.write(f"{p.id_a}\t{p.id_b}\t{sim}\t{y}\n")


def read_pairs(path) -> list[Pair]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        fh.readline()
        for line in fh:
            a, b, sim, y = line.rstrip("\r\n").split("\t")
            out.append(Pair(a, b, float(sim) if sim else None, int(y) if y else None))
    return out


def _overlap(sa: Segment, sb: Segment) -> bool:
    return sa.file_id == sb.file_id and sa.onset < sb.offset and sb.onset < sa.offset


def mine_pairs(index: Index, emb: EmbeddingSet, threshold: float = 0.85, k: int = 50,
               segments: Mapping[str, Segment] | Sequence[Segment] | None = None,
               workers: int = 1) -> list[Pair]:
    """Pairs of tokens whose cosine similarity exceeds ``threshold``.

    Each token contributes its ``k`` nearest neighbours (itself excluded).
    Pairs of segments that overlap in time within the same file are
    dropped when segment metadata is given. Sorted by similarity,
    descending, then by ids.
    """
    if index.distance != "cosine":
        raise ConfigError("pair mining requires a cosine index")
    if segments is not None and not isinstance(segments, Mapping):
        segments = {s.id: s for s in segments}
    graph_pos, graph_d = index.search(emb.vectors, k, [(i,) for i in emb.ids], workers=workers)
    found = {}
    for qid, pos, dist in zip(emb.ids, graph_pos, graph_d):
        for p, d in zip(pos, dist):
            sim = 1.0 - float(d)
            if not sim > threshold:
                break
            nid = index.ids[p]
            key = (qid, nid) if qid < nid else (nid, qid)
            if key in found:
                continue
            if segments is not None and _overlap(segments[qid], segments[nid]):
                continue
            found[key] = sim
    pairs = [Pair(a, b, s) for (a, b), s in found.items()]
    pairs.sort(key=lambda p: (-p.similarity, p.id_a, p.id_b))
    return pairs


def _tri_decode(k, n):
    """Map condensed indices over pairs i < j of ``n`` items back to (i, j)."""
    ar = np.arange(n)
    row_start = ar * n - ar * (ar + 1) // 2
    i = np.searchsorted(row_start, k, side="right") - 1
    return i, k - row_start[i] + i + 1


def gold_pairs(segments: Sequence[Segment], n_pos: int, n_neg: int, seed: int = 0) -> list[Pair]:
    """Uniformly sampled same-transcription (y=1) and different-transcription (y=0) pairs."""
    if any(s.transcription is None for s in segments):
        raise ValidationError("gold pairs need labelled segments")
    ids = [s.id for s in segments]
    groups: dict = {}
    for i, s in enumerate(segments):
        groups.setdefault(s.transcription, []).append(i)
    members = [np.array(v) for _, v in sorted(groups.items())]
    sizes = np.array([len(m) for m in members], dtype=np.int64)
    per_type = sizes * (sizes - 1) // 2
    n_pos_avail = int(per_type.sum())
    if n_pos_avail == 0:
        raise TaskUndefinedError("no transcription has two tokens; no positive pair exists")
    n = len(segments)
    n_all = n * (n - 1) // 2
    n_neg_avail = n_all - n_pos_avail
    if n_pos > n_pos_avail:
        warnings.warn(f"requested {n_pos} positive pairs, only {n_pos_avail} exist")
        n_pos = n_pos_avail
    if n_neg > n_neg_avail:
        warnings.warn(f"requested {n_neg} negative pairs, only {n_neg_avail} exist")
        n_neg = n_neg_avail
    rng = np.random.default_rng(seed)

    out = []
    picks = np.sort(rng.choice(n_pos_avail, size=n_pos, replace=False))
    bounds = np.r_[0, np.cumsum(per_type)]
    t = np.searchsorted(bounds, picks, side="right") - 1
    for ti, pick in zip(t, picks):
        a, b = _tri_decode(np.array([pick - bounds[ti]]), sizes[ti])
        out.append(Pair.make(ids[members[ti][a[0]]], ids[members[ti][b[0]]], None, 1))

    code = np.empty(n, dtype=np.int64)
    for c, m in enumerate(members):
        code[m] = c
    negs: list = []
    seen = set()
    while len(negs) < n_neg:
        # sample all pairs uniformly and keep the first distinct negatives
        want = n_neg - len(negs)
        batch = rng.choice(n_all, size=min(n_all, 2 * want + 16), replace=False)
        i, j = _tri_decode(batch, n)
        for a, b, kk in zip(i, j, batch):
            if code[a] != code[b] and kk not in seen:
                seen.add(int(kk))
                negs.append((a, b))
                if len(negs) == n_neg:
                    break
    out.extend(Pair.make(ids[a], ids[b], None, 0) for a, b in negs)
    out.sort(key=lambda p: (-p.y, p.id_a, p.id_b))
    return out


def _cos_parts(e, e2):
    e = np.asarray(e, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e.shape != e2.shape:
        raise ValidationError(f"shape mismatch {e.shape} vs {e2.shape}")
    n1, n2 = np.linalg.norm(e), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise ValidationError("siamese objective undefined for a zero vector")
    return e, e2, n1, n2, float(e @ e2) / (n1 * n2)


def siamese_objective(e, e2, y: int, cfg: SiameseConfig = SiameseConfig()) -> float:
    """``y * cos - (1 - y) * max(0, cos - gamma)``, evaluated as written.

    Read as a loss to minimise, the positive term pushes matched pairs
    apart; the formula is kept verbatim and not used for training here.
    """
    if y not in (0, 1):
        raise ValidationError("y must be 0 or 1")
    *_, c = _cos_parts(e, e2)
    return y * c - (1 - y) * max(0.0, c - cfg.gamma)


def siamese_gradient(e, e2, y: int, cfg: SiameseConfig = SiameseConfig()):
    """Analytic gradient of ``siamese_objective`` w.r.t. both inputs.

    At the hinge kink (y=0, cos == gamma) the zero subgradient is used and
    a warning is emitted.
    """
    if y not in (0, 1):
        raise ValidationError("y must be 0 or 1")
    e, e2, n1, n2, c = _cos_parts(e, e2)
    if y == 1:
        coef = 1.0
    else:
        if c == cfg.gamma:
            warnings.warn("gradient evaluated at the hinge kink; using the zero subgradient")
        coef = -1.0 if c > cfg.gamma else 0.0
    g1 = e2 / (n1 * n2) - c * e / (n1 * n1)
    g2 = e / (n1 * n2) - c * e2 / (n2 * n2)
    return coef * g1, coef * g2


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))
