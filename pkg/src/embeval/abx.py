"""ABX discrimination error, averaged within contrasts and then across them."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, TaskUndefinedError
from .gd_embed import DISTANCES, EmbeddingSet
from .knn import distance as pair_distance, pairwise_distances

TIE_NOTE = "exact distance ties count as half an error"


@dataclass(frozen=True)
class AbxConfig:
    distance: str = "cosine"
    max_triplets_per_contrast: int = 1000
    seed: int = 0
    speaker_mode: str = "any"

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown distance {self.distance!r}")
        if self.max_triplets_per_contrast < 1:
            raise ConfigError("max_triplets_per_contrast must be >= 1")
        if self.speaker_mode not in ("any", "within_speaker"):
            raise ConfigError(f"unknown speaker_mode {self.speaker_mode!r}")


@dataclass
class ContrastResult:
    type_a: tuple
    type_b: tuple
    error: float
    triplets: int


@dataclass
class AbxReport:
    per_contrast: list
    global_error: float
    omitted_contrasts: int
    config: AbxConfig
    notes: list = field(default_factory=lambda: [TIE_NOTE])

    @property
    def contrast_count(self) -> int:
        return len(self.per_contrast)

    def error_of(self, type_a, type_b) -> float:
        key = {tuple(type_a), tuple(type_b)}
        for c in self.per_contrast:
            if {c.type_a, c.type_b} == key:
                return c.error
        raise KeyError((type_a, type_b))

    def to_json(self) -> dict:
        return {"global_error": self.global_error, "contrast_count": self.contrast_count,
                "omitted_contrasts": self.omitted_contrasts, "config": asdict(self.config),
                "notes": self.notes}

    def write(self, directory, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        payload = self.to_json()
        if extra:
            payload.update(extra)
        with open(directory / "abx.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(directory / "abx.tsv", "w", encoding="utf-8", newline="") as fh:
            fh.write("contrast_a\tcontrast_b\terror\ttriplets\n")
            for c in self.per_contrast:
                fh.write(f"{' '.join(c.type_a)}\t{' '.join(c.type_b)}\t{c.error!r}\t{c.triplets}\n")


def triplet_decision(e_a, e_b, e_x, d: str = "cosine") -> float:
    """Error contribution of one triplet: 0 if A is closer to X, 1 if B is, 0.5 on a tie."""
    da = pair_distance(e_a, e_x, d)
    db = pair_distance(e_b, e_x, d)
    if not (math.isfinite(da) and math.isfinite(db)):
        raise NumericError(f"non-finite distance in triplet ({da}, {db})")
    if da < db:
        return 0.0
    if da > db:
        return 1.0
    return 0.5


def _block_count(xs, bs):
    return len(xs) * (len(xs) - 1) * len(bs)


def _full_block(D, xs, bs):
    """Twice the summed error over all triplets with x, a from ``xs`` and b from ``bs``."""
    dxa = D[np.ix_(xs, xs)]
    dxb = D[np.ix_(xs, bs)]
    gt = dxa[:, :, None] > dxb[:, None, :]
    eq = dxa[:, :, None] == dxb[:, None, :]
    # drop a == x
    diag = np.arange(len(xs))
    gt[diag, diag, :] = False
    eq[diag, diag, :] = False
    return 2 * int(np.count_nonzero(gt)) + int(np.count_nonzero(eq))


def _sampled_blocks(D, blocks, counts, cap, rng):
    picks = np.sort(rng.choice(int(sum(counts)), size=cap, replace=False))
    bounds = np.cumsum([0] + list(counts))
    total = 0
    for (xs, bs), lo, hi in zip(blocks, bounds[:-1], bounds[1:]):
        sel = picks[(picks >= lo) & (picks < hi)] - lo
        if sel.size == 0:
            continue
        xs, bs = np.asarray(xs), np.asarray(bs)
        per_x = (len(xs) - 1) * len(bs)
        xi = sel // per_x
        rem = sel % per_x
        ai = rem // len(bs)
        ai = ai + (ai >= xi)  # skip a == x
        bi = rem % len(bs)
        x, a, b = xs[xi], xs[ai], bs[bi]
        dxa, dxb = D[x, a], D[x, b]
        total += 2 * int(np.count_nonzero(dxa > dxb)) + int(np.count_nonzero(dxa == dxb))
    return total


def abx_score(emb: EmbeddingSet, cfg: AbxConfig = AbxConfig()) -> AbxReport:
    """ABX error of a labelled embedding set.

    Every unordered contrast {A, B} pools triplets with X and A drawn from
    one type (distinct tokens) and B from the other, in both role
    assignments. Above ``max_triplets_per_contrast`` a seeded uniform sample
    of exactly that many triplets is scored.
    """
    emb.label_codes()  # rejects unlabeled items
    types = sorted(set(emb.labels))
    if len(types) < 2:
        raise TaskUndefinedError(f"ABX needs at least 2 label types, got {len(types)}")
    # contrasts are visited in lexicographic order of their transcriptions
    type_index = {t: i for i, t in enumerate(types)}
    tcode = np.array([type_index[t] for t in emb.labels])

    if cfg.speaker_mode == "any":
        groups = {None: np.arange(len(emb))}
    else:
        spk = np.array(emb.speakers)
        groups = {s: np.flatnonzero(spk == s) for s in sorted(set(emb.speakers))}
    members = {g: {t: idx[tcode[idx] == t] for t in np.unique(tcode[idx])}
               for g, idx in groups.items()}

    D = pairwise_distances(emb.vectors, distance=cfg.distance)
    if not np.all(np.isfinite(D)):
        raise NumericError("non-finite distances in ABX distance matrix")

    results = []
    omitted = 0
    cap = cfg.max_triplets_per_contrast
    contrast_no = 0
    for ia in range(len(types)):
        for ib in range(ia + 1, len(types)):
            contrast_no += 1
            blocks = []
            for g in members.values():
                A, B = g.get(ia), g.get(ib)
                if A is None or B is None:
                    continue
                if len(A) >= 2:
                    blocks.append((A, B))
                if len(B) >= 2:
                    blocks.append((B, A))
            counts = [_block_count(x, b) for x, b in blocks]
            n = int(sum(counts))
            if n == 0:
                omitted += 1
                continue
            if n <= cap:
                twice = sum(_full_block(D, x, b) for x, b in blocks if len(x) >= 2)
                used = n
            else:
                rng = np.random.default_rng([cfg.seed, contrast_no])
                twice = _sampled_blocks(D, blocks, counts, cap, rng)
                used = cap
            results.append(ContrastResult(types[ia], types[ib], twice / (2 * used), used))
    if not results:
        raise TaskUndefinedError("no contrast has a valid triplet")
    global_error = float(np.mean([r.error for r in results]))
    return AbxReport(results, global_error, omitted, cfg)
