"""Gaussian downsampling of frame sequences into fixed-size embeddings."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import FeatureMatrix, FeatureStore, Segment, one_hot_frames, slice_features
from .errors import (ConfigError, DataError, DegenerateSegmentError, MissingEntryError,
                     ParseError, ValidationError)

DISTANCES = ("cosine", "euclidean")


@dataclass(frozen=True)
class GdConfig:
    l: int = 10
    sigma_ratio: float = 0.4

    def __post_init__(self):
        if int(self.l) != self.l or self.l < 1:
            raise ConfigError(f"l must be a positive integer, got {self.l}")
        if not self.sigma_ratio > 0:
            raise ConfigError(f"sigma_ratio must be positive, got {self.sigma_ratio}")


@lru_cache(maxsize=4096)
def _weights(T: int, l: int, sigma_ratio: float) -> np.ndarray:
    spacing = T / l
    centers = (np.arange(l) + 0.5) * spacing - 0.5
    sigma = sigma_ratio * spacing
    i = np.arange(T)
    logw = -((i[None, :] - centers[:, None]) ** 2) / (2.0 * sigma * sigma)
    # subtract the row max before exponentiating so tiny sigmas cannot underflow to 0/0
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def gd_weights(T: int, cfg: GdConfig = GdConfig()) -> np.ndarray:
    """l x T matrix of normalised Gaussian weights; row j averages around sample j."""
    if T < 1:
        raise DegenerateSegmentError("cannot downsample an empty sequence")
    return _weights(int(T), int(cfg.l), float(cfg.sigma_ratio))


def gd_embed(feat, cfg: GdConfig = GdConfig()) -> np.ndarray:
    """Embed a T x n frame matrix into a vector of size l * n.

    Block j is a Gaussian-weighted average of all frames, centred at frame
    index ``(j + 0.5) * T / l - 0.5`` with std ``sigma_ratio * T / l``.
    Blocks are concatenated in order.
    """
    frames = feat.frames if isinstance(feat, FeatureMatrix) else np.asarray(feat)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DegenerateSegmentError(f"expected a non-empty T x n matrix, got shape {frames.shape}")
    w = gd_weights(frames.shape[0], cfg)
    return (w @ frames.astype(np.float64)).reshape(-1)


@dataclass(frozen=True)
class Embedding:
    id: str
    vector: np.ndarray
    label: tuple[str, ...] | None
    speaker: str


class EmbeddingSet:
    """Fixed-size vectors with ids, transcriptions and speakers.

    Vectors are held as a float32 N x dim matrix, the archive precision.
    """

    def __init__(self, ids: Sequence[str], vectors, labels=None, speakers=None,
                 distance_default: str = "cosine"):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise ValidationError(f"vectors must be N x dim, got shape {vectors.shape}")
        n = vectors.shape[0]
        ids = [str(i) for i in ids]
        if len(ids) != n:
            raise ValidationError(f"{len(ids)} ids for {n} vectors")
        if len(set(ids)) != n:
            dup = sorted({i for i in ids if ids.count(i) > 1})[:5]
            raise ValidationError(f"duplicate embedding ids: {dup}")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("embeddings contain non-finite values")
        if distance_default not in DISTANCES:
            raise ConfigError(f"unknown distance {distance_default!r}")
        labels = [None] * n if labels is None else [None if t is None else tuple(t) for t in labels]
        speakers = [""] * n if speakers is None else [str(s) for s in speakers]
        if len(labels) != n or len(speakers) != n:
            raise ValidationError("labels and speakers must match the number of vectors")
        vectors.setflags(write=False)
        self.ids = ids
        self.vectors = vectors
        self.labels = labels
        self.speakers = speakers
        self.distance_default = distance_default

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def items(self) -> list[Embedding]:
        return [Embedding(i, v, t, s)
                for i, v, t, s in zip(self.ids, self.vectors, self.labels, self.speakers)]

    def subset(self, indices) -> "EmbeddingSet":
        indices = list(indices)
        return EmbeddingSet([self.ids[i] for i in indices], self.vectors[indices],
                            [self.labels[i] for i in indices], [self.speakers[i] for i in indices],
                            self.distance_default)

    def label_codes(self) -> np.ndarray:
        """Integer code per item; equal codes mean equal transcriptions."""
        if any(t is None for t in self.labels):
            raise ValidationError("embedding set contains unlabeled items")
        codes = {}
        return np.array([codes.setdefault(t, len(codes)) for t in self.labels], dtype=np.int64)

    def save(self, directory) -> None:
        write_embedding_archive(directory, self)

    @classmethod
    def load(cls, directory) -> "EmbeddingSet":
        return load_embedding_archive(directory)


def embed_corpus(store: FeatureStore, segments: Sequence[Segment], featurizer="real",
                 cfg: GdConfig = GdConfig(), alignment=None, inventory=None,
                 workers: int = 1) -> EmbeddingSet:
    """Embed every segment with GD over real features or one-hot phone frames.

    ``featurizer`` is ``"real"`` or ``"one_hot"``; the latter needs the
    alignment and the phone inventory. Output order follows ``segments``.
    """
    if featurizer not in ("real", "one_hot"):
        raise ConfigError(f"unknown featurizer {featurizer!r}")
    if featurizer == "one_hot" and (alignment is None or inventory is None):
        raise ConfigError("one_hot featurizer needs an alignment and an inventory")

    def one(seg):
        try:
            if featurizer == "real":
                feat = slice_features(store, seg)
            else:
                feat = one_hot_frames(seg, alignment, inventory, T=store[seg.file_id].shape[0],
                                      hop=store.hop, window=store.window)
            return gd_embed(feat, cfg)
        except DataError as exc:
            raise type(exc)(f"segment {seg.id}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            vecs = list(pool.map(one, segments))
    else:
        vecs = [one(s) for s in segments]
    dim = cfg.l * (store.dim if featurizer == "real" else len(inventory))
    mat = np.vstack(vecs) if vecs else np.zeros((0, dim))
    return EmbeddingSet([s.id for s in segments], mat, [s.transcription for s in segments],
                        [s.speaker for s in segments])


def write_embedding_archive(directory, emb: EmbeddingSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"dim": emb.dim, "count": len(emb), "distance_default": emb.distance_default}
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(directory / "ids.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.write("id\tspeaker\tphones\n")
        for i, s, t in zip(emb.ids, emb.speakers, emb.labels):
            fh.write(f"{i}\t{s}\t{'' if t is None else ' '.join(t)}\n")
    np.ascontiguousarray(emb.vectors, dtype="<f4").tofile(directory / "emb.bin")


def load_embedding_archive(directory) -> EmbeddingSet:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise MissingEntryError(f"embedding archive not found: {directory}")
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    ids, speakers, labels = [], [], []
    with open(directory / "ids.tsv", encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\r\n")
        if header != "id\tspeaker\tphones":
            raise ParseError(f"bad header {header!r}", directory / "ids.tsv", 1)
        for lineno, line in enumerate(fh, start=2):
            cols = line.rstrip("\r\n").split("\t")
            if len(cols) != 3:
                raise ParseError("expected 3 columns", directory / "ids.tsv", lineno)
            ids.append(cols[0])
            speakers.append(cols[1])
            labels.append(tuple(cols[2].split()) or None)
    dim, count = int(manifest["dim"]), int(manifest["count"])
    raw = np.fromfile(directory / "emb.bin", dtype="<f4")
    if raw.size != dim * count or len(ids) != count:
        raise ParseError(f"archive holds {raw.size} floats and {len(ids)} ids, "
                         f"manifest says {count} x {dim}", directory)
    return EmbeddingSet(ids, raw.reshape(count, dim), labels, speakers,
                        manifest.get("distance_default", "cosine"))
