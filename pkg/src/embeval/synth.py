"""Synthetic labelled corpora with Zipfian type frequencies.

Each speaker gets one file. Tokens are laid end to end; every phone of a
token is rendered as a run of frames equal to the phone's prototype vector
plus Gaussian noise and a per-speaker offset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import (DEFAULT_HOP, DEFAULT_WINDOW, TIME_DECIMALS, FileAlignment, Segment,
                     write_alignment, write_feature_archive, write_item_file)
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class SynthConfig:
    inventory_size: int = 33
    num_types: int = 500
    zipf_exponent: float = 1.0
    total_tokens: int = 20000
    phones_per_type: tuple = (2, 6)
    frames_per_phone: tuple = (5, 15)
    noise_sigma: float = 0.1
    prototype_dim: int = 13
    speakers: int = 12
    speaker_offset_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phones_per_type", tuple(int(v) for v in self.phones_per_type))
        object.__setattr__(self, "frames_per_phone", tuple(int(v) for v in self.frames_per_phone))
        if self.num_types < 2:
            raise ConfigError("num_types must be >= 2")
        if self.total_tokens < self.num_types:
            raise ConfigError("total_tokens must be >= num_types")
        if self.zipf_exponent < 0:
            raise ConfigError("zipf_exponent must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        for name in ("phones_per_type", "frames_per_phone"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must be a range 1 <= lo <= hi")
        if self.inventory_size < 1 or self.prototype_dim < 1 or self.speakers < 1:
            raise ConfigError("inventory_size, prototype_dim and speakers must be positive")


@dataclass
class SynthCorpus:
    segments: list
    alignment: dict
    features: dict
    inventory: list
    type_counts: dict
    hop: float = DEFAULT_HOP
    window: float = DEFAULT_WINDOW


def zipf_counts(num_types: int, total: int, s: float) -> np.ndarray:
    """Integer counts proportional to rank**-s summing exactly to ``total``.

    Largest-remainder rounding; remainder ties go to the better rank.
    """
    w = np.arange(1, num_types + 1, dtype=np.float64) ** (-s)
    quota = total * w / w.sum()
    counts = np.floor(quota).astype(np.int64)
    short = total - int(counts.sum())
    order = np.lexsort((np.arange(num_types), -(quota - counts)))
    counts[order[:short]] += 1
    return counts


def phone_names(n: int) -> list[str]:
    return [f"p{i:02d}" for i in range(n)]


def _draw_types(cfg: SynthConfig, rng, inventory):
    lo, hi = cfg.phones_per_type
    types, seen = [], set()
    for _ in range(cfg.num_types):
        for _attempt in range(100):
            length = int(rng.integers(lo, hi + 1))
            t = tuple(inventory[i] for i in rng.integers(0, len(inventory), size=length))
            if t not in seen:
                break
        else:
            raise DataError("could not draw a new unique phone string after 100 retries")
        seen.add(t)
        types.append(t)
    return types


def _boundary(frame: int, hop: float, window: float) -> float:
    # midway between consecutive frame centres
    return round(frame * hop + (window - hop) / 2, TIME_DECIMALS)


def build_corpus(cfg: SynthConfig) -> SynthCorpus:
    rng = np.random.default_rng(cfg.seed)
    inventory = phone_names(cfg.inventory_size)
    types = _draw_types(cfg, rng, inventory)
    counts = zipf_counts(cfg.num_types, cfg.total_tokens, cfg.zipf_exponent)
    prototypes = rng.standard_normal((cfg.inventory_size, cfg.prototype_dim))
    offsets = rng.normal(0.0, cfg.speaker_offset_ratio * cfg.noise_sigma,
                         (cfg.speakers, cfg.prototype_dim))
    token_types = rng.permutation(np.repeat(np.arange(cfg.num_types), counts))
    token_speakers = rng.integers(0, cfg.speakers, size=cfg.total_tokens)
    phone_idx = {p: i for i, p in enumerate(inventory)}
    flo, fhi = cfg.frames_per_phone
    hop, window = DEFAULT_HOP, DEFAULT_WINDOW

    frames = {s: [] for s in range(cfg.speakers)}
    cursor = {s: 0 for s in range(cfg.speakers)}
    intervals = {s: [] for s in range(cfg.speakers)}
    segments = []
    for tok, (ti, spk) in enumerate(zip(token_types, token_speakers)):
        t = types[ti]
        spk = int(spk)
        lens = rng.integers(flo, fhi + 1, size=len(t))
        start = cursor[spk]
        for p, n in zip(t, lens):
            block = np.repeat(prototypes[phone_idx[p]][None, :], n, axis=0)
            if cfg.noise_sigma > 0:
                block = block + rng.normal(0.0, cfg.noise_sigma, block.shape)
            frames[spk].append(block + offsets[spk])
            intervals[spk].append((p, cursor[spk], cursor[spk] + int(n)))
            cursor[spk] += int(n)
        file_id = f"spk{spk:02d}"
        segments.append(Segment(f"tok{tok:06d}", file_id, file_id, _boundary(start, hop, window),
                                _boundary(cursor[spk], hop, window), t))

    features, alignment = {}, {}
    for spk in range(cfg.speakers):
        if not intervals[spk]:
            continue
        file_id = f"spk{spk:02d}"
        features[file_id] = np.vstack(frames[spk]).astype(np.float32)
        iv = intervals[spk]
        on = np.array([_boundary(a, hop, window) for _, a, _ in iv])
        off = np.array([_boundary(b, hop, window) for _, _, b in iv])
        on[0] = 0.0
        alignment[file_id] = FileAlignment(tuple(p for p, _, _ in iv), on, off)
    type_counts = {t: int(c) for t, c in zip(types, counts) if c > 0}
    return SynthCorpus(segments, alignment, features, inventory, type_counts, hop, window)


def generate_corpus(cfg: SynthConfig, out_dir) -> dict:
    """Write a synthetic corpus in the on-disk corpus formats.

    Produces ``items.tsv``, ``alignment.tsv``, ``features/``, ``truth.tsv``
    (token id and the count of its type) and ``synth_config.json``.
    Returns the paths written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = build_corpus(cfg)
    paths = {"items": out / "items.tsv", "alignment": out / "alignment.tsv",
             "features": out / "features", "truth": out / "truth.tsv",
             "config": out / "synth_config.json"}
    write_item_file(paths["items"], corpus.segments)
    write_alignment(paths["alignment"], corpus.alignment)
    write_feature_archive(paths["features"], corpus.features, corpus.hop, corpus.window)
    with open(paths["truth"], "w", encoding="utf-8", newline="") as fh:
        fh.write("id\tcount_of_its_type\n")
        for s in corpus.segments:
            fh.write(f"{s.id}\t{corpus.type_counts[s.transcription]}\n")
    with open(paths["config"], "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths


def read_truth(path) -> dict:
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        fh.readline()
        for line in fh:
            i, c = line.rstrip("\r\n").split("\t")
            out[i] = int(c)
    return out
