"""Corpus ingestion: item files, phone alignments, feature archives and segments.

Times are in seconds. A frame ``i`` of a feature matrix is centred at
``i * hop + window / 2``; a frame belongs to a segment when its centre lies
in the half-open interval ``[onset, offset)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AlignmentGapError,
    ConfigError,
    DegenerateSegmentError,
    MissingEntryError,
    ParseError,
    ValidationError,
    VocabularyError,
)

DEFAULT_HOP = 0.010
DEFAULT_WINDOW = 0.025
TIME_DECIMALS = 4

ITEM_HEADER = ("id", "file", "speaker", "onset", "offset", "phones")
ALIGNMENT_HEADER = ("file", "phone", "onset", "offset")

Transcription = tuple  # tuple[str, ...]; equality defines "same type"


def fmt_time(t: float) -> str:
    return f"{t:.{TIME_DECIMALS}f}"


def parse_transcription(text: str) -> tuple[str, ...] | None:
    phones = tuple(text.split())
    return phones or None


def check_phone(symbol: str) -> str:
    if not symbol or any(c.isspace() for c in symbol):
        raise ValidationError(f"invalid phone label {symbol!r}")
    return symbol


@dataclass(frozen=True)
class Segment:
    id: str
    file_id: str
    speaker: str
    onset: float
    offset: float
    transcription: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.offset > self.onset:
            raise ValidationError(
                f"segment {self.id}: offset {self.offset} <= onset {self.onset}")
        if self.onset < 0:
            raise ValidationError(f"segment {self.id}: negative onset")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    @property
    def label(self) -> str | None:
        return None if self.transcription is None else " ".join(self.transcription)


@dataclass(frozen=True)
class FeatureMatrix:
    frames: np.ndarray
    hop: float = DEFAULT_HOP
    window: float = DEFAULT_WINDOW

    def __post_init__(self):
        f = self.frames
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise DegenerateSegmentError(f"feature matrix must be T x n with T, n >= 1, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValidationError("feature matrix contains non-finite values")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def n(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class FrequencyTable:
    counts: dict
    total_segments: int

    def count(self, transcription) -> int:
        return self.counts.get(tuple(transcription), 0)


@dataclass(frozen=True)
class SegmentationConfig:
    """Segment enumeration settings.

    ``mode`` is ``"grid"`` (every onset/duration on the two strides) or
    ``"random"`` (``n_random`` uniform draws, reproducible from ``seed``).
    """
    min_dur: float = 0.07
    max_dur: float = 1.0
    mode: str = "grid"
    onset_stride: float = 0.04
    dur_stride: float = 0.04
    n_random: int = 1000
    seed: int = 0
    min_overlap: float = 0.5

    def __post_init__(self):
        if self.mode not in ("grid", "random"):
            raise ConfigError(f"unknown segmentation mode {self.mode!r}")
        if self.min_dur < 0.07 - 1e-12 or self.max_dur > 1.0 + 1e-12:
            raise ConfigError("durations must lie within [0.07 s, 1.0 s]")
        if self.min_dur > self.max_dur:
            raise ConfigError("min_dur exceeds max_dur")
        if self.onset_stride <= 0 or self.dur_stride <= 0:
            raise ConfigError("strides must be positive")
        if self.n_random < 0:
            raise ConfigError("n_random must be non-negative")
        if not 0 < self.min_overlap <= 1:
            raise ConfigError("min_overlap must be in (0, 1]")


# -- item files ---------------------------------------------------------------

def _rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            yield lineno, line.split("\t")


def load_item_file(path) -> list[Segment]:
    rows = _rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise ParseError("empty item file", path) from None
    if tuple(header) != ITEM_HEADER:
        raise ParseError(f"bad header {header!r}, expected {ITEM_HEADER!r}", path, 1)
    segments = []
    seen = {}
    for lineno, cols in rows:
        if len(cols) != len(ITEM_HEADER):
            raise ParseError(f"expected {len(ITEM_HEADER)} columns, got {len(cols)}", path, lineno)
        sid, file_id, speaker, onset, offset, phones = cols
        try:
            onset_f, offset_f = float(onset), float(offset)
        except ValueError:
            raise ParseError(f"non-numeric time in {onset!r}/{offset!r}", path, lineno) from None
        if not (math.isfinite(onset_f) and math.isfinite(offset_f)):
            raise ParseError("non-finite time", path, lineno)
        if offset_f <= onset_f:
            raise ParseError(f"offset {offset_f} <= onset {onset_f}", path, lineno)
        if onset_f < 0:
            raise ParseError("negative onset", path, lineno)
        if sid in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate id {sid!r} (first seen line {seen[sid]})")
        seen[sid] = lineno
        segments.append(Segment(sid, file_id, speaker, onset_f, offset_f, parse_transcription(phones)))
    return segments


def write_item_file(path, segments: Iterable[Segment]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(ITEM_HEADER) + "\n")
        for s in segments:
            phones = "" if s.transcription is None else " ".join(s.transcription)
            fh.write(f"{s.id}\t{s.file_id}\t{s.speaker}\t{fmt_time(s.onset)}\t{fmt_time(s.offset)}\t{phones}\n")


# -- alignments -----------------------------------------------------------------

@dataclass(frozen=True)
class FileAlignment:
    """Contiguous, sorted phone intervals of one file."""
    phones: tuple[str, ...]
    onsets: np.ndarray
    offsets: np.ndarray

    @property
    def start(self) -> float:
        return float(self.onsets[0])

    @property
    def end(self) -> float:
        return float(self.offsets[-1])


def _make_alignment(file_id, intervals, path=None) -> FileAlignment:
    phones = tuple(p for p, _, _ in intervals)
    on = np.array([a for _, a, _ in intervals], dtype=np.float64)
    off = np.array([b for _, _, b in intervals], dtype=np.float64)
    if np.any(off <= on):
        raise ValidationError(f"{file_id}: empty or inverted phone interval")
    if np.any(np.abs(on[1:] - off[:-1]) > 1e-9):
        raise ValidationError(f"{path or ''} {file_id}: phone intervals must be sorted, contiguous and non-overlapping")
    return FileAlignment(phones, on, off)


def load_alignment(path) -> dict[str, FileAlignment]:
    rows = _rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise ParseError("empty alignment file", path) from None
    if tuple(header) != ALIGNMENT_HEADER:
        raise ParseError(f"bad header {header!r}, expected {ALIGNMENT_HEADER!r}", path, 1)
    by_file: dict[str, list] = {}
    for lineno, cols in rows:
        if len(cols) != len(ALIGNMENT_HEADER):
            raise ParseError(f"expected {len(ALIGNMENT_HEADER)} columns, got {len(cols)}", path, lineno)
        file_id, phone, onset, offset = cols
        try:
            check_phone(phone)
            by_file.setdefault(file_id, []).append((phone, float(onset), float(offset)))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return {f: _make_alignment(f, iv, path) for f, iv in by_file.items()}


def write_alignment(path, alignment: Mapping[str, FileAlignment]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(ALIGNMENT_HEADER) + "\n")
        for file_id in sorted(alignment):
            al = alignment[file_id]
            for p, a, b in zip(al.phones, al.onsets, al.offsets):
                fh.write(f"{file_id}\t{p}\t{fmt_time(a)}\t{fmt_time(b)}\n")


# -- feature archives ---------------------------------------------------------------

class FeatureStore:
    """Read-only in-memory view of a feature archive directory."""

    def __init__(self, matrices: Mapping[str, np.ndarray], hop=DEFAULT_HOP, window=DEFAULT_WINDOW):
        dims = {m.shape[1] for m in matrices.values()}
        if len(dims) > 1:
            raise ValidationError(f"inconsistent feature dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0
        self.hop = float(hop)
        self.window = float(window)
        self._mats = {}
        for k, m in matrices.items():
            m = np.asarray(m)
            m.setflags(write=False)
            self._mats[k] = m

    def __contains__(self, file_id):
        return file_id in self._mats

    def __getitem__(self, file_id) -> np.ndarray:
        try:
            return self._mats[file_id]
        except KeyError:
            raise MissingEntryError(f"unknown file id {file_id!r} in feature archive") from None

    def file_ids(self):
        return sorted(self._mats)

    def durations(self) -> dict[str, float]:
        """Span covered by frame centres, rounded to the time grid."""
        return {f: round(m.shape[0] * self.hop + (self.window - self.hop) / 2, TIME_DECIMALS)
                for f, m in self._mats.items()}

    @classmethod
    def load(cls, directory) -> "FeatureStore":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise MissingEntryError(f"feature archive manifest not found: {manifest_path}")
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        try:
            dim = int(manifest["dim"])
            dtype = manifest["dtype"]
            files = manifest["files"]
            hop, window = float(manifest["hop_s"]), float(manifest["window_s"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed manifest: {exc}", manifest_path) from None
        if dtype != "f32le":
            raise ParseError(f"unsupported dtype {dtype!r}", manifest_path)
        mats = {}
        for entry in files:
            raw = np.fromfile(directory / entry["path"], dtype="<f4")
            frames = int(entry["frames"])
            if raw.size != frames * dim:
                raise ParseError(f"{entry['path']}: expected {frames}x{dim} floats, found {raw.size}",
                                 manifest_path)
            mats[entry["id"]] = raw.reshape(frames, dim)
        return cls(mats, hop, window)


def write_feature_archive(directory, matrices: Mapping[str, np.ndarray],
                          hop=DEFAULT_HOP, window=DEFAULT_WINDOW) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dims = {np.asarray(m).shape[1] for m in matrices.values()}
    if len(dims) != 1:
        raise ValidationError("feature archive needs a single non-empty dimension")
    files = []
    for i, file_id in enumerate(sorted(matrices)):
        m = np.ascontiguousarray(matrices[file_id], dtype="<f4")
        name = f"{i:05d}.f32"
        m.tofile(directory / name)
        files.append({"id": file_id, "path": name, "frames": int(m.shape[0])})
    manifest = {"dim": dims.pop(), "hop_s": hop, "window_s": window, "dtype": "f32le", "files": files}
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- slicing ------------------------------------------------------------------------

def frame_centers(T: int, hop=DEFAULT_HOP, window=DEFAULT_WINDOW) -> np.ndarray:
    return np.arange(T) * hop + window / 2


def frame_range(T: int, onset: float, offset: float, hop=DEFAULT_HOP, window=DEFAULT_WINDOW):
    centers = frame_centers(T, hop, window)
    return (int(np.searchsorted(centers, onset, side="left")),
            int(np.searchsorted(centers, offset, side="left")))


def slice_features(store: FeatureStore, seg: Segment) -> FeatureMatrix:
    mat = store[seg.file_id]
    lo, hi = frame_range(mat.shape[0], seg.onset, seg.offset, store.hop, store.window)
    if hi <= lo:
        raise DegenerateSegmentError(
            f"segment {seg.id} [{seg.onset}, {seg.offset}) contains no frame centre")
    return FeatureMatrix(mat[lo:hi], store.hop, store.window)


# -- enumeration and labelling ------------------------------------------------------------

def _grid(start, stop, step):
    """Values start + i*step <= stop, computed without accumulated drift."""
    n = int(math.floor((stop - start) / step + 1e-9))
    return [round(start + i * step, TIME_DECIMALS) for i in range(n + 1)] if stop >= start - 1e-12 else []


def enumerate_segments(durations: Mapping[str, float], cfg: SegmentationConfig,
                       speakers: Mapping[str, str] | None = None) -> list[Segment]:
    speakers = speakers or {}
    files = sorted(f for f, d in durations.items() if d + 1e-9 >= cfg.min_dur)
    segments = []
    if cfg.mode == "grid":
        durs = _grid(cfg.min_dur, cfg.max_dur, cfg.dur_stride)
        for f in files:
            total = durations[f]
            for onset in _grid(0.0, total - cfg.min_dur, cfg.onset_stride):
                for d in durs:
                    offset = round(onset + d, TIME_DECIMALS)
                    if offset > total + 1e-9:
                        break
                    segments.append(Segment(f"{f}_{fmt_time(onset)}_{fmt_time(offset)}", f,
                                            speakers.get(f, f), onset, offset))
        return segments

    if not files or cfg.n_random == 0:
        return segments
    rng = np.random.default_rng(cfg.seed)
    lengths = np.array([durations[f] for f in files])
    file_idx = rng.choice(len(files), size=cfg.n_random, p=lengths / lengths.sum())
    u_dur = rng.random(cfg.n_random)
    u_on = rng.random(cfg.n_random)
    seen = Counter()
    for fi, ud, uo in zip(file_idx, u_dur, u_on):
        f = files[fi]
        total = durations[f]
        hi = min(cfg.max_dur, total)
        d = round(cfg.min_dur + ud * (hi - cfg.min_dur), TIME_DECIMALS)
        d = min(max(d, cfg.min_dur), hi)
        onset = round(uo * (total - d), TIME_DECIMALS)
        offset = round(onset + d, TIME_DECIMALS)
        if offset > total:
            onset = round(onset - (offset - total), TIME_DECIMALS)
            offset = round(onset + d, TIME_DECIMALS)
        base = f"{f}_{fmt_time(onset)}_{fmt_time(offset)}"
        seen[base] += 1
        sid = base if seen[base] == 1 else f"{base}#{seen[base] - 1}"
        segments.append(Segment(sid, f, speakers.get(f, f), onset, offset))
    return segments


def _alignment_for(alignment, file_id) -> FileAlignment:
    if isinstance(alignment, FileAlignment):
        return alignment
    try:
        return alignment[file_id]
    except KeyError:
        raise MissingEntryError(f"no alignment for file {file_id!r}") from None


def transcribe_segment(seg: Segment, alignment, min_overlap: float = 0.5) -> tuple[str, ...]:
    """Phones overlapping the segment by at least ``min_overlap`` of their own length.

    ``alignment`` is either the ``FileAlignment`` of the segment's file or a
    mapping from file id to alignment.
    """
    al = _alignment_for(alignment, seg.file_id)
    if seg.onset < al.start - 1e-9 or seg.offset > al.end + 1e-9:
        raise AlignmentGapError(
            f"segment {seg.id} [{seg.onset}, {seg.offset}) not covered by alignment "
            f"[{al.start}, {al.end})")
    overlap = np.minimum(al.offsets, seg.offset) - np.maximum(al.onsets, seg.onset)
    keep = overlap >= min_overlap * (al.offsets - al.onsets) - 1e-9
    phones = tuple(p for p, k in zip(al.phones, keep) if k)
    if not phones:
        raise ValidationError(f"segment {seg.id}: no phone reaches the overlap threshold")
    return phones


def label_segments(segments: Sequence[Segment], alignment, min_overlap=0.5) -> list[Segment]:
    """Attach transcriptions; segments with no qualifying phone stay unlabeled."""
    out = []
    for s in segments:
        try:
            t = transcribe_segment(s, alignment, min_overlap)
        except ValidationError:
            t = None
        out.append(Segment(s.id, s.file_id, s.speaker, s.onset, s.offset, t))
    return out


def build_frequency_table(segments: Iterable[Segment]) -> FrequencyTable:
    counts = Counter()
    n = 0
    for s in segments:
        if s.transcription is None:
            raise ValidationError(f"segment {s.id} is unlabeled")
        counts[s.transcription] += 1
        n += 1
    return FrequencyTable(dict(counts), n)


def one_hot_frames(seg: Segment, alignment, inventory: Sequence[str], T: int | None = None,
                   hop=DEFAULT_HOP, window=DEFAULT_WINDOW) -> FeatureMatrix:
    """Phone-indicator frames on the same frame grid as ``slice_features``.

    ``T`` is the frame count of the file; when omitted, frames are laid out
    as far as the alignment extends.
    """
    al = _alignment_for(alignment, seg.file_id)
    index = {p: i for i, p in enumerate(inventory)}
    missing = sorted(set(al.phones) - index.keys())
    if missing:
        raise VocabularyError(f"phones not in inventory: {missing}")
    if T is None:
        T = int(np.searchsorted(frame_centers(int(al.end / hop) + 2, hop, window), al.end, side="left"))
    lo, hi = frame_range(T, seg.onset, seg.offset, hop, window)
    if hi <= lo:
        raise DegenerateSegmentError(
            f"segment {seg.id} [{seg.onset}, {seg.offset}) contains no frame centre")
    centers = frame_centers(T, hop, window)[lo:hi]
    # half-open intervals: a centre on a boundary belongs to the later phone
    which = np.searchsorted(al.onsets, centers, side="right") - 1
    if np.any(which < 0) or np.any(centers >= al.offsets[np.clip(which, 0, None)]):
        raise AlignmentGapError(f"segment {seg.id}: frame centre outside the alignment")
    cols = np.array([index[al.phones[w]] for w in which])
    frames = np.zeros((hi - lo, len(inventory)))
    frames[np.arange(hi - lo), cols] = 1.0
    return FeatureMatrix(frames, hop, window)


def phone_inventory(alignment: Mapping[str, FileAlignment]) -> list[str]:
    return sorted({p for al in alignment.values() for p in al.phones})


def sha256_file(path) -> str:
    """Content digest of a file, or of every file below a directory."""
    h = hashlib.sha256()
    path = Path(path)
    paths = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in paths:
        if path.is_dir():
            h.update(os.fsencode(p.relative_to(path).as_posix()))
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()
