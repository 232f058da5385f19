"""Declarative end-to-end runs and the cross-metric correlation report."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .abx import AbxConfig, abx_score
from .corpus import FeatureStore, SegmentationConfig
from .errors import (ConfigError, DegenerateCorrelationError, EmbevalError, MissingEntryError, ParseError,
                     ValidationError)
from .freq import DensityConfig, effective_k, estimate_frequencies, squared_pearson, truth_counts
from .gd_embed import EmbeddingSet, GdConfig, embed_corpus
from .knn import build_graph, build_index
from .mapscore import MapConfig, map_score
from .pairs import gold_pairs, mine_pairs, write_pairs
from .synth import SynthConfig, generate_corpus, read_truth

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("freq", "map", "abx")
SIGN_NOTE = "ABX error is negated before correlating so every column reads higher-is-better"

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "output_dir": "run",
    "corpus": {"items": None, "alignment": None, "features": None, "truth": None, "synth": None},
    "segmentation": {"mode": "items", "min_dur": 0.07, "max_dur": 1.0, "onset_stride": 0.04,
                     "dur_stride": 0.04, "n_random": 1000, "min_overlap": 0.5},
    "gd": {"l": 10, "sigma_ratio": 0.4,
           "models": [{"name": "gd-real", "featurizer": "real"}]},
    "abx": {"enabled": True, "distance": "cosine", "max_triplets_per_contrast": 1000,
            "speaker_mode": "any", "max_items": 2000},
    "map": {"enabled": True, "distance": "cosine", "max_pairs": None, "max_items": 2000},
    "freq": {"enabled": True, "k": 2000, "distance": "cosine", "beta_grid": None,
             "heldout_fraction": 0.0, "tune_on": "index"},
    "pairs": {"enabled": False, "threshold": 0.85, "k": 50, "n_pos": 1000, "n_neg": 1000},
}


# -- correlation -------------------------------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    model_name: str
    abx_error: float
    map_ap: float
    freq_r2: float


@dataclass
class CorrelationReport:
    matrix: np.ndarray
    n_models: int
    columns: tuple = METRIC_COLUMNS

    def to_json(self) -> dict:
        return {"columns": list(self.columns), "matrix": self.matrix.tolist(),
                "n_models": self.n_models, "notes": [SIGN_NOTE]}

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _dump_json(directory / "correlation.json", self.to_json())
        with open(directory / "correlation.tsv", "w", encoding="utf-8", newline="") as fh:
            fh.write("\t" + "\t".join(self.columns) + "\n")
            for name, row in zip(self.columns, self.matrix):
                fh.write(name + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def correlate(records) -> CorrelationReport:
    """Pairwise squared Pearson correlation of frequency R2, MAP and (negated) ABX."""
    records = list(records)
    if len(records) < 3:
        raise DegenerateCorrelationError(f"correlation needs at least 3 records, got {len(records)}")
    cols = {
        "freq": np.array([r.freq_r2 for r in records], dtype=np.float64),
        "map": np.array([r.map_ap for r in records], dtype=np.float64),
        "abx": -np.array([r.abx_error for r in records], dtype=np.float64),
    }
    for name, v in cols.items():
        if not np.all(np.isfinite(v)):
            raise DegenerateCorrelationError(f"column {name} has missing or non-finite values")
        if np.ptp(v) == 0:
            raise DegenerateCorrelationError(f"column {name} is constant")
    m = np.eye(3)
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = METRIC_COLUMNS[i], METRIC_COLUMNS[j]
            m[i, j] = m[j, i] = squared_pearson(cols[a], cols[b], (a, b))
    return CorrelationReport(m, len(records))


def read_run_records(path) -> list[RunRecord]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        if header != ["model", "abx_error", "map_ap", "freq_r2"]:
            raise ParseError(f"bad header {header!r}", path, 1)
        for lineno, line in enumerate(fh, start=2):
            cols = line.rstrip("\r\n").split("\t")
            if len(cols) != 4:
                raise ParseError("expected 4 columns", path, lineno)
            try:
                out.append(RunRecord(cols[0], float(cols[1]), float(cols[2]), float(cols[3])))
            except ValueError:
                raise ParseError("non-numeric metric", path, lineno) from None
    return out


def write_run_records(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("model\tabx_error\tmap_ap\tfreq_r2\n")
        for r in records:
            fh.write(f"{r.model_name}\t{r.abx_error!r}\t{r.map_ap!r}\t{r.freq_r2!r}\n")


# -- helpers ---------------------------------------------------------------------------

def _dump_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def digest(path) -> str:
    return corpus_mod.sha256_file(path)


def digest_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def resolve_config(raw: dict) -> dict:
    """Merge a user config over the defaults; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if key not in cfg:
            raise ConfigError(f"unknown config section {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            for sub, v in value.items():
                if sub not in cfg[key]:
                    raise ConfigError(f"unknown key {key}.{sub}")
                cfg[key][sub] = v
        else:
            cfg[key] = value
    return cfg


def _dataclass_from(cls, section: dict, **extra):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section.items() if k in names}
    kw.update(extra)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def subsample(emb: EmbeddingSet, max_items, seed: int) -> EmbeddingSet:
    if max_items is None or len(emb) <= max_items:
        return emb
    rng = np.random.default_rng(seed)
    return emb.subset(np.sort(rng.choice(len(emb), size=int(max_items), replace=False)))


# -- pipeline ----------------------------------------------------------------------

class Stage:
    """Context manager tagging failures with the stage name."""

    def __init__(self, name, run):
        self.name = name
        self.run = run

    def __enter__(self):
        log.info("stage %s", self.name)
        self.run.stage = self.name
        return self

    def __exit__(self, *exc):
        return False


class PipelineError(EmbevalError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
        super().__init__(f"stage {stage} failed: {cause}")


class Run:
    def __init__(self, cfg: dict, base_dir: Path):
        self.cfg = cfg
        self.base = base_dir
        self.out = (base_dir / cfg["output_dir"]).resolve()
        self.stage = "config"

    def path(self, p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else (self.base / p)

    def load_corpus(self):
        c = self.cfg["corpus"]
        if c["synth"] is not None:
            syn = _dataclass_from(SynthConfig, c["synth"])
            paths = generate_corpus(syn, self.out / "corpus")
            items, alignment, features, truth = (paths["items"], paths["alignment"],
                                                 paths["features"], paths["truth"])
        else:
            items, alignment, features, truth = (self.path(c["items"]), self.path(c["alignment"]),
                                                 self.path(c["features"]), self.path(c["truth"]))
        if features is None:
            raise ConfigError("corpus.features is required")
        for name, p in (("features", features), ("items", items), ("alignment", alignment),
                        ("truth", truth)):
            if p is not None and not Path(p).exists():
                raise MissingEntryError(f"corpus.{name} not found: {p}")
        store = FeatureStore.load(features)
        self.inputs = {"features": digest(features)}
        al = None
        if alignment is not None:
            al = corpus_mod.load_alignment(alignment)
            self.inputs["alignment"] = digest(alignment)
        segs = None
        if items is not None:
            segs = corpus_mod.load_item_file(items)
            self.inputs["items"] = digest(items)
        self.truth = None
        if truth is not None:
            self.truth = read_truth(truth)
            self.inputs["truth"] = digest(truth)
        return store, al, segs

    def segment(self, store, alignment, items):
        s = self.cfg["segmentation"]
        if s["mode"] == "items":
            if items is None:
                raise ConfigError("segmentation.mode 'items' needs corpus.items")
            return items
        seg_cfg = _dataclass_from(SegmentationConfig, s, seed=self.cfg["seed"], n_random=s["n_random"])
        speakers = {}
        if items is not None:
            speakers = {x.file_id: x.speaker for x in items}
        segs = corpus_mod.enumerate_segments(store.durations(), seg_cfg, speakers)
        if alignment is not None:
            segs = corpus_mod.label_segments(segs, alignment, seg_cfg.min_overlap)
        self.truth = None  # truth table of the item file does not describe new segments
        return segs

    def run(self) -> list[RunRecord]:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        failed = self.out / "FAILED"
        if failed.exists():
            failed.unlink()
        _dump_json(self.out / "config.resolved.json", cfg)
        try:
            return self._run()
        except EmbevalError as exc:
            (self.out / "FAILED").write_text(f"stage: {self.stage}\n{type(exc).__name__}: {exc}\n")
            raise PipelineError(self.stage, exc) from exc
        except (OSError, ValueError, KeyError) as exc:
            (self.out / "FAILED").write_text(f"stage: {self.stage}\n{type(exc).__name__}: {exc}\n")
            raise PipelineError(self.stage, exc) from exc

    def _run(self) -> list[RunRecord]:
        cfg = self.cfg
        seed = cfg["seed"]
        threads = int(cfg["threads"])
        with Stage("corpus", self):
            store, alignment, items = self.load_corpus()
        with Stage("segment", self):
            segs = self.segment(store, alignment, items)
            if not segs:
                raise ValidationError("segmentation produced no segments")
            corpus_mod.write_item_file(self.out / "segments.tsv", segs)
            self.inputs["segments"] = digest(self.out / "segments.tsv")
        gd = _dataclass_from(GdConfig, cfg["gd"])
        inventory = corpus_mod.phone_inventory(alignment) if alignment is not None else None
        records = []
        for model in cfg["gd"]["models"]:
            name = model["name"]
            featurizer = model.get("featurizer", "real")
            mcfg = GdConfig(model.get("l", gd.l), model.get("sigma_ratio", gd.sigma_ratio))
            mdir = self.out / "models" / name
            with Stage(f"embed[{name}]", self):
                emb = embed_corpus(store, segs, featurizer, mcfg, alignment, inventory, workers=threads)
                emb.save(mdir / "embeddings")
                prov = {"inputs": {**self.inputs, "embeddings": digest(mdir / "embeddings")},
                        "config_sha256": digest_obj(cfg),
                        "model": {"name": name, "featurizer": featurizer, "l": mcfg.l,
                                  "sigma_ratio": mcfg.sigma_ratio},
                        "notes_gd": "embeddings are not length-normalised"}
            labelled = all(t is not None for t in emb.labels)
            abx_err = map_ap = r2 = float("nan")
            if cfg["abx"]["enabled"]:
                with Stage(f"abx[{name}]", self):
                    acfg = _dataclass_from(AbxConfig, cfg["abx"], seed=seed)
                    sub = subsample(_labelled(emb), cfg["abx"]["max_items"], seed)
                    rep = abx_score(sub, acfg)
                    rep.write(mdir, {**prov, "items_evaluated": len(sub)})
                    abx_err = rep.global_error
            if cfg["map"]["enabled"]:
                with Stage(f"map[{name}]", self):
                    mc = _dataclass_from(MapConfig, cfg["map"], seed=seed)
                    sub = subsample(_labelled(emb), cfg["map"]["max_items"], seed)
                    rep = map_score(sub, mc)
                    rep.write(mdir, {**prov, "items_evaluated": len(sub)})
                    map_ap = rep.average_precision
            if cfg["freq"]["enabled"]:
                with Stage(f"freq[{name}]", self):
                    r2 = self.freq(emb, labelled, mdir, prov, seed, threads)
            if cfg["pairs"]["enabled"]:
                with Stage(f"pairs[{name}]", self):
                    p = cfg["pairs"]
                    index = build_index(emb, "cosine")
                    mined = mine_pairs(index, emb, p["threshold"], p["k"], segs, workers=threads)
                    write_pairs(mdir / "pairs_mined.tsv", mined)
                    if labelled:
                        write_pairs(mdir / "pairs_gold.tsv", gold_pairs(segs, p["n_pos"], p["n_neg"], seed))
            records.append(RunRecord(name, abx_err, map_ap, r2))
        with Stage("report", self):
            write_run_records(self.out / "run_records.tsv", records)
            complete = [r for r in records if all(np.isfinite([r.abx_error, r.map_ap, r.freq_r2]))]
            if len(complete) >= 3:
                correlate(complete).write(self.out)
        return records

    def freq(self, emb, labelled, mdir, prov, seed, threads):
        f = self.cfg["freq"]
        dcfg = _dataclass_from(DensityConfig, f)
        frac = float(f["heldout_fraction"])
        if not 0 <= frac < 1:
            raise ConfigError("freq.heldout_fraction must be in [0, 1)")
        if f["tune_on"] not in ("index", "queries"):
            raise ConfigError("freq.tune_on must be 'index' or 'queries'")
        truth = None
        if self.truth is not None:
            truth = self.truth
        elif labelled:
            truth = truth_counts(emb)
        if frac == 0:
            index_set = query_set = emb
            self_exclude = True
        else:
            rng = np.random.default_rng(seed)
            held = np.zeros(len(emb), bool)
            held[rng.choice(len(emb), size=max(1, int(round(frac * len(emb)))), replace=False)] = True
            index_set = emb.subset(np.flatnonzero(~held))
            query_set = emb.subset(np.flatnonzero(held))
            self_exclude = False
        k, clamped = effective_k(dcfg.k, len(index_set), self_exclude)
        index = build_index(index_set, dcfg.distance)
        graph = build_graph(index, query_set, k, self_exclude, workers=threads)
        tune_graph = None
        if frac > 0 and f["tune_on"] == "index":
            k_self, _ = effective_k(dcfg.k, len(index_set), True)
            tune_graph = build_graph(index, index_set, k_self, True, workers=threads)
        if truth is not None and frac > 0 and self.truth is None:
            # true counts come from the indexed (reference) set
            truth = truth_counts(query_set, index_set.labels)
        rep = estimate_frequencies(graph, dcfg, truth, tune_graph, clamped)
        rep.write(mdir, {**prov, "index_size": len(index_set), "queries": len(query_set),
                         "self_exclude": self_exclude, "block_sizes": index.block_sizes,
                         "tune_on": f["tune_on"] if frac > 0 else "index"})
        return float("nan") if rep.r_squared is None else rep.r_squared


def _labelled(emb: EmbeddingSet) -> EmbeddingSet:
    keep = [i for i, t in enumerate(emb.labels) if t is not None]
    return emb if len(keep) == len(emb) else emb.subset(keep)


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return resolve_config(raw), path.parent


def run_pipeline(config_path, threads: int | None = None) -> list[RunRecord]:
    """Run every configured stage; ``threads`` overrides the config's worker bound."""
    cfg, base = load_config(config_path)
    if threads is not None:
        cfg["threads"] = int(threads)
    return Run(cfg, base).run()
