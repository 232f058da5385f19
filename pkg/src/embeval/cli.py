"""Command-line entry point: ``embeval <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric or degenerate-task error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .abx import AbxConfig, abx_score
from .errors import ConfigError, EmbevalError, ValidationError
from .freq import DensityConfig, effective_k, estimate_frequencies, truth_counts
from .gd_embed import GdConfig, embed_corpus, load_embedding_archive
from .knn import build_graph, build_index
from .mapscore import MapConfig, map_score
from .pairs import gold_pairs, mine_pairs, write_pairs
from .pipeline import PipelineError, correlate, digest, read_run_records, run_pipeline
from .synth import SynthConfig, generate_corpus, read_truth

log = logging.getLogger("embeval")


def _emb_inputs(path) -> dict:
    return {"embeddings": digest(path)}


def cmd_synth(a):
    cfg = SynthConfig(num_types=a.num_types, total_tokens=a.total_tokens, zipf_exponent=a.zipf,
                      noise_sigma=a.noise, inventory_size=a.inventory, speakers=a.speakers,
                      prototype_dim=a.dim, seed=a.seed)
    paths = generate_corpus(cfg, a.out)
    print(f"wrote {paths['items']}")


def cmd_segment(a):
    store = corpus_mod.FeatureStore.load(a.features)
    cfg = corpus_mod.SegmentationConfig(min_dur=a.min_dur, max_dur=a.max_dur, mode=a.mode,
                                        onset_stride=a.onset_stride, dur_stride=a.dur_stride,
                                        n_random=a.n_random, seed=a.seed, min_overlap=a.min_overlap)
    segs = corpus_mod.enumerate_segments(store.durations(), cfg)
    if a.alignment:
        segs = corpus_mod.label_segments(segs, corpus_mod.load_alignment(a.alignment), cfg.min_overlap)
    corpus_mod.write_item_file(a.out, segs)
    print(f"wrote {len(segs)} segments to {a.out}")


def cmd_embed(a):
    store = corpus_mod.FeatureStore.load(a.features)
    segs = corpus_mod.load_item_file(a.items)
    alignment = corpus_mod.load_alignment(a.alignment) if a.alignment else None
    inventory = corpus_mod.phone_inventory(alignment) if alignment is not None else None
    emb = embed_corpus(store, segs, a.featurizer, GdConfig(a.l, a.sigma_ratio), alignment, inventory,
                       workers=a.threads)
    emb.save(a.out)
    print(f"embedded {len(emb)} segments into {a.out}")


def cmd_abx(a):
    emb = load_embedding_archive(a.emb)
    cfg = AbxConfig(a.distance, a.max_triplets, a.seed, a.speaker_mode)
    rep = abx_score(emb, cfg)
    rep.write(a.out, {"inputs": _emb_inputs(a.emb)})
    print(f"abx error {rep.global_error:.6f}")


def cmd_map(a):
    emb = load_embedding_archive(a.emb)
    rep = map_score(emb, MapConfig(a.distance, a.max_pairs, a.seed))
    rep.write(a.out, {"inputs": _emb_inputs(a.emb)})
    print(f"map {rep.average_precision:.6f}")


def cmd_freq(a):
    queries = load_embedding_archive(a.emb)
    index_set = load_embedding_archive(a.index) if a.index else queries
    self_exclude = a.index is None
    cfg = DensityConfig(a.k, tuple(a.beta_grid) if a.beta_grid else None, a.distance)
    k, clamped = effective_k(cfg.k, len(index_set), self_exclude)
    index = build_index(index_set, cfg.distance)
    graph = build_graph(index, queries, k, self_exclude, workers=a.threads)
    tune_graph = None
    if not self_exclude:
        tune_graph = build_graph(index, index_set, effective_k(cfg.k, len(index_set), True)[0], True,
                                 workers=a.threads)
    truth = None
    inputs = _emb_inputs(a.emb)
    if a.truth:
        truth = read_truth(a.truth)
        inputs["truth"] = digest(a.truth)
    elif all(t is not None for t in queries.labels) and all(t is not None for t in index_set.labels):
        truth = truth_counts(queries, index_set.labels)
    if a.index:
        inputs["index"] = digest(a.index)
    rep = estimate_frequencies(graph, cfg, truth, tune_graph, clamped)
    rep.write(a.out, {"inputs": inputs, "self_exclude": self_exclude, "block_sizes": index.block_sizes})
    msg = f"beta {rep.chosen_beta:.6g}"
    if rep.r_squared is not None:
        msg += f", R2 {rep.r_squared:.6f}"
    print(msg)


def cmd_mine_pairs(a):
    emb = load_embedding_archive(a.emb)
    segs = corpus_mod.load_item_file(a.items) if a.items else None
    pairs = mine_pairs(build_index(emb, "cosine"), emb, a.threshold, a.k, segs, workers=a.threads)
    write_pairs(a.out, pairs)
    print(f"wrote {len(pairs)} pairs to {a.out}")


def cmd_gold_pairs(a):
    segs = corpus_mod.load_item_file(a.items)
    if any(s.transcription is None for s in segs):
        raise ValidationError("gold pairs need every item labelled")
    pairs = gold_pairs(segs, a.n_pos, a.n_neg, a.seed)
    write_pairs(a.out, pairs)
    print(f"wrote {len(pairs)} pairs to {a.out}")


def cmd_correlate(a):
    records = []
    for p in a.records:
        records.extend(read_run_records(p))
    rep = correlate(records)
    rep.write(a.out)
    print(f"correlated {rep.n_models} records")


def cmd_run(a):
    try:
        records = run_pipeline(a.config, threads=a.threads_override)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    for r in records:
        print(f"{r.model_name}\tabx={r.abx_error:.6f}\tmap={r.map_ap:.6f}\tfreq_r2={r.freq_r2:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="embeval", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="upper bound on worker threads (default 1; overrides the config for run)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    syn_defaults = SynthConfig()

    s = sub.add_parser("synth", help="generate a synthetic Zipfian corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--num-types", type=int, default=syn_defaults.num_types)
    s.add_argument("--total-tokens", type=int, default=syn_defaults.total_tokens)
    s.add_argument("--zipf", type=float, default=syn_defaults.zipf_exponent)
    s.add_argument("--noise", type=float, default=syn_defaults.noise_sigma)
    s.add_argument("--inventory", type=int, default=syn_defaults.inventory_size)
    s.add_argument("--speakers", type=int, default=syn_defaults.speakers)
    s.add_argument("--dim", type=int, default=syn_defaults.prototype_dim)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    seg_defaults = corpus_mod.SegmentationConfig()
    s = sub.add_parser("segment", help="enumerate candidate segments over a feature archive")
    s.add_argument("--features", required=True)
    s.add_argument("--alignment")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("grid", "random"), default=seg_defaults.mode)
    s.add_argument("--min-dur", type=float, default=seg_defaults.min_dur)
    s.add_argument("--max-dur", type=float, default=seg_defaults.max_dur)
    s.add_argument("--onset-stride", type=float, default=seg_defaults.onset_stride)
    s.add_argument("--dur-stride", type=float, default=seg_defaults.dur_stride)
    s.add_argument("--n-random", type=int, default=seg_defaults.n_random)
    s.add_argument("--min-overlap", type=float, default=seg_defaults.min_overlap)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("embed", help="Gaussian-downsampled embeddings of an item file")
    s.add_argument("--items", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--alignment")
    s.add_argument("--featurizer", choices=("real", "one_hot"), default="real")
    s.add_argument("--l", type=int, default=GdConfig().l)
    s.add_argument("--sigma-ratio", type=float, default=GdConfig().sigma_ratio)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("eval-abx", help="ABX discrimination error")
    s.add_argument("--emb", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--distance", choices=("cosine", "euclidean"), default="cosine")
    s.add_argument("--max-triplets", type=int, default=AbxConfig().max_triplets_per_contrast)
    s.add_argument("--speaker-mode", choices=("any", "within_speaker"), default="any")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_abx)

    s = sub.add_parser("eval-map", help="same-different mean average precision")
    s.add_argument("--emb", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--distance", choices=("cosine", "euclidean"), default="cosine")
    s.add_argument("--max-pairs", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("freq", help="k-NN kernel density frequency estimation")
    s.add_argument("--emb", required=True, help="query embeddings")
    s.add_argument("--index", help="reference embeddings (default: the queries, self-excluded)")
    s.add_argument("--truth", help="TSV of id and true count")
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=DensityConfig().k)
    s.add_argument("--distance", choices=("cosine", "euclidean"), default="cosine")
    s.add_argument("--beta-grid", type=float, nargs="+", help="multipliers of 1/median(d^2)")
    s.set_defaults(func=cmd_freq)

    s = sub.add_parser("mine-pairs", help="pairs above a cosine-similarity threshold")
    s.add_argument("--emb", required=True)
    s.add_argument("--items", help="item file used to drop overlapping segments")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.85)
    s.add_argument("--k", type=int, default=50)
    s.set_defaults(func=cmd_mine_pairs)

    s = sub.add_parser("gold-pairs", help="sample same/different transcription pairs")
    s.add_argument("--items", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-pos", type=int, default=1000)
    s.add_argument("--n-neg", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gold_pairs)

    s = sub.add_parser("correlate", help="cross-metric R2 matrix over run records")
    s.add_argument("records", nargs="+", help="run_records.tsv files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("run", help="run the pipeline described by a JSON config")
    s.add_argument("config")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if a.threads is not None and a.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return ConfigError.exit_code
    a.threads_override = a.threads
    a.threads = a.threads or 1
    try:
        if a.command == "run":
            return a.func(a)
        if hasattr(a, "out") and a.command in ("eval-abx", "eval-map", "freq", "correlate"):
            Path(a.out).mkdir(parents=True, exist_ok=True)
        a.func(a)
    except EmbevalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
