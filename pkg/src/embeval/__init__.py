"""Fixed-size speech embeddings and the metrics used to compare them."""

from .abx import AbxConfig, AbxReport, abx_score, triplet_decision
from .corpus import (FeatureMatrix, FeatureStore, FrequencyTable, Segment, SegmentationConfig,
                     build_frequency_table, enumerate_segments, load_alignment, load_item_file,
                     one_hot_frames, slice_features, transcribe_segment)
from .freq import (DensityConfig, FreqReport, density_estimate, estimate_all,
                   kmeans_frequency_baseline, r_squared_log, tune_beta)
from .gd_embed import Embedding, EmbeddingSet, GdConfig, embed_corpus, gd_embed
from .knn import Index, KnnGraph, build_graph, build_index, query
from .mapscore import MapConfig, MapReport, map_score
from .pairs import Pair, SiameseConfig, gold_pairs, mine_pairs, mse, siamese_gradient, siamese_objective
from .pipeline import CorrelationReport, RunRecord, correlate, run_pipeline
from .synth import SynthConfig, generate_corpus

__all__ = [
    "AbxConfig",
    "AbxReport",
    "CorrelationReport",
    "DensityConfig",
    "Embedding",
    "EmbeddingSet",
    "FeatureMatrix",
    "FeatureStore",
    "FreqReport",
    "FrequencyTable",
    "GdConfig",
    "Index",
    "KnnGraph",
    "MapConfig",
    "MapReport",
    "Pair",
    "RunRecord",
    "Segment",
    "SegmentationConfig",
    "SiameseConfig",
    "SynthConfig",
    "__version__",
    "abx_score",
    "build_frequency_table",
    "build_graph",
    "build_index",
    "correlate",
    "density_estimate",
    "embed_corpus",
    "enumerate_segments",
    "estimate_all",
    "gd_embed",
    "generate_corpus",
    "gold_pairs",
    "kmeans_frequency_baseline",
    "load_alignment",
    "load_item_file",
    "map_score",
    "mine_pairs",
    "mse",
    "one_hot_frames",
    "query",
    "r_squared_log",
    "run_pipeline",
    "siamese_gradient",
    "siamese_objective",
    "slice_features",
    "transcribe_segment",
    "triplet_decision",
    "tune_beta",
]

__version__ = "0.1.0"
