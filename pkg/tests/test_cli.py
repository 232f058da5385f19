"""Metric correlation, the end-to-end pipeline and the command-line entry point."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from embeval.cli import main
from embeval.errors import DegenerateCorrelationError
from embeval.pipeline import RunRecord, correlate, read_run_records, run_pipeline, write_run_records

RECORDS = [
    RunRecord("m1", 0.10, 0.40, 0.70),
    RunRecord("m2", 0.20, 0.35, 0.60),
    RunRecord("m3", 0.15, 0.50, 0.80),
    RunRecord("m4", 0.30, 0.20, 0.65),
    RunRecord("m5", 0.05, 0.55, 0.90),
]


def scalar_r2(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy * sxy / (sxx * syy)


class TestCorrelate:
    def test_against_scalar_oracle(self):
        m = correlate(RECORDS).matrix
        cols = {"freq": [r.freq_r2 for r in RECORDS], "map": [r.map_ap for r in RECORDS],
                "abx": [-r.abx_error for r in RECORDS]}
        names = ["freq", "map", "abx"]
        for i, a in enumerate(names):
            for j, b in enumerate(names):
                expected = 1.0 if i == j else scalar_r2(cols[a], cols[b])
                assert abs(m[i, j] - expected) <= 1e-9

    def test_symmetric_unit_diagonal(self):
        m = correlate(RECORDS).matrix
        np.testing.assert_array_equal(m, m.T)
        np.testing.assert_array_equal(np.diag(m), 1.0)
        assert np.all((m >= 0) & (m <= 1))

    def test_affinely_related_columns(self):
        recs = [RunRecord(f"m{i}", 0.5 - 0.1 * i, 0.2 + 0.1 * i, 0.3 + 0.05 * i) for i in range(4)]
        np.testing.assert_allclose(correlate(recs).matrix, 1.0, atol=1e-12)

    def test_too_few_records(self):
        with pytest.raises(DegenerateCorrelationError):
            correlate(RECORDS[:2])

    def test_constant_column_named(self):
        recs = [RunRecord(r.model_name, r.abx_error, 0.5, r.freq_r2) for r in RECORDS]
        with pytest.raises(DegenerateCorrelationError, match="map"):
            correlate(recs)

    def test_non_finite(self):
        recs = RECORDS[:4] + [RunRecord("m5", 0.1, 0.2, math.nan)]
        with pytest.raises(DegenerateCorrelationError, match="freq"):
            correlate(recs)

    @given(st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance(self, a, b, c, d):
        moved = [RunRecord(r.model_name, a * r.abx_error + b, c * r.map_ap + d, r.freq_r2) for r in RECORDS]
        np.testing.assert_allclose(correlate(moved).matrix, correlate(RECORDS).matrix, atol=1e-9)

    def test_records_round_trip(self, tmp_path):
        write_run_records(tmp_path / "r.tsv", RECORDS)
        assert read_run_records(tmp_path / "r.tsv") == RECORDS


def write_config(tmp_path, **overrides):
    cfg = {
        "seed": 1, "output_dir": "out",
        "corpus": {"synth": {"num_types": 30, "total_tokens": 400, "speakers": 3, "noise_sigma": 0.3}},
        "gd": {"models": [{"name": "gd-real", "featurizer": "real"},
                          {"name": "gd-1hot", "featurizer": "one_hot"},
                          {"name": "gd-real-l3", "featurizer": "real", "l": 3}]},
        "abx": {"max_items": 200}, "map": {"max_items": 200},
        "pairs": {"enabled": True, "n_pos": 20, "n_neg": 20},
    }
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


class TestPipeline:
    def test_happy_path(self, tmp_path):
        records = run_pipeline(write_config(tmp_path))
        out = tmp_path / "out"
        assert [r.model_name for r in records] == ["gd-real", "gd-1hot", "gd-real-l3"]
        one_hot = records[1]
        assert 0.0 <= one_hot.abx_error <= 0.5 and 0.0 < one_hot.map_ap <= 1.0
        assert 0.0 < one_hot.freq_r2 <= 1.0
        for name in ("abx.tsv", "map.json", "freq.tsv", "pairs_mined.tsv", "pairs_gold.tsv"):
            assert (out / "models" / "gd-1hot" / name).exists()
        assert (out / "correlation.tsv").read_text().startswith("\tfreq\tmap\tabx\n")
        prov = json.loads((out / "models" / "gd-1hot" / "freq.json").read_text())
        assert "inputs" in json.dumps(prov)

    def test_missing_archive(self, tmp_path):
        cfg = write_config(tmp_path, corpus={"items": "items.tsv", "alignment": "al.tsv",
                                             "features": "nowhere", "truth": None})
        (tmp_path / "items.tsv").write_text("")
        (tmp_path / "al.tsv").write_text("")
        assert main(["run", str(cfg)]) == 3
        failed = (tmp_path / "out" / "FAILED").read_text()
        assert "stage: corpus" in failed and "nowhere" in failed

    def test_worker_count_does_not_change_tables(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        run_pipeline(write_config(tmp_path / "a"), threads=1)
        run_pipeline(write_config(tmp_path / "b"), threads=3)
        tables = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.tsv"))
        assert len(tables) > 10
        for rel in tables:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


class TestExitCodes:
    def test_bad_config_key(self, tmp_path):
        assert main(["run", str(write_config(tmp_path, bogus=1))]) == 2

    def test_bad_threads(self, tmp_path):
        assert main(["--threads", "0", "run", str(write_config(tmp_path))]) == 2

    def test_correlate_numeric(self, tmp_path):
        write_run_records(tmp_path / "r.tsv", RECORDS[:2])
        assert main(["correlate", str(tmp_path / "r.tsv"), "--out", str(tmp_path / "c")]) == 4

    def test_missing_file(self, tmp_path):
        assert main(["eval-map", "--emb", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3

    def test_subcommand_chain(self, tmp_path):
        corpus = tmp_path / "corpus"
        assert main(["synth", "--out", str(corpus), "--num-types", "20", "--total-tokens", "200",
                     "--seed", "3"]) == 0
        emb = tmp_path / "emb"
        assert main(["embed", "--items", str(corpus / "items.tsv"), "--features", str(corpus / "features"),
                     "--alignment", str(corpus / "alignment.tsv"), "--featurizer", "one_hot",
                     "--out", str(emb)]) == 0
        assert main(["eval-abx", "--emb", str(emb), "--out", str(tmp_path / "abx")]) == 0
        assert main(["eval-map", "--emb", str(emb), "--out", str(tmp_path / "map")]) == 0
        assert main(["freq", "--emb", str(emb), "--truth", str(corpus / "truth.tsv"),
                     "--out", str(tmp_path / "freq"), "--k", "50"]) == 0
        write_run_records(tmp_path / "r.tsv", RECORDS)
        assert main(["correlate", str(tmp_path / "r.tsv"), "--out", str(tmp_path / "c")]) == 0
        assert (tmp_path / "c" / "correlation.json").exists()
