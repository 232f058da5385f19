"""Kernel density frequency estimation and the K-means baseline."""

import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from embeval.errors import ConfigError, DegenerateCorrelationError, ValidationError
from embeval.freq import (DensityConfig, density_estimate, effective_k, estimate_all,
                          estimate_frequencies, kmeans_frequency_baseline, lloyd, r_squared_log,
                          truth_counts, tune_beta)
from embeval.knn import build_graph, build_index

from conftest import clusters, make_set

dist_vec = arrays(np.float64, st.integers(1, 50), elements=st.floats(0, 10))


def scalar_pearson_sq(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy * sxy / (sxx * syy)


class TestDensityEstimate:
    def test_three_distances(self):
        expected = 1 + math.exp(-1) + math.exp(-4)
        assert abs(density_estimate([0.0, 1.0, 2.0], 1.0) - expected) <= 1e-12
        assert expected == pytest.approx(1.38620, abs=1e-5)

    def test_zero_distances(self):
        assert density_estimate(np.zeros(7), 123.0) == 7.0

    def test_small_beta_limit(self):
        assert density_estimate([0.5, 3.0, 9.0], 1e-12) == pytest.approx(3.0, abs=1e-9)

    @given(dist_vec, st.floats(1e-3, 5.0), st.floats(1e-3, 5.0))
    def test_monotone_in_beta(self, d, b1, b2):
        lo, hi = sorted((b1, b2))
        assume(hi > lo)
        k_lo, k_hi = density_estimate(d, lo), density_estimate(d, hi)
        assert k_hi <= k_lo
        # strictness is only observable when some moving term is not lost to rounding in the sum
        moving = np.exp(-lo * d[d > 0.05] ** 2)
        if hi > lo * 1.01 and np.any(moving > 1e-9 * k_lo):
            assert k_hi < k_lo

    @given(dist_vec, st.floats(1e-3, 5.0), st.data())
    def test_monotone_in_each_distance(self, d, beta, data):
        i = data.draw(st.integers(0, len(d) - 1))
        bigger = d.copy()
        bigger[i] += data.draw(st.floats(0, 5))
        assert density_estimate(bigger, beta) <= density_estimate(d, beta)

    @given(dist_vec, st.floats(1e-3, 7.0))
    def test_range(self, d, beta):
        kappa = density_estimate(d, beta)
        assert 0 < kappa <= len(d)

    def test_thousand_random_vectors(self):
        rng = np.random.default_rng(0)
        betas = np.logspace(-2, 1, 12)
        for _ in range(1000):
            d = rng.exponential(1.0, size=rng.integers(1, 40))
            kappas = [density_estimate(d, b) for b in betas]
            assert all(a >= b for a, b in zip(kappas, kappas[1:]))

    def test_rejects_bad_input(self):
        with pytest.raises(ValidationError):
            density_estimate([-1.0], 1.0)
        with pytest.raises(ValidationError):
            density_estimate([1.0], 0.0)


def graph_of(X, k, self_exclude=False, kind="euclidean"):
    emb = make_set(X)
    return build_graph(build_index(emb, kind), emb, k, self_exclude), emb


class TestEstimateAll:
    def test_matches_independent_calls(self, rng):
        g, _ = graph_of(rng.standard_normal((60, 3)), 10, True)
        est = estimate_all(g, 0.7)
        for q, d in zip(g.query_ids, g.distances):
            assert est[q] == pytest.approx(density_estimate(d, 0.7), rel=1e-14)

    def test_self_inclusion_at_least_one(self, rng):
        g, _ = graph_of(rng.standard_normal((40, 3)), 5)
        assert min(estimate_all(g, 1e6).values()) >= 1.0

    def test_identical_queries(self):
        g, _ = graph_of(np.ones((12, 3)), 7)
        assert set(estimate_all(g, 2.0).values()) == {7.0}

    def test_k_mismatch(self, rng):
        g, _ = graph_of(rng.standard_normal((10, 2)), 3)
        with pytest.raises(ValidationError):
            estimate_all(g, 1.0, k=4)

    def test_cluster_masses(self):
        X, labels = clusters([100, 10], dim=5, spread=1e-6, sep=10.0, seed=1)
        k, _ = effective_k(200, len(X), False)
        g, _ = graph_of(X, k)
        choice = tune_beta(g, DensityConfig(k=200, distance="euclidean"))
        est = estimate_all(g, choice.beta)
        big = [est[f"e{i:05d}"] for i in range(100)]
        small = [est[f"e{i:05d}"] for i in range(100, 110)]
        np.testing.assert_allclose(big, 100.0, rtol=1e-3)
        np.testing.assert_allclose(small, 10.0, rtol=1e-3)


class TestTuneBeta:
    def test_interior_on_generic_graph(self):
        X, _ = clusters([40, 20, 10, 5, 2], dim=4, spread=0.3, sep=3.0, seed=4)
        g, _ = graph_of(X, 60, True, "cosine")
        choice = tune_beta(g)
        best = int(np.argmax(choice.variances))
        assert 0 < best < len(choice.betas) - 1
        assert choice.variances[0] < choice.log_variance
        assert choice.variances[-1] < choice.log_variance

    def test_single_item_graph(self, caplog):
        g, _ = graph_of(np.array([[1.0, 2.0]]), 1)
        choice = tune_beta(g)
        assert choice.degenerate and choice.beta == choice.betas[0]
        assert "no spread" in caplog.text

    def test_reproducible(self, rng):
        g, _ = graph_of(rng.standard_normal((200, 5)), 30, True, "cosine")
        assert tune_beta(g).beta == tune_beta(g).beta

    def test_explicit_grid(self, rng):
        g, _ = graph_of(rng.standard_normal((50, 3)), 10, True)
        choice = tune_beta(g, DensityConfig(beta_grid=(0.1, 1.0, 10.0)))
        assert len(choice.betas) == 3

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            DensityConfig(k=0)
        with pytest.raises(ConfigError):
            DensityConfig(beta_grid=(1.0, -2.0))


class TestRSquared:
    def test_scalar_oracle(self):
        truth = {"a": 1, "b": 2, "c": 4, "d": 8}
        est = {"a": 1.0, "b": 3.0, "c": 3.0, "d": 9.0}
        expected = scalar_pearson_sq([math.log(v) for v in est.values()], [math.log(v) for v in truth.values()])
        assert r_squared_log(est, truth) == pytest.approx(expected, abs=1e-12)

    @given(st.lists(st.integers(1, 1000), min_size=3, max_size=30), st.floats(1.0, 50.0), st.floats(0.2, 4.0))
    def test_scale_and_power_invariance(self, counts, c, a):
        assume(len(set(counts)) > 1)
        truth = {str(i): v for i, v in enumerate(counts)}
        noisy = {k: v * (1 + 0.1 * (int(k) % 3)) for k, v in truth.items()}
        assume(len(set(noisy.values())) > 1)
        base = r_squared_log(noisy, truth)
        scaled = r_squared_log({k: c * v for k, v in noisy.items()}, truth)
        powered = r_squared_log({k: v ** a for k, v in noisy.items()}, truth)
        assert scaled == pytest.approx(base, abs=1e-9)
        assert powered == pytest.approx(base, abs=1e-9)

    def test_proportional_and_equal(self):
        truth = {str(i): 2 ** i for i in range(6)}
        assert r_squared_log(dict(truth), truth) == pytest.approx(1.0)
        assert r_squared_log({k: 3.0 * v for k, v in truth.items()}, truth) == pytest.approx(1.0)

    def test_constant_truth(self):
        with pytest.raises(DegenerateCorrelationError):
            r_squared_log({"a": 1.0, "b": 2.0}, {"a": 3, "b": 3})

    def test_mismatched_ids(self):
        with pytest.raises(ValidationError):
            r_squared_log({"a": 1.0}, {"b": 1})


class TestKmeansBaseline:
    def test_singletons(self, rng):
        emb = make_set(rng.standard_normal((15, 3)))
        assert set(kmeans_frequency_baseline(emb, 15).values()) == {1.0}

    def test_two_clusters(self):
        X, _ = clusters([30, 10], dim=3, spread=0.01, seed=3)
        est = kmeans_frequency_baseline(make_set(X), 2, seed=0)
        vals = list(est.values())
        assert vals[:30] == [30.0] * 30 and vals[30:] == [10.0] * 10

    def test_deterministic(self, rng):
        X = rng.standard_normal((200, 4))
        a = lloyd(X, 7, seed=5)
        b = lloyd(X, 7, seed=5)
        np.testing.assert_array_equal(a[0], b[0])

    def test_too_many_clusters(self, rng):
        with pytest.raises(ConfigError):
            kmeans_frequency_baseline(make_set(rng.standard_normal((5, 2))), 6)


class TestPipelinePieces:
    def test_effective_k(self, caplog):
        assert effective_k(2000, 20000, True) == (2000, False)
        assert effective_k(2000, 1500, True) == (1499, True)
        assert effective_k(2000, 1500, False) == (1500, True)
        assert "clamped" in caplog.text

    def test_truth_counts(self):
        emb = make_set(np.eye(4), ["a", "a", "b", "a"])
        assert truth_counts(emb) == {"e00000": 3, "e00001": 3, "e00002": 1, "e00003": 3}

    def test_report_round_trip(self, tmp_path):
        X, labels = clusters([6, 3, 2], dim=3, spread=0.1, sep=2.0)
        emb = make_set(X, labels)
        g = build_graph(build_index(emb), emb, 10, True)
        rep = estimate_frequencies(g, DensityConfig(k=10), truth_counts(emb))
        rep.write(tmp_path)
        rows = (tmp_path / "freq.tsv").read_text().splitlines()
        assert rows[0] == "id\tkappa\tlog_kappa\ttrue_count" and len(rows) == 12
