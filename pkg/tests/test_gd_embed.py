"""Gaussian downsampling and embedding archives."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from embeval.corpus import FeatureStore, FileAlignment, Segment
from embeval.errors import ConfigError, DegenerateSegmentError, ValidationError
from embeval.gd_embed import (EmbeddingSet, GdConfig, embed_corpus, gd_embed, gd_weights,
                              load_embedding_archive)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def frames_strategy(max_t=40, max_n=5):
    return st.tuples(st.integers(1, max_t), st.integers(1, max_n)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite))


def scalar_gd(frames, l, ratio):
    """Direct loop over blocks, frames and dimensions."""
    T, n = len(frames), len(frames[0])
    spacing = T / l
    sigma = ratio * spacing
    out = []
    for j in range(l):
        c = (j + 0.5) * spacing - 0.5
        w = [math.exp(-((i - c) ** 2) / (2 * sigma * sigma)) for i in range(T)]
        z = sum(w)
        for d in range(n):
            out.append(sum(w[i] * frames[i][d] for i in range(T)) / z)
    return out


class TestScalarOracle:
    def test_t4_l2(self):
        frames = [[0.0], [1.0], [2.0], [3.0]]
        got = gd_embed(np.array(frames), GdConfig(l=2, sigma_ratio=0.4))
        np.testing.assert_allclose(got, scalar_gd(frames, 2, 0.4), atol=1e-6)
        # centres 0.5 and 2.5 are symmetric about the middle of 0..3
        assert got[0] + got[1] == pytest.approx(3.0, abs=1e-12)

    def test_random_against_loop(self, rng):
        for T, n, l in [(7, 3, 3), (25, 2, 10), (3, 4, 10)]:
            x = rng.standard_normal((T, n))
            np.testing.assert_allclose(gd_embed(x, GdConfig(l=l)), scalar_gd(x.tolist(), l, 0.4), atol=1e-9)


class TestProperties:
    @given(frames_strategy(), st.integers(1, 12))
    def test_constant_input(self, x, l):
        c = x[0]
        const = np.tile(c, (x.shape[0], 1))
        np.testing.assert_allclose(gd_embed(const, GdConfig(l=l)), np.tile(c, l), atol=1e-6, rtol=1e-9)

    @given(arrays(np.float64, st.tuples(st.just(1), st.integers(1, 6)), elements=finite), st.integers(1, 12))
    def test_single_frame(self, x, l):
        np.testing.assert_allclose(gd_embed(x, GdConfig(l=l)), np.tile(x[0], l), atol=1e-6)

    @given(frames_strategy(), st.integers(1, 12), st.floats(0.05, 3.0))
    def test_time_reversal(self, x, l, ratio):
        cfg = GdConfig(l=l, sigma_ratio=ratio)
        fwd = gd_embed(x, cfg).reshape(l, -1)
        rev = gd_embed(x[::-1], cfg).reshape(l, -1)
        np.testing.assert_allclose(rev, fwd[::-1], atol=1e-6)

    @settings(deadline=None)
    @given(frames_strategy(max_n=4), st.integers(1, 10), st.integers(0, 2**31 - 1))
    def test_linear_map_commutes(self, x, l, seed):
        A = np.random.default_rng(seed).standard_normal((3, x.shape[1]))
        cfg = GdConfig(l=l)
        lhs = gd_embed(x @ A.T, cfg).reshape(l, -1)
        rhs = gd_embed(x, cfg).reshape(l, -1) @ A.T
        np.testing.assert_allclose(lhs, rhs, atol=1e-6 * (1 + np.abs(rhs).max()))

    @given(st.integers(1, 300), st.integers(1, 20), st.floats(1e-3, 10.0))
    def test_weights_sum_to_one(self, T, l, ratio):
        w = gd_weights(T, GdConfig(l=l, sigma_ratio=ratio))
        assert w.shape == (l, T)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(w >= 0)

    def test_bit_identical_reruns(self, rng):
        x = rng.standard_normal((33, 13))
        assert gd_embed(x).tobytes() == gd_embed(x.copy()).tobytes()


class TestValidation:
    def test_empty(self):
        with pytest.raises(DegenerateSegmentError):
            gd_embed(np.zeros((0, 3)))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            GdConfig(l=0)
        with pytest.raises(ConfigError):
            GdConfig(sigma_ratio=0.0)


@pytest.fixture
def small_corpus():
    rng = np.random.default_rng(3)
    store = FeatureStore({"f": rng.standard_normal((60, 13)).astype(np.float32)})
    inventory = [f"p{i:02d}" for i in range(33)]
    al = {"f": FileAlignment(("p03", "p07", "p01"), np.array([0.0, 0.2, 0.4]), np.array([0.2, 0.4, 0.6125]))}
    segs = [Segment("a", "f", "S", 0.0, 0.15, ("p03",)), Segment("b", "f", "S", 0.1, 0.5, ("p03", "p07", "p01")),
            Segment("c", "f", "S", 0.3, 0.6, ("p07", "p01"))]
    return store, al, inventory, segs


class TestEmbedCorpus:
    def test_real_shape(self, small_corpus):
        store, _, _, segs = small_corpus
        emb = embed_corpus(store, segs)
        assert len(emb) == 3 and emb.dim == 130

    def test_one_hot_shape_and_constant_case(self, small_corpus):
        store, al, inv, segs = small_corpus
        emb = embed_corpus(store, segs, "one_hot", alignment=al, inventory=inv)
        assert emb.dim == 330
        expected = np.tile(np.eye(33)[3], 10)
        np.testing.assert_allclose(emb.vectors[0], expected, atol=1e-6)

    def test_workers_do_not_change_output(self, small_corpus):
        store, _, _, segs = small_corpus
        a = embed_corpus(store, segs, workers=1)
        b = embed_corpus(store, segs, workers=3)
        assert a.vectors.tobytes() == b.vectors.tobytes()

    def test_segment_error_names_id(self, small_corpus):
        store, _, _, segs = small_corpus
        with pytest.raises(DegenerateSegmentError, match="segment bad"):
            embed_corpus(store, segs + [Segment("bad", "f", "S", 0.5991, 0.5999)])

    def test_one_hot_needs_alignment(self, small_corpus):
        store, _, _, segs = small_corpus
        with pytest.raises(ConfigError):
            embed_corpus(store, segs, "one_hot")


class TestEmbeddingArchive:
    def test_round_trip(self, tmp_path, rng):
        emb = EmbeddingSet(["x", "y"], rng.standard_normal((2, 5)), [("a", "b"), None], ["s1", "s2"])
        emb.save(tmp_path / "e")
        back = load_embedding_archive(tmp_path / "e")
        assert back.ids == emb.ids and back.labels == emb.labels and back.speakers == emb.speakers
        assert back.vectors.tobytes() == emb.vectors.tobytes()

    def test_duplicate_ids(self):
        with pytest.raises(ValidationError):
            EmbeddingSet(["x", "x"], np.ones((2, 2)))

    def test_non_finite(self):
        with pytest.raises(ValidationError):
            EmbeddingSet(["x"], np.array([[np.nan, 1.0]]))
