import numpy as np
import pytest

from embeval.gd_embed import EmbeddingSet


def make_set(vectors, labels=None, speakers=None, prefix="e"):
    """EmbeddingSet with zero-padded ids so lexicographic and positional order agree."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(vectors)
    if labels is not None:
        labels = [None if t is None else (tuple(t) if isinstance(t, (tuple, list)) else (str(t),))
                  for t in labels]
    return EmbeddingSet([f"{prefix}{i:05d}" for i in range(n)], vectors, labels, speakers)


def clusters(sizes, dim=8, spread=1e-3, sep=10.0, seed=0):
    """Tight, well separated clusters; labels are the cluster number."""
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((len(sizes), dim)) * sep
    vecs, labels = [], []
    for c, n in enumerate(sizes):
        vecs.append(centres[c] + spread * rng.standard_normal((n, dim)))
        labels += [f"t{c}"] * n
    return np.vstack(vecs), labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
