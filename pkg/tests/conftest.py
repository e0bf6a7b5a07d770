import numpy as np
import pytest

from fairpair.store import EmbeddingSet, LabelTable


def random_dataset(rng, n=None, d=None, g=None, m=None):
    """Random embedding set where every identity has at least one record."""
    n = n or int(rng.integers(8, 120))
    g = g or int(rng.integers(2, max(3, n // 2)))
    g = min(g, n)
    d = d or int(rng.integers(2, 24))
    m = m or int(rng.integers(1, 4))
    ident = np.concatenate([np.arange(g), rng.integers(0, g, size=n - g)])
    rng.shuffle(ident)
    id_attr = rng.integers(0, m, size=g)
    id_attr[np.arange(min(m, g))] = np.arange(min(m, g))  # keep every group inhabited
    vecs = rng.normal(size=(n, d)).astype(np.float32)
    return EmbeddingSet(
        vectors=vecs,
        identity=ident.astype(np.int64),
        attribute=id_attr[ident],
        labels=LabelTable.default(g, m),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_set(rng):
    return random_dataset(rng, n=60, d=8, g=12, m=3)
