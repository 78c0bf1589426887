import numpy as np
import pytest

from crsirl.bilevel import TrainConfig
from crsirl.catalog import Catalog, EmbeddingTable, generate_synthetic_world, pretrain_embeddings, split_interactions


def make_catalog(item_attrs, n_attrs=None, n_users=1, interactions=None):
    """Catalog from a plain {item: attrs} dict with dense ids."""
    n_items = len(item_attrs)
    if n_attrs is None:
        n_attrs = 1 + max(p for attrs in item_attrs.values() for p in attrs)
    if interactions is None:
        interactions = [(0, 0)]
    return Catalog(
        users=tuple(range(n_users)),
        items=tuple(range(n_items)),
        attributes=tuple(range(n_attrs)),
        item_attrs={v: frozenset(a) for v, a in item_attrs.items()},
        interactions=tuple(interactions),
    )


def make_emb(users, items, attrs):
    users, items, attrs = (np.asarray(a, dtype=float) for a in (users, items, attrs))
    d = users.shape[1]
    return EmbeddingTable(dim=d, user_vecs=users, item_vecs=items, attr_vecs=attrs, relation_vecs=np.zeros((2, d)))


def random_emb(catalog, dim, seed):
    rng = np.random.default_rng(seed)
    return make_emb(rng.normal(size=(catalog.n_users, dim)), rng.normal(size=(catalog.n_items, dim)),
                    rng.normal(size=(catalog.n_attrs, dim)))


@pytest.fixture(scope="session")
def tiny_world():
    """6 users, 12 items, 5 attributes, 4-dim embeddings: small enough for finite differences."""
    cat = generate_synthetic_world(6, 12, 5, (2, 3), 4, 2, 1)
    splits = split_interactions(cat, (7, 1.5, 1.5), 0)
    emb = pretrain_embeddings(splits.train, cat, dim=4, epochs=20, margin=1.0, step_size=0.05, seed=0)
    return cat, splits, emb


@pytest.fixture(scope="session")
def small_world():
    cat = generate_synthetic_world(20, 40, 10, (3, 6), 10, 2, 3)
    splits = split_interactions(cat, (7, 1.5, 1.5), 0)
    emb = pretrain_embeddings(splits.train, cat, dim=8, epochs=30, margin=1.0, step_size=0.05, seed=0)
    return cat, splits, emb


@pytest.fixture
def tiny_config():
    return TrainConfig(t_max=5, k=2, k_v=3, k_p=3, h_dim=4, m=4, q=3, lam=0.7, eta=0.3, gamma=0.9)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
