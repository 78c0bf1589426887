"""Recommendation world: catalog, interaction splits, and TransE embeddings.

Ids are dense integers per entity class (users, items and attributes are
each numbered from 0). Files may carry arbitrary string labels; they are
kept on the catalog so a load/save round trip is lossless.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from crsirl.checkpoint import atomic_write_text, read_sections, write_sections
from crsirl.errors import InvalidArgument

# Sampling weight of an in-cluster item (resp. attribute) relative to an
# out-of-cluster one. Chosen so that the default world keeps well above 60%
# of interactions inside the user's cluster.
ITEM_CLUSTER_BIAS = 30.0
ATTR_CLUSTER_BIAS = 8.0

INTERACTS, HAS_ATTRIBUTE = 0, 1


@dataclass(frozen=True, eq=False)
class Catalog:
    users: tuple[int, ...]
    items: tuple[int, ...]
    attributes: tuple[int, ...]
    item_attrs: dict[int, frozenset[int]]
    interactions: tuple[tuple[int, int], ...]
    user_cluster: tuple[int, ...] | None = None
    item_cluster: tuple[int, ...] | None = None
    labels: dict[str, tuple[str, ...]] | None = field(default=None, repr=False)

    def __post_init__(self):
        for kind, ids in (("user", self.users), ("item", self.items), ("attribute", self.attributes)):
            if tuple(ids) != tuple(range(len(ids))):
                raise InvalidArgument(f"{kind} ids must be 0..n-1 without duplicates")
        if set(self.item_attrs) != set(self.items):
            raise InvalidArgument("item_attrs must cover exactly the declared items")
        n_attrs = len(self.attributes)
        for v, attrs in self.item_attrs.items():
            if not attrs:
                raise InvalidArgument(f"item {v} has an empty attribute set")
            if any(not 0 <= p < n_attrs for p in attrs):
                raise InvalidArgument(f"item {v} references an undeclared attribute")
        nu, ni = len(self.users), len(self.items)
        for u, v in self.interactions:
            if not (0 <= u < nu and 0 <= v < ni):
                raise InvalidArgument(f"interaction ({u}, {v}) references an undeclared id")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_attrs(self) -> int:
        return len(self.attributes)

    @cached_property
    def incidence(self) -> np.ndarray:
        """Boolean matrix, ``incidence[v, p]`` is true iff item v has attribute p."""
        m = np.zeros((self.n_items, self.n_attrs), dtype=bool)
        for v, attrs in self.item_attrs.items():
            m[v, list(attrs)] = True
        m.setflags(write=False)
        return m

    def to_json(self) -> dict:
        lab = self.labels or {}
        users = lab.get("users") or tuple(str(u) for u in self.users)
        items = lab.get("items") or tuple(str(v) for v in self.items)
        attrs = lab.get("attributes") or tuple(str(p) for p in self.attributes)
        doc = {
            "users": list(users),
            "attributes": list(attrs),
            "items": [
                {"id": items[v], "attributes": [attrs[p] for p in sorted(self.item_attrs[v])]}
                for v in self.items
            ],
            "interactions": [[users[u], items[v]] for u, v in self.interactions],
        }
        if self.user_cluster is not None:
            doc["clusters"] = {"users": list(self.user_cluster), "items": list(self.item_cluster)}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> Catalog:
        try:
            user_labels = [str(u) for u in doc["users"]]
            item_docs = doc["items"]
            pairs = doc["interactions"]
        except (KeyError, TypeError) as exc:
            raise InvalidArgument(f"catalog document is missing key {exc}") from None
        item_labels = [str(it["id"]) for it in item_docs]
        if "attributes" in doc:
            attr_labels = [str(p) for p in doc["attributes"]]
        else:
            attr_labels = []
            for it in item_docs:
                for p in it["attributes"]:
                    if str(p) not in attr_labels:
                        attr_labels.append(str(p))
        for kind, lab in (("user", user_labels), ("item", item_labels), ("attribute", attr_labels)):
            if len(set(lab)) != len(lab):
                raise InvalidArgument(f"duplicate {kind} id")
        uix = {s: i for i, s in enumerate(user_labels)}
        vix = {s: i for i, s in enumerate(item_labels)}
        pix = {s: i for i, s in enumerate(attr_labels)}
        try:
            item_attrs = {vix[str(it["id"])]: frozenset(pix[str(p)] for p in it["attributes"]) for it in item_docs}
            interactions = tuple((uix[str(u)], vix[str(v)]) for u, v in pairs)
        except KeyError as exc:
            raise InvalidArgument(f"undeclared id {exc}") from None
        clusters = doc.get("clusters")
        return cls(
            users=tuple(range(len(user_labels))),
            items=tuple(range(len(item_labels))),
            attributes=tuple(range(len(attr_labels))),
            item_attrs=item_attrs,
            interactions=interactions,
            user_cluster=tuple(clusters["users"]) if clusters else None,
            item_cluster=tuple(clusters["items"]) if clusters else None,
            labels={"users": tuple(user_labels), "items": tuple(item_labels), "attributes": tuple(attr_labels)},
        )


def save_catalog(catalog: Catalog, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(catalog.to_json(), indent=1) + "\n")


def load_catalog(path: str | os.PathLike) -> Catalog:
    return Catalog.from_json(json.loads(Path(path).read_text()))


def generate_synthetic_world(
    n_users: int,
    n_items: int,
    n_attrs: int,
    attrs_per_item: tuple[int, int],
    interactions_per_user: int,
    n_clusters: int,
    seed: int,
) -> Catalog:
    """Cluster-structured random world.

    Users, items and attributes each get a latent cluster. Items draw their
    attributes preferentially from their cluster's attributes and users
    draw their items preferentially from their own cluster.
    """
    counts = dict(n_users=n_users, n_items=n_items, n_attrs=n_attrs,
                  interactions_per_user=interactions_per_user, n_clusters=n_clusters)
    for name, value in counts.items():
        if int(value) != value or value < 1:
            raise InvalidArgument(f"{name} must be a positive integer, got {value!r}")
    lo, hi = attrs_per_item
    if lo < 1 or hi < lo:
        raise InvalidArgument(f"attrs_per_item must be a nonempty range of positive counts, got {attrs_per_item}")
    if hi > n_attrs:
        raise InvalidArgument("attrs_per_item upper bound exceeds n_attrs")
    if n_clusters > min(n_users, n_items):
        raise InvalidArgument("n_clusters must not exceed min(n_users, n_items)")

    rng = np.random.default_rng(seed)
    user_cluster = rng.permutation(np.arange(n_users) % n_clusters)
    item_cluster = rng.permutation(np.arange(n_items) % n_clusters)
    attr_cluster = rng.permutation(np.arange(n_attrs) % n_clusters)

    item_attrs = {}
    for v in range(n_items):
        k = int(rng.integers(lo, hi + 1))
        w = np.where(attr_cluster == item_cluster[v], ATTR_CLUSTER_BIAS, 1.0)
        picked = rng.choice(n_attrs, size=k, replace=False, p=w / w.sum())
        item_attrs[v] = frozenset(int(p) for p in picked)

    per_user = min(interactions_per_user, n_items)
    interactions = []
    for u in range(n_users):
        w = np.where(item_cluster == user_cluster[u], ITEM_CLUSTER_BIAS, 1.0)
        picked = rng.choice(n_items, size=per_user, replace=False, p=w / w.sum())
        interactions.extend((u, int(v)) for v in sorted(picked))

    return Catalog(
        users=tuple(range(n_users)),
        items=tuple(range(n_items)),
        attributes=tuple(range(n_attrs)),
        item_attrs=item_attrs,
        interactions=tuple(interactions),
        user_cluster=tuple(int(c) for c in user_cluster),
        item_cluster=tuple(int(c) for c in item_cluster),
    )


@dataclass(frozen=True)
class InteractionSplits:
    train: tuple[tuple[int, int], ...]
    valid: tuple[tuple[int, int], ...]
    test: tuple[tuple[int, int], ...]

    def to_json(self) -> dict:
        return {k: [list(p) for p in getattr(self, k)] for k in ("train", "valid", "test")}

    @classmethod
    def from_json(cls, doc: dict) -> InteractionSplits:
        return cls(**{k: tuple(tuple(p) for p in doc[k]) for k in ("train", "valid", "test")})


def _largest_remainder(n: int, weights) -> list[int]:
    total = float(sum(weights))
    quotas = [n * float(w) / total for w in weights]
    sizes = [int(np.floor(q)) for q in quotas]
    short = n - sum(sizes)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def split_interactions(catalog: Catalog, ratios=(7.0, 1.5, 1.5), seed: int = 0) -> InteractionSplits:
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise InvalidArgument("ratios must be three nonnegative reals")
    if sum(ratios) <= 0:
        raise InvalidArgument("ratios must not all be zero")
    pairs = list(catalog.interactions)
    order = np.random.default_rng(seed).permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    a, b, _ = _largest_remainder(len(pairs), ratios)
    return InteractionSplits(
        train=tuple(shuffled[:a]),
        valid=tuple(shuffled[a:a + b]),
        test=tuple(shuffled[a + b:]),
    )


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    dim: int
    user_vecs: np.ndarray
    item_vecs: np.ndarray
    attr_vecs: np.ndarray
    relation_vecs: np.ndarray
    loss_history: tuple[float, ...] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidArgument("dim must be positive")
        for name in ("user_vecs", "item_vecs", "attr_vecs", "relation_vecs"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != self.dim:
                raise InvalidArgument(f"{name} must have shape (n, {self.dim})")
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.relation_vecs.shape[0] != 2:
            raise InvalidArgument("relation_vecs must hold exactly two relations")

    @cached_property
    def item_attr_dots(self) -> np.ndarray:
        """``e_v . e_p`` for every item/attribute pair."""
        return self.item_vecs @ self.attr_vecs.T

    @cached_property
    def item_user_dots(self) -> np.ndarray:
        """``e_v . e_u``, shape (n_items, n_users)."""
        return self.item_vecs @ self.user_vecs.T

    def check_covers(self, catalog: Catalog) -> None:
        shapes = (self.user_vecs.shape[0], self.item_vecs.shape[0], self.attr_vecs.shape[0])
        if shapes != (catalog.n_users, catalog.n_items, catalog.n_attrs):
            raise InvalidArgument(f"embedding counts {shapes} do not match the catalog")


def save_embeddings(emb: EmbeddingTable, path: str | os.PathLike, as_json: bool = False) -> None:
    meta = {
        "kind": "embeddings",
        "dim": emb.dim,
        "n_users": int(emb.user_vecs.shape[0]),
        "n_items": int(emb.item_vecs.shape[0]),
        "n_attrs": int(emb.attr_vecs.shape[0]),
    }
    sections = {
        "user_vecs": emb.user_vecs,
        "item_vecs": emb.item_vecs,
        "attr_vecs": emb.attr_vecs,
        "relation_vecs": emb.relation_vecs,
    }
    write_sections(path, sections, meta, as_json=as_json)


def load_embeddings(path: str | os.PathLike) -> EmbeddingTable:
    header, sec = read_sections(path)
    return EmbeddingTable(
        dim=int(header["dim"]),
        user_vecs=sec["user_vecs"],
        item_vecs=sec["item_vecs"],
        attr_vecs=sec["attr_vecs"],
        relation_vecs=sec["relation_vecs"],
    )


def margin_ranking_loss(pos_dist, neg_dist, margin: float):
    """Hinge ``max(0, margin + d_pos - d_neg)``, elementwise."""
    return np.maximum(0.0, margin + np.asarray(pos_dist) - np.asarray(neg_dist))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def pretrain_embeddings(
    train,
    catalog: Catalog,
    dim: int = 16,
    epochs: int = 50,
    margin: float = 1.0,
    step_size: float = 0.01,
    neg_per_pos: int = 1,
    seed: int = 0,
    batch_size: int = 32,
) -> EmbeddingTable:
    """TransE over ``(u, interacts, v)`` and ``(v, has_attribute, p)`` triples.

    Minibatch SGD on the margin ranking loss with L2 distances. One of head
    or tail is corrupted uniformly within its entity class, and all entity
    vectors are projected back to the unit sphere after every update.
    """
    train = list(train)
    if not train:
        raise InvalidArgument("train set is empty")
    if dim < 1 or margin <= 0 or epochs < 0 or neg_per_pos < 1:
        raise InvalidArgument("need dim >= 1, margin > 0, epochs >= 0, neg_per_pos >= 1")

    nu, ni, na = catalog.n_users, catalog.n_items, catalog.n_attrs
    # One entity matrix: users, then items, then attributes.
    off_u, off_i, off_a = 0, nu, nu + ni
    class_range = {0: (off_u, nu), 1: (off_i, ni), 2: (off_a, na)}

    heads, rels, tails, head_cls, tail_cls = [], [], [], [], []
    for u, v in train:
        heads.append(off_u + u); rels.append(INTERACTS); tails.append(off_i + v)
        head_cls.append(0); tail_cls.append(1)
    for v in catalog.items:
        for p in sorted(catalog.item_attrs[v]):
            heads.append(off_i + v); rels.append(HAS_ATTRIBUTE); tails.append(off_a + p)
            head_cls.append(1); tail_cls.append(2)
    heads, rels, tails = map(np.asarray, (heads, rels, tails))
    head_cls, tail_cls = np.asarray(head_cls), np.asarray(tail_cls)

    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(dim)
    ent = _unit_rows(rng.uniform(-bound, bound, size=(nu + ni + na, dim)))
    rel = rng.uniform(-bound, bound, size=(2, dim))

    def sample_entities(classes):
        out = np.empty(len(classes), dtype=np.int64)
        for c, (start, n) in class_range.items():
            mask = classes == c
            out[mask] = start + rng.integers(0, n, size=int(mask.sum()))
        return out

    history = []
    n = len(heads)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = np.repeat(order[start:start + batch_size], neg_per_pos)
            h, r, t = heads[idx], rels[idx], tails[idx]
            corrupt_head = rng.random(len(idx)) < 0.5
            h_neg = np.where(corrupt_head, sample_entities(head_cls[idx]), h)
            t_neg = np.where(corrupt_head, t, sample_entities(tail_cls[idx]))

            d_pos = ent[h] + rel[r] - ent[t]
            d_neg = ent[h_neg] + rel[r] - ent[t_neg]
            n_pos = np.linalg.norm(d_pos, axis=1)
            n_neg = np.linalg.norm(d_neg, axis=1)
            loss = margin_ranking_loss(n_pos, n_neg, margin)
            losses.append(loss)

            active = loss > 0
            if not active.any():
                continue
            g_pos = d_pos[active] / np.maximum(n_pos[active], 1e-12)[:, None]
            g_neg = d_neg[active] / np.maximum(n_neg[active], 1e-12)[:, None]
            g_ent = np.zeros_like(ent)
            g_rel = np.zeros_like(rel)
            np.add.at(g_ent, h[active], g_pos)
            np.add.at(g_ent, t[active], -g_pos)
            np.add.at(g_ent, h_neg[active], -g_neg)
            np.add.at(g_ent, t_neg[active], g_neg)
            np.add.at(g_rel, r[active], g_pos - g_neg)
            ent = _unit_rows(ent - step_size * g_ent)
            rel = rel - step_size * g_rel
        history.append(float(np.concatenate(losses).mean()))

    return EmbeddingTable(
        dim=dim,
        user_vecs=ent[off_u:off_u + nu],
        item_vecs=ent[off_i:off_i + ni],
        attr_vecs=ent[off_a:off_a + na],
        relation_vecs=rel,
        loss_history=tuple(history),
    )
