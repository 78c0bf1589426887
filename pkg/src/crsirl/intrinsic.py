"""Learned intrinsic reward ``r_phi(s, a)``.

A bounded two-layer tanh network over embedding features of the state and
action. The features never touch the policy parameters, so the reward's
derivative with respect to the policy is zero by construction.
"""

from __future__ import annotations

import numpy as np

from crsirl.catalog import EmbeddingTable
from crsirl.env import AskAttribute, ConversationState, RecommendItems
from crsirl.errors import InvalidArgument
from crsirl.params import FlatParams, Layout


def feature_length(dim: int) -> int:
    return 5 * dim + 2


class RewardParams(FlatParams):
    def __init__(self, n_features: int, q: int = 16, flat=None):
        self.n_features, self.q = n_features, q
        layout = Layout(
            names=("U_1", "c_1", "u_2", "c_2"),
            shapes=((q, n_features), (q,), (q,), ()),
        )
        super().__init__(layout, flat)

    @classmethod
    def init(cls, n_features: int, q: int = 16, seed: int = 0) -> RewardParams:
        """Random hidden layer, zero output layer: the initial reward is exactly 0.

        An all-zero network is a stationary point where only ``c_2`` receives
        gradient, so the hidden layer needs a random start.
        """
        rng = np.random.default_rng(seed)
        p = cls(n_features, q)
        p["U_1"][:] = rng.normal(0, 1 / np.sqrt(n_features), size=(q, n_features))
        return p


def _mean_rows(mat, idx, dim):
    if len(idx) == 0:
        return np.zeros(dim)
    return mat[list(idx)].mean(axis=0)


def reward_features(state: ConversationState, action, emb: EmbeddingTable, t_max: int) -> np.ndarray:
    d = emb.dim
    if isinstance(action, AskAttribute):
        e_a, flag = emb.attr_vecs[action.attribute], 0.0
    elif isinstance(action, RecommendItems):
        e_a, flag = _mean_rows(emb.item_vecs, action.items, d), 1.0
    else:
        raise InvalidArgument(f"not an action: {action!r}")
    return np.concatenate([
        _mean_rows(emb.attr_vecs, state.accepted, d),
        _mean_rows(emb.attr_vecs, state.rejected_attrs, d),
        _mean_rows(emb.item_vecs, state.rejected_items, d),
        emb.user_vecs[state.user],
        e_a,
        [flag, state.turn / t_max],
    ])


def _check(phi: RewardParams, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape != (phi.n_features,):
        raise InvalidArgument(f"expected {phi.n_features} features, got shape {feats.shape}")
    return feats


def intrinsic_reward(phi: RewardParams, feats) -> float:
    feats = _check(phi, feats)
    hidden = np.tanh(phi["U_1"] @ feats + phi["c_1"])
    return float(np.tanh(phi["u_2"] @ hidden + phi["c_2"]))


def intrinsic_reward_and_grad(phi: RewardParams, feats) -> tuple[float, np.ndarray]:
    feats = _check(phi, feats)
    hidden = np.tanh(phi["U_1"] @ feats + phi["c_1"])
    r = np.tanh(phi["u_2"] @ hidden + phi["c_2"])
    d_out = 1.0 - r * r
    d_hidden = d_out * phi["u_2"] * (1.0 - hidden * hidden)
    grad = RewardParams(phi.n_features, phi.q)
    grad["U_1"][:] = np.outer(d_hidden, feats)
    grad["c_1"][:] = d_hidden
    grad["u_2"][:] = d_out * hidden
    grad["c_2"][...] = d_out
    return float(r), grad.flat


def intrinsic_reward_grad(phi: RewardParams, feats) -> np.ndarray:
    return intrinsic_reward_and_grad(phi, feats)[1]
