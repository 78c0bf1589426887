"""Softmax policy over the pre-selected action space, plus fixed baselines.

The state encoder mean-pools embedding sets and applies one tanh layer:

    x = [mean e_{P+}, mean e_{P-}, mean e_{V-}, mean e_{top-n cand}, e_u]
    h = tanh(W_e x + b_e)

and each candidate action is scored by a one-hidden-layer head on
``[h, e_a]``. Everything downstream of ``x`` is differentiated by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crsirl.catalog import Catalog, EmbeddingTable
from crsirl.env import (
    ActionSpace,
    AskAttribute,
    ConversationState,
    Judgement,
    RecommendItems,
    UserSimulator,
    rule_counterfactuals,
    rule_judge,
    top_entropy_attribute,
    top_k_items,
)
from crsirl.errors import InvalidArgument, NoActionsError, NumericError
from crsirl.params import FlatParams, Layout


class PolicyParams(FlatParams):
    def __init__(self, dim: int, h_dim: int = 16, m: int = 16, flat=None):
        self.dim, self.h_dim, self.m = dim, h_dim, m
        layout = Layout(
            names=("W_e", "b_e", "W_1", "b_1", "w_2", "b_2"),
            shapes=((h_dim, 5 * dim), (h_dim,), (m, h_dim + dim), (m,), (m,), ()),
        )
        super().__init__(layout, flat)

    @classmethod
    def init(cls, dim: int, h_dim: int = 16, m: int = 16, seed: int = 0) -> PolicyParams:
        rng = np.random.default_rng(seed)
        p = cls(dim, h_dim, m)
        p["W_e"][:] = rng.normal(0, 1 / np.sqrt(5 * dim), size=(h_dim, 5 * dim))
        p["W_1"][:] = rng.normal(0, 1 / np.sqrt(h_dim + dim), size=(m, h_dim + dim))
        p["w_2"][:] = rng.normal(0, 1 / np.sqrt(m), size=m)
        return p


def _mean_rows(mat: np.ndarray, idx, dim: int) -> np.ndarray:
    if len(idx) == 0:
        return np.zeros(dim)
    return mat[list(idx)].mean(axis=0)


def state_features(state: ConversationState, emb: EmbeddingTable, catalog: Catalog, top_n: int = 10) -> np.ndarray:
    """The 5d-long pooled input of the encoder. Independent of any parameters."""
    d = emb.dim
    top = top_k_items(state, top_n, emb, catalog) if state.candidates else ()
    return np.concatenate([
        _mean_rows(emb.attr_vecs, state.accepted, d),
        _mean_rows(emb.attr_vecs, state.rejected_attrs, d),
        _mean_rows(emb.item_vecs, state.rejected_items, d),
        _mean_rows(emb.item_vecs, top, d),
        emb.user_vecs[state.user],
    ])


def action_embeddings(space: ActionSpace, emb: EmbeddingTable) -> np.ndarray:
    """Rows are item actions first, then attribute actions."""
    return np.concatenate([
        emb.item_vecs[list(space.items)].reshape(-1, emb.dim),
        emb.attr_vecs[list(space.attributes)].reshape(-1, emb.dim),
    ])


def choice_to_action(space: ActionSpace, index: int, k: int):
    """Picking any item action recommends the top-k pre-selected items."""
    if not 0 <= index < len(space):
        raise InvalidArgument(f"action index {index} out of range for {len(space)} actions")
    if index < len(space.items):
        return RecommendItems(tuple(space.items[:k]))
    return AskAttribute(space.attributes[index - len(space.items)])


def encode(theta: PolicyParams, x: np.ndarray) -> np.ndarray:
    return np.tanh(theta["W_e"] @ x + theta["b_e"])


def encode_state(theta: PolicyParams, state: ConversationState, emb: EmbeddingTable, catalog: Catalog,
                 top_n: int = 10) -> np.ndarray:
    return encode(theta, state_features(state, emb, catalog, top_n))


def _forward(theta: PolicyParams, x: np.ndarray, E_a: np.ndarray):
    h = encode(theta, x)
    W1 = theta["W_1"]
    H = theta.h_dim
    Z = (W1[:, :H] @ h)[None, :] + E_a @ W1[:, H:].T + theta["b_1"]
    G = np.tanh(Z)
    scores = G @ theta["w_2"] + theta["b_2"]
    return scores, (h, G)


def _backward(theta: PolicyParams, x: np.ndarray, E_a: np.ndarray, cache, delta: np.ndarray) -> np.ndarray:
    """Pull a gradient on the action scores back to a flat parameter gradient."""
    h, G = cache
    H = theta.h_dim
    W1 = theta["W_1"]
    grad = PolicyParams(theta.dim, theta.h_dim, theta.m)
    grad["w_2"][:] = G.T @ delta
    grad["b_2"][...] = delta.sum()
    dZ = delta[:, None] * theta["w_2"][None, :] * (1.0 - G * G)
    dz_sum = dZ.sum(axis=0)
    grad["W_1"][:, :H] = np.outer(dz_sum, h)
    grad["W_1"][:, H:] = dZ.T @ E_a
    grad["b_1"][:] = dz_sum
    dpre = (W1[:, :H].T @ dz_sum) * (1.0 - h * h)
    grad["W_e"][:] = np.outer(dpre, x)
    grad["b_e"][:] = dpre
    return grad.flat


def log_softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max()
    return z - np.log(np.exp(z).sum())


def softmax_logprob_grad(scores: np.ndarray, chosen: int) -> np.ndarray:
    """d ln softmax(scores)[chosen] / d scores = onehot(chosen) - probs."""
    g = -np.exp(log_softmax(scores))
    g[chosen] += 1.0
    return g


@dataclass(frozen=True)
class ActionDistribution:
    actions: tuple
    probs: np.ndarray
    log_probs: np.ndarray


def scores_from_features(theta: PolicyParams, x: np.ndarray, E_a: np.ndarray) -> np.ndarray:
    return _forward(theta, x, E_a)[0]


def log_prob_and_grad(theta: PolicyParams, x: np.ndarray, E_a: np.ndarray, chosen: int):
    """``ln pi(chosen | s)`` and its gradient, from precomputed features."""
    if not 0 <= chosen < len(E_a):
        raise InvalidArgument(f"chosen index {chosen} out of range for {len(E_a)} actions")
    scores, cache = _forward(theta, x, E_a)
    logp = log_softmax(scores)
    return float(logp[chosen]), _backward(theta, x, E_a, cache, softmax_logprob_grad(scores, chosen))


def action_distribution(theta: PolicyParams, state: ConversationState, space: ActionSpace,
                        emb: EmbeddingTable, catalog: Catalog, k: int = 10, top_n: int = 10) -> ActionDistribution:
    if len(space) == 0:
        raise NoActionsError("empty action space")
    x = state_features(state, emb, catalog, top_n)
    scores = scores_from_features(theta, x, action_embeddings(space, emb))
    logp = log_softmax(scores)
    actions = tuple(choice_to_action(space, i, k) for i in range(len(space)))
    return ActionDistribution(actions=actions, probs=np.exp(logp), log_probs=logp)


def log_prob_grad(theta: PolicyParams, state: ConversationState, space: ActionSpace, chosen: int,
                  emb: EmbeddingTable, catalog: Catalog, top_n: int = 10) -> np.ndarray:
    x = state_features(state, emb, catalog, top_n)
    return log_prob_and_grad(theta, x, action_embeddings(space, emb), chosen)[1]


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    """Adam moments for one flat parameter vector."""

    first: np.ndarray
    second: np.ndarray
    step: int = 0
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, step_size: float = 1e-3, **kw) -> OptimizerState:
        return cls(np.zeros(n), np.zeros(n), 0, step_size, **kw)


def apply_gradient(params, grad: np.ndarray, opt: OptimizerState):
    """One Adam descent step. Returns new (params, opt); inputs are untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    flat = params.flat if isinstance(params, FlatParams) else np.asarray(params, dtype=np.float64)
    if grad.shape != flat.shape or opt.first.shape != flat.shape:
        raise InvalidArgument(f"gradient shape {grad.shape} does not match parameters {flat.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    t = opt.step + 1
    first = opt.beta1 * opt.first + (1 - opt.beta1) * grad
    second = opt.beta2 * opt.second + (1 - opt.beta2) * grad * grad
    m_hat = first / (1 - opt.beta1 ** t)
    v_hat = second / (1 - opt.beta2 ** t)
    new_flat = flat - opt.step_size * m_hat / (np.sqrt(v_hat) + opt.eps)
    new_opt = OptimizerState(first, second, t, opt.step_size, opt.beta1, opt.beta2, opt.eps)
    if isinstance(params, FlatParams):
        return params.with_flat(new_flat), new_opt
    return new_flat, new_opt


# ------------------------------------------------------------------ baselines


def max_entropy_policy(state: ConversationState, space: ActionSpace, emb: EmbeddingTable,
                       catalog: Catalog, k: int = 10):
    if len(space) == 0:
        raise NoActionsError("empty action space")
    if space.attributes:
        # Pre-selected attributes are already sorted by entropy score, ties by id.
        return AskAttribute(space.attributes[0])
    return RecommendItems(tuple(space.items[:k]))


def abs_greedy_policy(state: ConversationState, space: ActionSpace, emb: EmbeddingTable,
                      catalog: Catalog, k: int = 10):
    if not space.items:
        raise NoActionsError("no candidate items")
    return RecommendItems(tuple(space.items[:k]))


def two_action_rule_policy(state: ConversationState, simulator: UserSimulator, k: int,
                           emb: EmbeddingTable, catalog: Catalog):
    verdict = rule_judge(*rule_counterfactuals(state, simulator, k, emb, catalog))
    if verdict is Judgement.ASK_BETTER:
        p = top_entropy_attribute(state, emb, catalog)
        if p is not None:
            return AskAttribute(p)
    return RecommendItems(top_k_items(state, k, emb, catalog))
