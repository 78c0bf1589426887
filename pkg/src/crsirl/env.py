"""Multi-round conversational recommendation MDP with a simulated user.

A state holds the accepted and rejected attributes, the rejected items and
the remaining candidate items. The agent either asks about one attribute or
recommends a short list; the simulated user answers from the target item's
attribute set and accepts a list iff it contains the target.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from enum import Enum
from typing import Union

import numpy as np

from crsirl.catalog import Catalog, EmbeddingTable
from crsirl.checkpoint import atomic_write_text
from crsirl.errors import (
    DegenerateWeightsError,
    EpisodeFinishedError,
    InvalidArgument,
    NotACandidateError,
)


@dataclass(frozen=True)
class ConversationState:
    user: int
    accepted: tuple[int, ...]
    rejected_attrs: tuple[int, ...]
    rejected_items: tuple[int, ...]
    candidates: tuple[int, ...]
    turn: int = 0
    done: bool = False


@dataclass(frozen=True)
class AskAttribute:
    attribute: int


@dataclass(frozen=True)
class RecommendItems:
    items: tuple[int, ...]


Action = Union[AskAttribute, RecommendItems]


@dataclass(frozen=True)
class UserSimulator:
    target: int
    oracle_attrs: frozenset[int]

    @classmethod
    def for_target(cls, target: int, catalog: Catalog) -> UserSimulator:
        if target not in catalog.item_attrs:
            raise InvalidArgument(f"unknown item {target}")
        return cls(target, frozenset(catalog.item_attrs[target]))


@dataclass(frozen=True)
class Sparse:
    success_reward: float = 1.0
    failure_reward: float = -1.0

    def __post_init__(self):
        if not self.success_reward > 0 > self.failure_reward:
            raise InvalidArgument("sparse rewards need success > 0 > failure")


@dataclass(frozen=True)
class Handcrafted:
    rec_suc: float = 1.0
    rec_fail: float = -0.1
    ask_suc: float = 0.1
    ask_fail: float = -0.1
    quit: float = -0.3


@dataclass(frozen=True)
class RuleBased:
    k: int = 10


RewardScheme = Union[Sparse, Handcrafted, RuleBased]


@dataclass(frozen=True)
class StepOutcome:
    next_state: ConversationState
    reward: float
    done: bool
    success: bool


@dataclass(frozen=True)
class ActionSpace:
    items: tuple[int, ...]
    item_scores: tuple[float, ...]
    attributes: tuple[int, ...]
    attribute_scores: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.items) + len(self.attributes)


class Judgement(Enum):
    ASK_BETTER = "ask"
    RECOMMEND_BETTER = "recommend"


# ---------------------------------------------------------------- candidates


def _check_items(items, catalog: Catalog) -> None:
    for v in items:
        if not 0 <= v < catalog.n_items:
            raise InvalidArgument(f"unknown item {v}")


def _check_attrs(attrs, catalog: Catalog) -> None:
    for p in attrs:
        if not 0 <= p < catalog.n_attrs:
            raise InvalidArgument(f"unknown attribute {p}")


def candidate_items(accepted, rejected_items, catalog: Catalog) -> tuple[int, ...]:
    """Items holding every accepted attribute, minus rejected items."""
    accepted, rejected_items = list(accepted), list(rejected_items)
    _check_attrs(accepted, catalog)
    _check_items(rejected_items, catalog)
    mask = catalog.incidence[:, accepted].all(axis=1)
    mask[rejected_items] = False
    return tuple(int(v) for v in np.flatnonzero(mask))


def candidate_attributes(state: ConversationState, catalog: Catalog) -> tuple[int, ...]:
    if not state.candidates:
        return ()
    held = catalog.incidence[list(state.candidates)].any(axis=0)
    held[list(state.accepted)] = False
    held[list(state.rejected_attrs)] = False
    return tuple(int(p) for p in np.flatnonzero(held))


def initial_state(user: int, simulator: UserSimulator, catalog: Catalog, rng: np.random.Generator) -> ConversationState:
    """The simulated user opens by naming one random attribute of the target."""
    if not simulator.oracle_attrs:
        raise InvalidArgument("target item has an empty attribute set")
    if not 0 <= user < catalog.n_users:
        raise InvalidArgument(f"unknown user {user}")
    oracle = sorted(simulator.oracle_attrs)
    first = oracle[int(rng.integers(len(oracle)))]
    return ConversationState(
        user=user,
        accepted=(first,),
        rejected_attrs=(),
        rejected_items=(),
        candidates=candidate_items((first,), (), catalog),
        turn=0,
    )


# ------------------------------------------------------------------- scoring


def item_scores(state: ConversationState, items, emb: EmbeddingTable, catalog: Catalog) -> np.ndarray:
    """Vectorised preference score for a batch of items.

    ``e_u.e_v + sum_{p in P+} e_v.e_p - sum_{p in P- and P_v} e_v.e_p``
    """
    items = np.asarray(items, dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= emb.item_vecs.shape[0]):
        raise InvalidArgument("item without an embedding")
    if not 0 <= state.user < emb.user_vecs.shape[0]:
        raise InvalidArgument(f"user {state.user} has no embedding")
    for p in (*state.accepted, *state.rejected_attrs):
        if not 0 <= p < emb.attr_vecs.shape[0]:
            raise InvalidArgument(f"attribute {p} has no embedding")
    dots = emb.item_attr_dots[items]
    score = emb.item_user_dots[items, state.user].copy()
    if state.accepted:
        score += dots[:, list(state.accepted)].sum(axis=1)
    if state.rejected_attrs:
        rej = list(state.rejected_attrs)
        score -= (dots[:, rej] * catalog.incidence[items][:, rej]).sum(axis=1)
    return score


def item_score(state: ConversationState, v: int, emb: EmbeddingTable, catalog: Catalog) -> float:
    return float(item_scores(state, [v], emb, catalog)[0])


def neg_p_log_p(prob):
    """``-p ln p`` with the limit value 0 at p = 0."""
    prob = np.asarray(prob, dtype=np.float64)
    safe = np.where(prob > 0, prob, 1.0)
    return np.where(prob > 0, -prob * np.log(safe), 0.0)


def attribute_entropy_score(state: ConversationState, p: int, emb: EmbeddingTable, catalog: Catalog) -> float:
    """Weighted-entropy score of asking about attribute ``p``.

    Raises DegenerateWeightsError when the candidate weights cannot be read
    as a distribution (nonpositive total, or mixed signs pushing the
    coverage outside [0, 1]).
    """
    if not state.candidates:
        raise InvalidArgument("no candidate items")
    _check_attrs([p], catalog)
    cand = list(state.candidates)
    w = item_scores(state, cand, emb, catalog)
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError(f"total candidate weight {total!r} is not positive")
    prob = float(w[catalog.incidence[cand, p]].sum() / total)
    if not 0.0 <= prob <= 1.0:
        raise DegenerateWeightsError(f"weighted coverage {prob!r} is outside [0, 1]")
    return float(neg_p_log_p(prob))


def attribute_entropy_scores(state: ConversationState, attrs, emb: EmbeddingTable, catalog: Catalog) -> np.ndarray:
    """Batch weighted-entropy scores with the unweighted fallback."""
    attrs = list(attrs)
    if not attrs:
        return np.zeros(0)
    cand = list(state.candidates)
    w = item_scores(state, cand, emb, catalog)
    if not (w.sum() > 0 and w.min() >= 0):
        w = np.ones(len(cand))
    prob = (w @ catalog.incidence[np.ix_(cand, attrs)]) / w.sum()
    return neg_p_log_p(np.clip(prob, 0.0, 1.0))


def _rank_order(ids, scores) -> list[int]:
    """Descending score, ties by ascending id."""
    ids = np.asarray(ids, dtype=np.int64)
    order = np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))
    return [int(i) for i in order]


def select_action_space(
    state: ConversationState,
    k_v: int,
    k_p: int,
    emb: EmbeddingTable,
    catalog: Catalog,
    k: int = 1,
) -> ActionSpace:
    if k_v < k:
        raise InvalidArgument(f"K_v={k_v} must be at least the list size K={k}")
    cand = state.candidates
    sc = item_scores(state, cand, emb, catalog)
    top_items = _rank_order(cand, sc)[:k_v]
    attrs = candidate_attributes(state, catalog)
    asc = attribute_entropy_scores(state, attrs, emb, catalog)
    top_attrs = _rank_order(attrs, asc)[:k_p]
    return ActionSpace(
        items=tuple(cand[i] for i in top_items),
        item_scores=tuple(float(sc[i]) for i in top_items),
        attributes=tuple(attrs[i] for i in top_attrs),
        attribute_scores=tuple(float(asc[i]) for i in top_attrs),
    )


def target_rank(state: ConversationState, target: int, emb: EmbeddingTable, catalog: Catalog) -> int:
    cand = state.candidates
    if target not in cand:
        raise NotACandidateError(f"item {target} is not a candidate")
    sc = item_scores(state, cand, emb, catalog)
    t = sc[cand.index(target)]
    ahead = sum(1 for v, s in zip(cand, sc) if s > t or (s == t and v < target))
    return ahead + 1


# --------------------------------------------------------------- transitions


def _transition(state: ConversationState, action: Action, simulator: UserSimulator, catalog: Catalog):
    """Apply the user's answer. Returns (next_state without turn bump, success, accepted_answer)."""
    if isinstance(action, AskAttribute):
        p = action.attribute
        if p in simulator.oracle_attrs:
            accepted = state.accepted + (p,)
            nxt = replace(state, accepted=accepted,
                          candidates=candidate_items(accepted, state.rejected_items, catalog))
            return nxt, False, True
        return replace(state, rejected_attrs=state.rejected_attrs + (p,)), False, False
    if simulator.target in action.items:
        return state, True, True
    rejected = state.rejected_items + tuple(v for v in action.items if v not in state.rejected_items)
    nxt = replace(state, rejected_items=rejected,
                  candidates=candidate_items(state.accepted, rejected, catalog))
    return nxt, False, False


def _validate(state: ConversationState, action: Action, catalog: Catalog) -> None:
    if isinstance(action, AskAttribute):
        _check_attrs([action.attribute], catalog)
        if action.attribute not in candidate_attributes(state, catalog):
            raise InvalidArgument(f"attribute {action.attribute} is not a candidate attribute")
    elif isinstance(action, RecommendItems):
        items = tuple(action.items)
        _check_items(items, catalog)
        if not items:
            raise InvalidArgument("empty recommendation list")
        if len(set(items)) != len(items):
            raise InvalidArgument("recommendation list has duplicates")
        cand = set(state.candidates)
        if any(v not in cand for v in items):
            raise InvalidArgument("recommended item is not a candidate")
    else:
        raise InvalidArgument(f"not an action: {action!r}")


def step(
    state: ConversationState,
    action: Action,
    simulator: UserSimulator,
    scheme: RewardScheme,
    t_max: int,
    catalog: Catalog,
    emb: EmbeddingTable,
) -> StepOutcome:
    if state.done or state.turn >= t_max:
        raise EpisodeFinishedError("episode is already finished")
    _validate(state, action, catalog)

    if isinstance(scheme, RuleBased):
        verdict = rule_judge(*rule_counterfactuals(state, simulator, scheme.k, emb, catalog))
        wanted = AskAttribute if verdict is Judgement.ASK_BETTER else RecommendItems
        rule_reward = 1.0 if isinstance(action, wanted) else 0.0

    nxt, success, positive = _transition(state, action, simulator, catalog)
    done = success or state.turn + 1 >= t_max
    nxt = replace(nxt, turn=state.turn + 1, done=done)

    if isinstance(scheme, Sparse):
        if success:
            reward = scheme.success_reward
        elif done:
            reward = scheme.failure_reward
        else:
            reward = 0.0
    elif isinstance(scheme, Handcrafted):
        if isinstance(action, AskAttribute):
            reward = scheme.ask_suc if positive else scheme.ask_fail
        else:
            reward = scheme.rec_suc if success else scheme.rec_fail
        if done and not success:
            reward += scheme.quit
    elif isinstance(scheme, RuleBased):
        reward = rule_reward
    else:
        raise InvalidArgument(f"unknown reward scheme {scheme!r}")
    return StepOutcome(next_state=nxt, reward=float(reward), done=done, success=success)


# ---------------------------------------------------------------- rule judge


def rule_judge(l_b: int, k_b: int, l_a: int, k_a: int, l_r: int, k_r: int) -> Judgement:
    k_a_m = k_a - k_b
    l_a_m = l_a - l_b
    k_r_m = k_r - k_b
    l_r_m = l_r - l_b
    if l_b <= 50:
        if l_b <= 10:
            return Judgement.RECOMMEND_BETTER
        return Judgement.ASK_BETTER if k_a_m > k_r_m else Judgement.RECOMMEND_BETTER
    if k_a_m + 0.5 * l_a_m > k_r_m + 0.5 * l_r_m:
        return Judgement.ASK_BETTER
    return Judgement.RECOMMEND_BETTER


def top_entropy_attribute(state: ConversationState, emb: EmbeddingTable, catalog: Catalog) -> int | None:
    attrs = candidate_attributes(state, catalog)
    if not attrs:
        return None
    scores = attribute_entropy_scores(state, attrs, emb, catalog)
    return attrs[_rank_order(attrs, scores)[0]]


def top_k_items(state: ConversationState, k: int, emb: EmbeddingTable, catalog: Catalog) -> tuple[int, ...]:
    cand = state.candidates
    sc = item_scores(state, cand, emb, catalog)
    return tuple(cand[i] for i in _rank_order(cand, sc)[:k])


def rule_counterfactuals(state: ConversationState, simulator: UserSimulator, k: int, emb: EmbeddingTable, catalog: Catalog):
    """Candidate counts and target ranks now, after asking, and after recommending."""
    target = simulator.target
    l_b = len(state.candidates)
    k_b = target_rank(state, target, emb, catalog)

    p = top_entropy_attribute(state, emb, catalog)
    if p is None:
        l_a, k_a = l_b, k_b
    else:
        asked, _, _ = _transition(state, AskAttribute(p), simulator, catalog)
        l_a, k_a = len(asked.candidates), target_rank(asked, target, emb, catalog)

    rec = top_k_items(state, k, emb, catalog)
    if target in rec:
        l_r, k_r = l_b, k_b
    else:
        after, _, _ = _transition(state, RecommendItems(rec), simulator, catalog)
        l_r, k_r = len(after.candidates), target_rank(after, target, emb, catalog)
    return l_b, k_b, l_a, k_a, l_r, k_r


# -------------------------------------------------------------- trace export


def trace_record(outcome: StepOutcome, action: Action, rank_of_target: int | None) -> dict:
    if isinstance(action, AskAttribute):
        kind, ids = "ask", [action.attribute]
    else:
        kind, ids = "recommend", list(action.items)
    return {
        "turn": outcome.next_state.turn,
        "action_type": kind,
        "action_ids": ids,
        "accepted": list(outcome.next_state.accepted),
        "reward": outcome.reward,
        "rank_of_target": rank_of_target,
        "done": outcome.done,
        "success": outcome.success,
    }


def write_trace(path: str | os.PathLike, records) -> None:
    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in records))
