"""Success rate, average turns and hierarchical DCG, plus the evaluation runner."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from math import log2
from typing import Callable

import numpy as np

from crsirl.catalog import Catalog, EmbeddingTable
from crsirl.checkpoint import atomic_write_text
from crsirl.env import (
    Sparse,
    UserSimulator,
    initial_state,
    select_action_space,
    step,
    target_rank,
    trace_record,
)
from crsirl.errors import InvalidArgument, NoActionsError


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    turns: int
    success_turn: int | None = None
    success_position: int | None = None

    def __post_init__(self):
        if self.success != (self.success_turn is not None and self.success_position is not None):
            raise InvalidArgument("success iff both the success turn and position are set")


@dataclass(frozen=True)
class MetricsReport:
    sr_at_T: float
    at: float
    hdcg: float
    n_episodes: int
    per_seed: tuple = field(default=())


def _nonempty(results):
    results = list(results)
    if not results:
        raise InvalidArgument("no episode results")
    return results


def success_rate(results, T: int) -> float:
    results = _nonempty(results)
    return sum(1 for r in results if r.success and r.success_turn <= T) / len(results)


def average_turns(results) -> float:
    results = _nonempty(results)
    return float(np.mean([r.turns for r in results]))


def hdcg_term(t: int, k: int) -> float:
    """Gain of a hit at turn ``t`` and list position ``k`` (both 1-based)."""
    return 1.0 / log2(t + 2) + (1.0 / log2(t + 1) - 1.0 / log2(t + 2)) / log2(k + 1)


def episode_hdcg(result: EpisodeResult, T: int = 15, K: int = 10) -> float:
    if not result.success:
        return 0.0
    if result.success_turn > T or result.success_position > K:
        raise InvalidArgument(f"hit at ({result.success_turn}, {result.success_position}) lies outside ({T}, {K})")
    return hdcg_term(result.success_turn, result.success_position)


def hdcg(results, T: int = 15, K: int = 10) -> float:
    results = _nonempty(results)
    return float(np.mean([episode_hdcg(r, T, K) for r in results]))


# --------------------------------------------------------------------- runner

# A policy maps (state, action space, simulator, rng) to an env action.
PolicyFn = Callable


def run_episode(policy: PolicyFn, pair, config, catalog: Catalog, emb: EmbeddingTable,
                rng: np.random.Generator, trace: list | None = None) -> EpisodeResult:
    user, target = pair
    sim = UserSimulator.for_target(target, catalog)
    state = initial_state(user, sim, catalog, rng)
    scheme = config.scheme() if hasattr(config, "scheme") else Sparse()
    while True:
        space = select_action_space(state, config.k_v, config.k_p, emb, catalog, config.k)
        if len(space) == 0:
            return EpisodeResult(False, config.t_max)
        try:
            action = policy(state, space, sim, rng)
        except NoActionsError:
            return EpisodeResult(False, config.t_max)
        out = step(state, action, sim, scheme, config.t_max, catalog, emb)
        if trace is not None:
            rank = target_rank(out.next_state, target, emb, catalog)
            trace.append(trace_record(out, action, rank))
        if out.success:
            pos = action.items.index(target) + 1
            return EpisodeResult(True, out.next_state.turn, out.next_state.turn, pos)
        if out.done:
            return EpisodeResult(False, config.t_max)
        state = out.next_state


def evaluate_policy(policy: PolicyFn, test_pairs, config, seeds, catalog: Catalog, emb: EmbeddingTable,
                    traces: list | None = None) -> MetricsReport:
    """One episode per (pair, seed); metrics per seed and over everything."""
    test_pairs = list(test_pairs)
    if not test_pairs:
        raise InvalidArgument("no test pairs")
    everything, per_seed = [], []
    for seed in seeds:
        results = []
        for i, pair in enumerate(test_pairs):
            rng = np.random.default_rng([int(seed), i])
            results.append(run_episode(policy, pair, config, catalog, emb, rng, traces))
        per_seed.append((seed, success_rate(results, config.t_max), average_turns(results),
                         hdcg(results, config.t_max, config.k), len(results)))
        everything.extend(results)
    return MetricsReport(
        sr_at_T=success_rate(everything, config.t_max),
        at=average_turns(everything),
        hdcg=hdcg(everything, config.t_max, config.k),
        n_episodes=len(everything),
        per_seed=tuple(per_seed),
    )


def make_policy(name: str, config, catalog: Catalog, emb: EmbeddingTable, theta=None) -> PolicyFn:
    from crsirl import policy as pol

    k = config.k
    if name in ("pg", "crsirl"):
        if theta is None:
            raise InvalidArgument(f"algorithm {name!r} needs policy parameters")

        def learned(state, space, sim, rng):
            x = pol.state_features(state, emb, catalog, config.k_v)
            scores = pol.scores_from_features(theta, x, pol.action_embeddings(space, emb))
            return pol.choice_to_action(space, int(np.argmax(scores)), k)
        return learned
    if name == "maxent":
        return lambda state, space, sim, rng: pol.max_entropy_policy(state, space, emb, catalog, k)
    if name == "absgreedy":
        return lambda state, space, sim, rng: pol.abs_greedy_policy(state, space, emb, catalog, k)
    if name == "rulejudge":
        return lambda state, space, sim, rng: pol.two_action_rule_policy(state, sim, k, emb, catalog)
    if name == "random":
        return lambda state, space, sim, rng: pol.choice_to_action(space, int(rng.integers(len(space))), k)
    raise InvalidArgument(f"unknown algorithm {name!r}")


def evaluate_learned(theta, pairs, config, seeds, catalog: Catalog, emb: EmbeddingTable) -> MetricsReport:
    return evaluate_policy(make_policy("pg", config, catalog, emb, theta), pairs, config, seeds, catalog, emb)


METRIC_COLUMNS = ("seed", "sr_at_T", "at", "hdcg", "n_episodes")


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def report_rows(report: MetricsReport, extra: dict | None = None) -> list[dict]:
    extra = extra or {}
    rows = [{**extra, "seed": s, "sr_at_T": sr, "at": at, "hdcg": h, "n_episodes": n}
            for s, sr, at, h, n in report.per_seed]
    rows.append({**extra, "seed": "all", "sr_at_T": report.sr_at_T, "at": report.at,
                 "hdcg": report.hdcg, "n_episodes": report.n_episodes})
    return rows


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return buf.getvalue()


def write_metrics_csv(path: str | os.PathLike, report: MetricsReport) -> None:
    atomic_write_text(path, rows_to_csv(report_rows(report), METRIC_COLUMNS))
