"""Acceptance criteria A1-A9. Each test prints one PASS/FAIL line; the lines are repeated in the run summary."""

import json
import time
from dataclasses import replace

import numpy as np

from crsirl.bilevel import (
    TrainConfig,
    continue_pg,
    init_policy,
    inner_update,
    meta_gradient,
    mgda_alpha,
    outer_extrinsic_grad,
    outer_extrinsic_loss,
    outer_preference_grad,
    preference_loss,
    preference_prob,
    preference_prob_from_sums,
    pretrain_pg,
    rank_potential,
    rollout,
    train_crsirl,
    trajectory_log_prob,
)
from crsirl.catalog import generate_synthetic_world, pretrain_embeddings, split_interactions
from crsirl.cli import main
from crsirl.env import (
    Judgement,
    Sparse,
    UserSimulator,
    initial_state,
    rule_judge,
    select_action_space,
    step,
)
from crsirl.intrinsic import RewardParams, feature_length
from crsirl.metrics import EpisodeResult, evaluate_learned, evaluate_policy, hdcg, make_policy
from crsirl.policy import choice_to_action, log_prob_and_grad

RESULTS = []
A7_SEEDS = 10


def verdict(name, ok, detail):
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------- A1


def test_a1_meta_gradient_oracle(tiny_world):
    cat, _, emb = tiny_world
    cfg = TrainConfig(t_max=5, k=2, k_v=3, k_p=3, h_dim=4, m=4, q=3, lam=0.7, eta=0.3, gamma=0.9)
    pairs = list(cat.interactions)
    start = time.perf_counter()
    worst, n_theta, n_phi = 0.0, 0, 0
    for draw in range(20):
        rng = np.random.default_rng(draw)
        theta = init_policy(replace(cfg, seed=draw), emb)
        phi = RewardParams.init(feature_length(emb.dim), cfg.q, seed=draw)
        phi = phi.with_flat(phi.flat + 0.3 * rng.normal(size=len(phi)))
        n_theta, n_phi = len(theta), len(phi)
        picks = rng.choice(len(pairs), size=4, replace=False)
        ti, to, pa, pb = (rollout(theta, phi if j == 0 else None, pairs[i], cfg, rng, cat, emb)
                          for j, i in enumerate(picks))
        alpha = float(rng.uniform())

        def outer(flat):
            t2, _ = inner_update(theta, phi.with_flat(flat), ti, cfg)
            return alpha * outer_extrinsic_loss(t2, to, cfg.gamma) + (1 - alpha) * preference_loss(t2, [(pa, pb)])

        t2, mf = inner_update(theta, phi, ti, cfg)
        g = meta_gradient(alpha, outer_extrinsic_grad(t2, to, cfg.gamma), outer_preference_grad(t2, [(pa, pb)]), mf)
        eps = 1e-5
        fd = np.array([(outer(phi.flat + eps * e) - outer(phi.flat - eps * e)) / (2 * eps) for e in np.eye(n_phi)])
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)))
    elapsed = time.perf_counter() - start
    verdict("A1", n_theta <= 200 and n_phi <= 100 and worst < 1e-4 and elapsed < 60,
            f"max rel err {worst:.2e} over 20 draws, |theta|={n_theta}, |phi|={n_phi}, {elapsed:.1f}s")


# ---------------------------------------------------------------------- A2


def test_a2_mgda_oracle():
    rng = np.random.default_rng(0)
    grid = np.linspace(0.0, 1.0, 1001)
    start = time.perf_counter()
    worst_gap, worst_norm = 0.0, -np.inf
    for _ in range(1000):
        d = int(rng.integers(1, 501))
        scale = 10.0 ** rng.uniform(-3, 3, size=2)
        g_ex, g_p = scale[0] * rng.normal(size=d), scale[1] * rng.normal(size=d)
        a = mgda_alpha(g_ex, g_p)
        diff = g_ex - g_p
        obj = np.sum((grid[:, None] * diff[None, :] + g_p[None, :]) ** 2, axis=1)
        worst_gap = max(worst_gap, abs(a - grid[np.argmin(obj)]))
        norm = np.linalg.norm(a * g_ex + (1 - a) * g_p)
        worst_norm = max(worst_norm, norm - min(np.linalg.norm(g_ex), np.linalg.norm(g_p)))
    elapsed = time.perf_counter() - start
    verdict("A2", worst_gap <= 1e-3 and worst_norm <= 1e-9 and elapsed < 10,
            f"max |alpha - grid| {worst_gap:.1e}, max norm excess {worst_norm:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------- A3


def _greedy_sets(P, R, gamma):
    """Value iteration to convergence, then the set of optimal actions per state."""
    n, m = R.shape
    V = np.zeros(n)
    for _ in range(5000):
        Q = R + gamma * np.einsum("san,n->sa", P, V)
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < 1e-13:
            V = V_new
            break
        V = V_new
    Q = R + gamma * np.einsum("san,n->sa", P, V)
    return [frozenset(np.flatnonzero(q >= q.max() - 1e-9)) for q in Q]


def test_a3_shaping_keeps_optimal_actions():
    rng = np.random.default_rng(0)
    gamma = 0.9
    start = time.perf_counter()
    mismatches = 0
    for mdp in range(50):
        n, m = int(rng.integers(2, 21)), int(rng.integers(1, 5))
        P = rng.dirichlet(np.ones(n) * 0.5, size=(n, m))
        R = rng.normal(size=(n, m))
        if mdp % 5 == 0 and m > 1:
            # duplicated action: a tied optimal set must survive shaping too
            P[:, 1], R[:, 1] = P[:, 0], R[:, 0]
        if mdp % 2:
            phi = rng.normal(scale=3.0, size=n)
        else:
            phi = rank_potential(rng.integers(1, 60, size=n))
        F = gamma * np.einsum("san,n->sa", P, phi) - phi[:, None]
        mismatches += _greedy_sets(P, R, gamma) != _greedy_sets(P, R + F, gamma)
    elapsed = time.perf_counter() - start
    verdict("A3", mismatches == 0 and elapsed < 30, f"{mismatches} of 50 MDPs changed their optimal actions, {elapsed:.1f}s")


# ---------------------------------------------------------------------- A4


def test_a4_hdcg_values():
    top = hdcg([EpisodeResult(True, 1, 1, 1)])
    late = hdcg([EpisodeResult(True, 15, 15, 10)])
    miss = hdcg([EpisodeResult(False, 15)])
    verdict("A4", top == 1.0 and abs(late - 0.2462) <= 5e-4 and miss == 0.0,
            f"(1,1) -> {top!r}, (15,10) -> {late:.5f}, failure -> {miss!r}")


# ---------------------------------------------------------------------- A5


def test_a5_environment_invariants():
    cat = generate_synthetic_world(30, 60, 15, (3, 8), 20, 3, seed=11)
    emb = pretrain_embeddings(cat.interactions, cat, dim=8, epochs=10, seed=0)
    cfg = TrainConfig(t_max=15, k=3)
    rng = np.random.default_rng(5)
    pairs = cat.interactions
    start = time.perf_counter()
    violations = n_steps = 0
    for ep in range(10_000):
        user, target = pairs[int(rng.integers(len(pairs)))]
        sim = UserSimulator.for_target(target, cat)
        state = initial_state(user, sim, cat, rng)
        while not state.done:
            space = select_action_space(state, cfg.k_v, cfg.k_p, emb, cat, cfg.k)
            action = choice_to_action(space, int(rng.integers(len(space))), cfg.k)
            out = step(state, action, sim, Sparse(), cfg.t_max, cat, emb)
            nxt = out.next_state
            n_steps += 1
            violations += not set(nxt.candidates) <= set(state.candidates)
            violations += target not in nxt.candidates
            violations += not set(nxt.accepted) <= cat.item_attrs[target]
            state = nxt
    elapsed = time.perf_counter() - start
    verdict("A5", violations == 0 and elapsed < 60,
            f"{violations} violations over 10000 episodes ({n_steps} steps), {elapsed:.1f}s")


# ---------------------------------------------------------------------- A6


def test_a6_rule_judge():
    ask, rec = Judgement.ASK_BETTER, Judgement.RECOMMEND_BETTER
    cases = [
        ((8, 1, 1, 1, 1, 1), rec),
        ((8, 5, 0, 0, 100, 100), rec),
        ((10, 3, 1, 9, 1, 0), rec),
        ((30, 4, 20, 6, 27, 5), ask),
        ((30, 4, 20, 5, 27, 5), rec),
        ((50, 4, 1, 4, 1, 5), rec),
        ((100, 10, 104, 13, 104, 11), ask),
        ((100, 10, 104, 11, 104, 13), rec),
        ((51, 0, 51, 1, 51, 1), rec),
    ]
    wrong = [args for args, want in cases if rule_judge(*args) is not want]
    rng = np.random.default_rng(0)
    tuples = rng.integers(0, 200, size=(100_000, 6)).tolist()
    first = [rule_judge(*t) for t in tuples]
    impure = sum(a is not rule_judge(*t) for a, t in zip(first, tuples))
    verdict("A6", not wrong and impure == 0,
            f"{len(cases) - len(wrong)}/{len(cases)} branch examples, {impure} differing repeats over 1e5 tuples")


# ---------------------------------------------------------------------- A7


def _bootstrap_lower(diffs, n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    diffs = np.asarray(diffs)
    means = diffs[rng.integers(len(diffs), size=(n, len(diffs)))].mean(axis=1)
    return float(np.percentile(means, 2.5))


def test_a7_learning_separation():
    start = time.perf_counter()
    cat = generate_synthetic_world(30, 60, 15, (8, 12), 20, 1, 0)
    splits = split_interactions(cat, (7, 1.5, 1.5), 0)
    emb = pretrain_embeddings(splits.train, cat, 16, 100, 1.0, 0.05, 1, 0)
    eval_seeds = [0, 1, 2]
    base = TrainConfig(t_max=10, k=3)
    rand = evaluate_policy(make_policy("random", base, cat, emb), splits.test, base, eval_seeds, cat, emb)
    pg_sr, cont, crs = [], [], []
    for seed in range(A7_SEEDS):
        cfg = replace(base, seed=seed, pg_baseline=True)
        theta = pretrain_pg(cfg, cat, emb, splits.valid)
        pg_sr.append(evaluate_learned(theta, splits.test, cfg, eval_seeds, cat, emb).sr_at_T)
        cont.append(evaluate_learned(continue_pg(cfg, cat, emb, theta, splits.valid), splits.test, cfg,
                                     eval_seeds, cat, emb))
        tuned = train_crsirl(cfg, cat, emb, theta, splits.valid)[0]
        crs.append(evaluate_learned(tuned, splits.test, cfg, eval_seeds, cat, emb))
    gap = float(np.mean(pg_sr)) - rand.sr_at_T
    diffs = [c.sr_at_T - p.sr_at_T for c, p in zip(crs, cont)]
    lower = _bootstrap_lower(diffs)
    at_crs, at_pg = np.mean([c.at for c in crs]), np.mean([p.at for p in cont])
    elapsed = time.perf_counter() - start
    ok = gap >= 0.2 and lower > -0.02 and at_crs <= at_pg + 0.5 and elapsed < 600
    verdict("A7", ok,
            f"PG - random SR {gap:+.3f} (per-seed PG {', '.join(f'{s:.3f}' for s in pg_sr)}; random {rand.sr_at_T:.3f}); "
            f"CRSIRL - PG SR diffs {', '.join(f'{d:+.3f}' for d in diffs)}, bootstrap 2.5% {lower:+.3f}; "
            f"AT {at_crs:.2f} vs {at_pg:.2f}; {elapsed:.0f}s")


# ---------------------------------------------------------------------- A8


def test_a8_bradley_terry(small_world):
    cat, _, emb = small_world
    cfg = TrainConfig(t_max=8, k=3, h_dim=8, m=8)
    theta = init_policy(cfg, emb)
    rng = np.random.default_rng(0)
    pairs = cat.interactions
    trajs = [rollout(theta, None, pairs[int(rng.integers(len(pairs)))], cfg, rng, cat, emb) for _ in range(200)]
    comp = shift = 0.0
    non_monotone = consistent = 0
    for _ in range(1000):
        i, j = rng.integers(len(trajs), size=2)
        t0, t1 = trajs[i], trajs[j]
        steps0 = [log_prob_and_grad(theta, s.x, s.E_a, s.chosen)[0] for s in t0.steps]
        s0, s1 = float(np.sum(steps0)), trajectory_log_prob(theta, t1)[0]
        p = preference_prob(theta, t0, t1)
        consistent += abs(p - preference_prob_from_sums(s0, s1)) > 1e-12
        comp = max(comp, abs(p + preference_prob(theta, t1, t0) - 1.0))
        c = float(rng.normal(scale=50.0))
        shift = max(shift, abs(preference_prob_from_sums(s0 + c, s1 + c) - p))
        k = int(rng.integers(len(steps0)))
        bumped = list(steps0)
        bumped[k] += float(rng.uniform(1e-3, 1.0))
        non_monotone += not preference_prob_from_sums(float(np.sum(bumped)), s1) > p
    verdict("A8", comp <= 1e-12 and shift <= 1e-12 and non_monotone == 0 and consistent == 0,
            f"complementarity {comp:.1e}, shift {shift:.1e}, {non_monotone} monotonicity failures over 1000 pairs")


# ---------------------------------------------------------------------- A9


def test_a9_pipeline_determinism(tmp_path):
    doc = {"n_users": 10, "n_items": 20, "n_attrs": 8, "attrs_per_item": [2, 4], "interactions_per_user": 6,
           "dim": 8, "embed_epochs": 10, "T_max": 8, "K": 3, "h_dim": 8, "m": 8, "q": 8,
           "pretrain_episodes": 100, "outer_iterations": 30, "seeds": [0, 1, 2]}
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        cfg = tmp_path / f"{run}.json"
        cfg.write_text(json.dumps({**doc, "out": str(out)}))
        codes = [main([cmd, "--config", str(cfg)]) for cmd in ("gen", "embed", "pretrain", "train")]
        codes += [main(["eval", "--config", str(cfg), "--algorithm", alg]) for alg in ("crsirl", "pg", "random")]
        assert codes == [0] * len(codes)
        outputs.append({alg: (out / f"metrics_{alg}.csv").read_bytes() for alg in ("crsirl", "pg", "random")})
    same = outputs[0] == outputs[1]
    verdict("A9", same, f"metrics CSVs {'byte-identical' if same else 'differ'} across two runs")
