"""Command-line entry point.

    crsirl gen | embed | pretrain | train | eval | sweep  [--config PATH] [flags]

Every artifact lands under ``--out`` unless a ``*_path`` key says otherwise.
Exit status: 0 ok, 2 usage or missing input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from crsirl.bilevel import LOG_COLUMNS, pretrain_pg, train_crsirl
from crsirl.catalog import (
    InteractionSplits,
    generate_synthetic_world,
    load_catalog,
    load_embeddings,
    pretrain_embeddings,
    save_catalog,
    save_embeddings,
    split_interactions,
)
from crsirl.checkpoint import atomic_write_bytes, atomic_write_text, read_sections, write_sections
from crsirl.config import ALGORITHMS, ConfigError, RunConfig, parse_config, validate
from crsirl.env import write_trace
from crsirl.errors import CRSError, NumericError
from crsirl.intrinsic import RewardParams
from crsirl.metrics import METRIC_COLUMNS, evaluate_policy, make_policy, report_rows, rows_to_csv
from crsirl.policy import PolicyParams

log = logging.getLogger("crsirl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SWEEP_PARAMS = {"lambda": "lam", "eta": "eta", "beta": "beta", "T_max": "T_max"}


class MissingInput(CRSError):
    pass


# ------------------------------------------------------------------ artifacts


def catalog_path(cfg): return cfg.path("catalog", "catalog.json")
def splits_path(cfg): return cfg.path("splits", "splits.json")
def embeddings_path(cfg): return cfg.path("embeddings", "embeddings.bin")
def pg_policy_path(cfg): return Path(cfg.out) / "policy_pg.bin"


def policy_path(cfg):
    return cfg.path("policy", "policy_crsirl.bin")


def reward_path(cfg):
    return cfg.path("reward", "reward_crsirl.bin")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"missing {what}: {path}")
    return path


def save_params(path, params, kind: str) -> None:
    meta = {"kind": kind}
    if isinstance(params, PolicyParams):
        meta.update(dim=params.dim, h_dim=params.h_dim, m=params.m)
    else:
        meta.update(n_features=params.n_features, q=params.q)
    write_sections(path, params.sections(), meta)


def load_params(path):
    header, secs = read_sections(path)
    flat = np.concatenate([np.ravel(secs[s["name"]]) for s in header["sections"]])
    if header.get("kind") == "policy":
        return PolicyParams(header["dim"], header["h_dim"], header["m"], flat)
    if header.get("kind") == "reward":
        return RewardParams(header["n_features"], header["q"], flat)
    raise ConfigError(f"{path}: not a parameter checkpoint")


def load_world(cfg):
    catalog = load_catalog(_require(catalog_path(cfg), "catalog (run `gen` first)"))
    splits = InteractionSplits.from_json(json.loads(_require(splits_path(cfg), "splits (run `gen` first)").read_text()))
    return catalog, splits


def load_world_and_embeddings(cfg):
    catalog, splits = load_world(cfg)
    emb = load_embeddings(_require(embeddings_path(cfg), "embeddings (run `embed` first)"))
    emb.check_covers(catalog)
    return catalog, splits, emb


def write_csv(path, rows, columns) -> None:
    atomic_write_text(path, rows_to_csv(rows, columns))


# ------------------------------------------------------------------- commands


def cmd_gen(cfg: RunConfig) -> None:
    catalog = generate_synthetic_world(cfg.n_users, cfg.n_items, cfg.n_attrs, cfg.attrs_per_item,
                                       cfg.interactions_per_user, cfg.n_clusters, cfg.world_seed)
    splits = split_interactions(catalog, cfg.split_ratios, cfg.split_seed)
    save_catalog(catalog, catalog_path(cfg))
    atomic_write_text(splits_path(cfg), json.dumps(splits.to_json()) + "\n")
    log.info("world: %d users, %d items, %d attributes, %d interactions (%d/%d/%d)",
             len(catalog.users), len(catalog.items), len(catalog.attributes), len(catalog.interactions),
             len(splits.train), len(splits.valid), len(splits.test))


def cmd_embed(cfg: RunConfig) -> None:
    catalog, splits = load_world(cfg)
    emb = pretrain_embeddings(splits.train, catalog, dim=cfg.dim, epochs=cfg.embed_epochs, margin=cfg.margin,
                              step_size=cfg.embed_step_size, neg_per_pos=cfg.neg_per_pos, seed=cfg.embed_seed)
    save_embeddings(emb, embeddings_path(cfg))
    if emb.loss_history:
        log.info("embedding loss %.4f -> %.4f", emb.loss_history[0], emb.loss_history[-1])


def cmd_pretrain(cfg: RunConfig) -> None:
    catalog, splits, emb = load_world_and_embeddings(cfg)
    theta = pretrain_pg(cfg.train_config(), catalog, emb, splits.valid)
    save_params(pg_policy_path(cfg), theta, "policy")


def cmd_train(cfg: RunConfig) -> None:
    catalog, splits, emb = load_world_and_embeddings(cfg)
    tc = cfg.train_config()
    if cfg.init_policy:
        from crsirl.bilevel import init_policy
        theta0 = init_policy(tc, emb)
    else:
        theta0 = load_params(_require(pg_policy_path(cfg), "pretrained policy (run `pretrain` or set init_policy)"))

    def checkpoint(it, theta, phi):
        save_params(Path(cfg.out) / f"policy_crsirl_{it:06d}.bin", theta, "policy")
        save_params(Path(cfg.out) / f"reward_crsirl_{it:06d}.bin", phi, "reward")

    theta, phi, logs = train_crsirl(tc, catalog, emb, theta0, splits.valid, probe_pairs=splits.test,
                                    on_checkpoint=checkpoint, checkpoint_every=cfg.checkpoint_every)
    save_params(policy_path(cfg), theta, "policy")
    save_params(reward_path(cfg), phi, "reward")
    write_csv(Path(cfg.out) / "train_log.csv", logs, LOG_COLUMNS)


def _evaluate(cfg: RunConfig):
    catalog, splits, emb = load_world_and_embeddings(cfg)
    tc = cfg.train_config()
    theta = None
    if cfg.algorithm == "pg":
        theta = load_params(_require(pg_policy_path(cfg), "pretrained policy (run `pretrain`)"))
    elif cfg.algorithm == "crsirl":
        theta = load_params(_require(policy_path(cfg), "trained policy (run `train`)"))
    policy = make_policy(cfg.algorithm, tc, catalog, emb, theta)
    traces = [] if cfg.trace else None
    report = evaluate_policy(policy, splits.test, tc, [int(s) for s in cfg.seeds], catalog, emb, traces)
    if traces is not None:
        write_trace(Path(cfg.out) / f"trace_{cfg.algorithm}.jsonl", traces)
    return report


def cmd_eval(cfg: RunConfig) -> None:
    report = _evaluate(cfg)
    write_csv(Path(cfg.out) / f"metrics_{cfg.algorithm}.csv", report_rows(report), METRIC_COLUMNS)
    log.info("%s: SR@%d %.3f  AT %.2f  hDCG %.3f", cfg.algorithm, cfg.T_max, report.sr_at_T, report.at, report.hdcg)


def run_sweep(cfg: RunConfig, param: str, values) -> list[dict]:
    """Train then evaluate once per value; each value gets its own subdirectory."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMS)}, got {param!r}", "param")
    if not values:
        raise ConfigError("sweep needs at least one value", "values")
    rows = []
    for value in values:
        sub = Path(cfg.out) / f"sweep_{param}_{value}"
        if SWEEP_PARAMS[param] == "T_max":
            value = int(value)
        over = {SWEEP_PARAMS[param]: value, "out": str(sub), "algorithm": "crsirl"}
        # world, embeddings and pretrained policy stay shared with the parent run
        over.update(catalog_path=str(catalog_path(cfg)), splits_path=str(splits_path(cfg)),
                    embeddings_path=str(embeddings_path(cfg)))
        vcfg = replace(cfg, **over)
        validate(vcfg)
        if not vcfg.init_policy:
            src = _require(pg_policy_path(cfg), "pretrained policy (run `pretrain`)")
            atomic_write_bytes(sub / "policy_pg.bin", src.read_bytes())
        cmd_train(vcfg)
        rows.extend(report_rows(_evaluate(vcfg), {param: value}))
    return rows


def cmd_sweep(cfg: RunConfig, param: str, values) -> None:
    rows = run_sweep(cfg, param, values)
    write_csv(Path(cfg.out) / f"sweep_{param}.csv", rows, (param, *METRIC_COLUMNS))


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crsirl", description=__doc__.splitlines()[0])
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON configuration file")
    shared.add_argument("--seed", help="seed list, e.g. 0 or 0,1,2")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--reward", choices=("sparse", "handcrafted", "rules"))
    shared.add_argument("--algorithm", choices=ALGORITHMS)
    shared.add_argument("--lambda", dest="lam", type=float)
    shared.add_argument("--eta", type=float)
    shared.add_argument("--beta", type=float)
    shared.add_argument("--gamma", type=float)
    shared.add_argument("--T-max", dest="T_max", type=int)
    shared.add_argument("--K", type=int)
    shared.add_argument("--outer-iterations", dest="outer_iterations", type=int)
    shared.add_argument("--pretrain-episodes", dest="pretrain_episodes", type=int)
    shared.add_argument("--init-policy", dest="init_policy", action="store_true", default=None,
                        help="train from a fresh policy instead of the pretrained one")
    shared.add_argument("--trace", action="store_true", default=None, help="write per-step JSONL traces in eval")
    shared.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override any configuration key")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen", "embed", "pretrain", "train", "eval"):
        sub.add_parser(name, parents=[shared])
    sw = sub.add_parser("sweep", parents=[shared])
    sw.add_argument("--param", required=True, help="lambda, eta, beta or T_max")
    sw.add_argument("--values", required=True, help="comma-separated values")
    return ap


def _overrides(ns) -> dict:
    over = {}
    for item in ns.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            over[key] = json.loads(raw)
        except json.JSONDecodeError:
            over[key] = raw
    if ns.seed is not None:
        try:
            over["seeds"] = [int(s) for s in ns.seed.split(",")]
        except ValueError:
            raise ConfigError(f"--seed expects integers, got {ns.seed!r}", "seeds") from None
    if ns.lam is not None:
        over["lambda"] = ns.lam
    for key in ("out", "reward", "algorithm", "eta", "beta", "gamma", "T_max", "K",
                "outer_iterations", "pretrain_episodes", "init_policy", "trace"):
        if getattr(ns, key) is not None:
            over[key] = getattr(ns, key)
    return over


def _sweep_values(param: str, raw: str) -> list:
    cast = int if param == "T_max" else float
    try:
        return [cast(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad sweep values {raw!r}", "values") from None


def main(argv=None) -> int:
    level = os.environ.get("CRSIRL_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(message)s")
    ns = build_parser().parse_args(argv)
    try:
        if ns.config is not None:
            _require(Path(ns.config), "config file")
        cfg = parse_config(ns.config, _overrides(ns))
        if ns.command == "sweep":
            cmd_sweep(cfg, ns.param, _sweep_values(ns.param, ns.values))
        else:
            COMMANDS[ns.command](cfg)
    except NumericError as exc:
        print(f"crsirl: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MissingInput as exc:
        print(f"crsirl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"crsirl: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CRSError as exc:
        print(f"crsirl: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"crsirl: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "embed": cmd_embed, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval}

if __name__ == "__main__":
    sys.exit(main())
