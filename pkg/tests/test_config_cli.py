import csv
import json

import pytest

from crsirl.cli import main
from crsirl.config import ConfigError, RunConfig, parse_config

SMALL = {
    "n_users": 6, "n_items": 12, "n_attrs": 6, "attrs_per_item": [2, 3], "interactions_per_user": 4,
    "dim": 4, "embed_epochs": 5, "T_max": 5, "K": 2, "K_v": 3, "K_p": 3, "h_dim": 4, "m": 4, "q": 3,
    "pretrain_episodes": 10, "outer_iterations": 5, "seeds": [0, 1],
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ config


def test_empty_file_gives_defaults(tmp_path):
    cfg = parse_config(write_config(tmp_path / "c.json", {}))
    assert (cfg.T_max, cfg.K, cfg.K_v, cfg.K_p, cfg.gamma) == (15, 10, 10, 10, 0.999)
    (tmp_path / "blank.json").write_text("  \n")
    assert parse_config(tmp_path / "blank.json") == RunConfig()
    assert parse_config() == RunConfig()


def test_overrides_beat_file(tmp_path):
    cfg = parse_config(write_config(tmp_path / "c.json", {"lambda": 0.1}), {"lambda": 0.5})
    assert cfg.lam == 0.5


def test_bad_gamma_names_the_field(tmp_path):
    with pytest.raises(ConfigError, match="gamma") as info:
        parse_config(write_config(tmp_path / "c.json", {"gamma": 1.5}))
    assert info.value.field == "gamma"


@pytest.mark.parametrize("doc, field", [
    ({"lambda": -1}, "lambda"),
    ({"K": 5, "K_v": 3}, "K_v"),
    ({"algorithm": "oracle"}, "algorithm"),
    ({"T_max": 2.5}, "T_max"),
    ({"enable_hrs": False, "enable_rpm": False}, "enable_hrs"),
])
def test_constraint_violations(tmp_path, doc, field):
    with pytest.raises(ConfigError) as info:
        parse_config(write_config(tmp_path / "c.json", doc))
    assert info.value.field == field


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config(overrides={"bogus": 1})


def test_malformed_file_reports_line(tmp_path):
    (tmp_path / "c.json").write_text('{\n  "gamma": 0.9,\n  oops\n}')
    with pytest.raises(ConfigError, match="line 3"):
        parse_config(tmp_path / "c.json")


# --------------------------------------------------------------------- CLI


@pytest.fixture
def pipeline(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "c.json", {**SMALL, "out": str(out)})
    for cmd in ("gen", "embed", "pretrain"):
        assert main([cmd, "--config", cfg]) == 0
    return cfg, out


def test_full_pipeline(pipeline):
    cfg, out = pipeline
    assert main(["train", "--config", cfg]) == 0
    assert main(["eval", "--config", cfg, "--trace"]) == 0
    for name in ("catalog.json", "splits.json", "embeddings.bin", "policy_pg.bin", "policy_crsirl.bin",
                 "reward_crsirl.bin", "train_log.csv", "metrics_crsirl.csv", "trace_crsirl.jsonl"):
        assert (out / name).exists(), name
    rows = read_rows(out / "metrics_crsirl.csv")
    assert [r["seed"] for r in rows] == ["0", "1", "all"]
    assert len(read_rows(out / "train_log.csv")) == SMALL["outer_iterations"]
    assert not list(out.glob("*.tmp*"))


def test_train_without_catalog_exits_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "nothing")]) == 2
    assert "catalog" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["gen", "--config", str(tmp_path / "absent.json")]) == 2


def test_bad_flag_value_exits_2(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--gamma", "2"]) == 2


def test_rulejudge_needs_no_checkpoints(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "c.json", {**SMALL, "out": str(out)})
    assert main(["gen", "--config", cfg]) == 0
    assert main(["embed", "--config", cfg]) == 0
    assert main(["eval", "--config", cfg, "--algorithm", "rulejudge"]) == 0
    assert (out / "metrics_rulejudge.csv").exists()
    assert not list(out.glob("policy_*")) and not list(out.glob("reward_*"))


def test_pg_eval_without_pretraining_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.json", {**SMALL, "out": str(tmp_path)})
    main(["gen", "--config", cfg])
    main(["embed", "--config", cfg])
    assert main(["eval", "--config", cfg, "--algorithm", "pg"]) == 2


def test_sweep_lambda_grid(pipeline):
    cfg, out = pipeline
    assert main(["sweep", "--config", cfg, "--param", "lambda", "--values", "0.05,0.1,0.5,1.0"]) == 0
    rows = read_rows(out / "sweep_lambda.csv")
    agg = [r for r in rows if r["seed"] == "all"]
    assert [float(r["lambda"]) for r in agg] == [0.05, 0.1, 0.5, 1.0]
    assert len(rows) == 4 * (len(SMALL["seeds"]) + 1)


def test_single_value_sweep_matches_plain_run(pipeline):
    cfg, out = pipeline
    assert main(["sweep", "--config", cfg, "--param", "lambda", "--values", "0.5"]) == 0
    assert main(["train", "--config", cfg, "--lambda", "0.5"]) == 0
    assert main(["eval", "--config", cfg, "--lambda", "0.5"]) == 0
    swept = read_rows(out / "sweep_lambda.csv")
    plain = read_rows(out / "metrics_crsirl.csv")
    keys = ("seed", "sr_at_T", "at", "hdcg", "n_episodes")
    assert [{k: r[k] for k in keys} for r in swept] == [{k: r[k] for k in keys} for r in plain]


def test_sweep_turn_budget_with_rules(pipeline):
    cfg, out = pipeline
    assert main(["sweep", "--config", cfg, "--reward", "rules", "--param", "T_max", "--values", "10"]) == 0
    assert {r["T_max"] for r in read_rows(out / "sweep_T_max.csv")} == {"10"}


def test_sweep_rejects_unknown_parameter(pipeline):
    cfg, _ = pipeline
    assert main(["sweep", "--config", cfg, "--param", "gamma", "--values", "0.9"]) == 2
