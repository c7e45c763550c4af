import json
import os

import pytest

from navpretrain import cli, gradcheck
from navpretrain.config import ConfigError, RunConfig, load_config

from conftest import TINY_RUN


def test_defaults_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).config_hash == cfg.config_hash


def test_partial_override_keeps_other_defaults():
    cfg = RunConfig.from_dict({"optim": {"pretrain": {"lr0": 0.01}}})
    assert cfg.optim.pretrain.lr0 == 0.01 and cfg.optim.pretrain.kind == "adam"
    assert cfg.optim.agent == RunConfig().optim.agent


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"data": {"n_train_env": 3}},
    {"optim": {"pretrain": {"kind": "sgd"}}},
    {"tasks": {"steps": "many"}},
    {"tasks": {"balanced": 1}},
])
def test_invalid_documents_rejected(doc):
    with pytest.raises((ConfigError, ValueError)):
        RunConfig.from_dict(doc)


def test_hash_stable_under_key_order():
    a = {"seed": 3, "tasks": {"alpha": 0.25, "steps": 10}, "data": {"n_train_envs": 4}}
    b = {"data": {"n_train_envs": 4}, "tasks": {"steps": 10, "alpha": 0.25}, "seed": 3}
    assert RunConfig.from_dict(a).config_hash == RunConfig.from_dict(b).config_hash
    assert RunConfig.from_dict(a).config_hash != RunConfig.from_dict({**a, "seed": 4}).config_hash


def test_seed_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1}))
    assert load_config(str(path), 9).seed == 9
    assert load_config(str(path)).seed == 1
    assert load_config().mining_config().seed == 0


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


def _files(d):
    return {f: (d / f).read_bytes() for f in sorted(os.listdir(d)) if f != "manifest.json"}


def test_pipeline_end_to_end(tmp_path, capsys, cfg_file):
    data, disc, agent = tmp_path / "data", tmp_path / "disc", tmp_path / "agent"
    code, out, _ = _run(capsys, "gen-data", "--config", cfg_file, "--out", data)
    assert code == 0
    assert "negatives per positive [train] = 10" in out and "disjoint = True" in out

    code, _, err = _run(capsys, "gen-data", "--config", cfg_file, "--out", data)
    assert code == cli.EXIT_ERROR and json.loads(err)["message"].endswith("pass --force to overwrite")
    first = _files(data)
    assert _run(capsys, "gen-data", "--config", cfg_file, "--out", data, "--force")[0] == 0
    assert _files(data) == first

    assert _run(capsys, "pretrain", data, "--out", disc)[0] == 0
    manifest = json.loads((disc / "manifest.json").read_text())
    assert {"config_hash", "git_rev", "seed", "wall_time_s"} <= set(manifest)

    code, out, _ = _run(capsys, "eval", disc / "checkpoint.json", data, "--table", "disc")
    assert code == 0 and "AUC (PR+RW negatives only)" in out

    code, out, _ = _run(capsys, "train-agent", data, "--out", agent, "--warm", disc / "checkpoint.json")
    assert code == 0
    ws = json.loads((agent / "manifest.json").read_text())["warm_start"]
    assert ws["copied"] and all(k.startswith(("lang.", "vis.")) for k in ws["copied"])

    code, out, _ = _run(capsys, "eval", agent / "agent.json", data, "--table", "agent", "--out", tmp_path / "ev")
    assert code == 0 and "val_unseen" in out
    assert (tmp_path / "ev" / "metrics.csv").exists() and (tmp_path / "ev" / "manifest.json").exists()

    code, out, _ = _run(capsys, "eval", disc / "checkpoint.json", data, "--table", "ranking", "--out", tmp_path / "rk")
    assert code == 0 and (tmp_path / "rk" / "slices.csv").exists()

    code, out, _ = _run(capsys, "score", disc / "checkpoint.json", data / "corpus.jsonl", "--out", tmp_path / "s.csv")
    assert code == 0 and (tmp_path / "s.csv").read_text().startswith("pair_id,")

    # an agent checkpoint is not a discriminator
    code, _, err = _run(capsys, "eval", agent / "agent.json", data, "--table", "disc")
    assert code == cli.EXIT_REFUSED and json.loads(err)["error"] == "HashMismatch"


def test_refusals(tmp_path, capsys, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(capsys, "gen-data", "--config", cfg_file, "--out", a)[0] == 0
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY_RUN, "data": {**TINY_RUN["data"], "min_count": 3}, "tasks": {"steps": 2}}))
    assert _run(capsys, "gen-data", "--config", other, "--out", b)[0] == 0
    assert _run(capsys, "pretrain", b, "--out", tmp_path / "pb")[0] == 0
    code, _, err = _run(capsys, "train-agent", a, "--out", tmp_path / "x", "--warm", tmp_path / "pb" / "checkpoint.json")
    assert code == cli.EXIT_REFUSED and "vocabulary" in json.loads(err)["message"]

    code, _, err = _run(capsys, "pretrain", a, "--out", tmp_path / "y", "--seed", 5)
    assert code == cli.EXIT_REFUSED and "different data" in json.loads(err)["message"]

    code, _, err = _run(capsys, "eval", tmp_path / "missing.json", a, "--table", "agent")
    assert code == cli.EXIT_ERROR and json.loads(err)["error"] == "CliError"

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    code, _, err = _run(capsys, "gen-data", "--config", bad, "--out", tmp_path / "z")
    assert code == cli.EXIT_ERROR and "nope" in json.loads(err)["message"]


def test_gradcheck_exit_codes(capsys, monkeypatch):
    ok = gradcheck.CheckResult("cma_loss", 1e-7, "x", 3)
    bad = gradcheck.CheckResult("pg_loss", 1e-2, "y", 3)
    monkeypatch.setattr(gradcheck, "run_all", lambda seed: [ok])
    assert _run(capsys, "gradcheck")[0] == 0
    monkeypatch.setattr(gradcheck, "run_all", lambda seed: [ok, bad])
    code, out, _ = _run(capsys, "gradcheck")
    assert code == cli.EXIT_ERROR and "FAIL pg_loss" in out
