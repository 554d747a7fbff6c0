import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from sgi import cli, envsim
from sgi import diffcore as dc
from sgi.checkpoint import load_checkpoint

SMALL = {
    "seeds": [0, 1],
    "pretrain": {"batch_size": 4, "depth": 2, "steps": 4, "log_every": 2, "probe_size": 16},
    "finetune": {"budget": 240, "warmup": 200, "update_every": 20, "batch_size": 4, "depth": 2,
                 "eval_episodes": 2},
    "eval": {"resamples": 50},
}


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


@pytest.fixture
def dataset(tmp_path, config, capsys):
    out = tmp_path / "d.sgid"
    code, _, _ = run(["collect", "--config", config, "--out", out, "--n", 300, "--seed", 7], capsys)
    assert code == 0
    return out


# config handling


def test_parse_seeds():
    assert cli.parse_seeds("0..3") == [0, 1, 2, 3]
    assert cli.parse_seeds("0,2") == [0, 2]
    assert cli.parse_seeds("5") == [5]
    for bad in ("", "3..1", "a"):
        with pytest.raises(ValueError):
            cli.parse_seeds(bad)


def test_resolve_fills_derived_fields():
    cfg = cli.resolve_config({"seeds": [4], "env": {"seed": 3}, "network": {"proj_dim": 64}})
    assert cfg.finetune.env_seed == 3 and cfg.finetune.seed == 4
    assert cfg.pretrain.net.proj_dim == 64 == cfg.finetune.net.proj_dim


@pytest.mark.parametrize("raw", [
    {"pretrain": {"learning_rate": 1e-3}},
    {"extra": 1},
    {"finetune": {"net": {}}},
    {"pretrain": {"batch_size": "big"}},
    {"dataset": {"regime": "expert"}},
    {"schema_version": 9},
    {"seeds": []},
    {"finetune": {"scheme": "partial"}},
])
def test_bad_configs_rejected(raw):
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(raw)


def test_config_hash_changes_with_content():
    a = cli.resolve_config({})
    assert a.config_hash() == cli.resolve_config({}).config_hash()
    assert a.config_hash() != cli.resolve_config({"pretrain": {"lr": 1e-3}}).config_hash()


def test_unknown_key_exits_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"pretrain": {"bogus": 1}}))
    code, _, err = run(["collect", "--config", p, "--out", tmp_path / "x.sgid", "--n", 10], capsys)
    assert code == 2 and "bogus" in err


# collect


def test_collect_is_reproducible(tmp_path, config, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(["collect", "--config", config, "--out", tmp_path / f"{name}.sgid", "--n", 500,
                            "--seed", 7], capsys)
        assert code == 0
        outs.append(json.loads(out))
    assert outs[0]["sha256"] == outs[1]["sha256"]
    assert outs[0]["transitions"] == 500 and "avg_clipped_reward_per_episode" in outs[0]
    assert (tmp_path / "a.sgid").read_bytes() == (tmp_path / "b.sgid").read_bytes()


def test_collect_bad_path_and_regime(tmp_path, capsys):
    code, _, err = run(["collect", "--out", tmp_path / "missing" / "dir" / "x.sgid", "--n", 10], capsys)
    assert code == 2 and err.startswith("error:")
    code, _, err = run(["collect", "--out", tmp_path / "x.sgid", "--regime", "mixed", "--n", 10], capsys)
    assert code == 2 and "checkpoint" in err
    with pytest.raises(SystemExit):
        cli.main(["collect", "--out", str(tmp_path / "x"), "--regime", "expert"])


def test_collect_mixed_from_checkpoints(tmp_path, config, dataset, capsys):
    ck = tmp_path / "p.sgic"
    assert run(["pretrain", "--config", config, "--dataset", dataset, "--out", ck], capsys)[0] == 0
    out = tmp_path / "m.sgid"
    code, text, _ = run(["collect", "--config", config, "--out", out, "--regime", "mixed", "--n", 90,
                         "--checkpoint", ck, "--checkpoint", ck, "--checkpoint", ck], capsys)
    assert code == 0
    d = envsim.read_dataset(out)
    assert len(d.metadata["segments"]) == 3 and d.count == 90
    assert d.metadata["config_hash"]


# pretrain


def test_pretrain_writes_checkpoint_and_log(tmp_path, config, dataset, capsys):
    ck = tmp_path / "p.sgic"
    code, out, _ = run(["pretrain", "--config", config, "--dataset", dataset, "--out", ck, "--objectives", "S,I"],
                       capsys)
    assert code == 0
    summary = json.loads(out)
    assert summary["objectives"] == "S+I"
    loaded = load_checkpoint(ck)
    assert loaded.provenance["objectives"] == "S+I" and loaded.provenance["run_config"]
    records = [json.loads(line) for line in ck.with_suffix(".jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [2, 4]
    assert {r["run_config"] for r in records} == {loaded.provenance["run_config"]}
    assert all({"spr", "inverse", "collapse"} <= set(r) for r in records)


def test_pretrain_empty_objectives(tmp_path, config, dataset, capsys):
    code, _, err = run(["pretrain", "--config", config, "--dataset", dataset, "--out", tmp_path / "p.sgic",
                        "--objectives", ""], capsys)
    assert code == 2 and "objective" in err
    code, _, _ = run(["pretrain", "--config", config, "--dataset", dataset, "--out", tmp_path / "p.sgic",
                      "--objectives", "X"], capsys)
    assert code == 2


def test_pretrain_rejects_corrupt_dataset(tmp_path, config, capsys):
    bad = tmp_path / "bad.sgid"
    bad.write_bytes(b"SGID" + b"\x01\x00" + b"junk")
    code, _, err = run(["pretrain", "--config", config, "--dataset", bad, "--out", tmp_path / "p.sgic"], capsys)
    assert code == 2 and err.startswith("error:")


# finetune


def test_finetune_outputs(tmp_path, config, dataset, capsys):
    ck = tmp_path / "p.sgic"
    run(["pretrain", "--config", config, "--dataset", dataset, "--out", ck], capsys)
    out_dir = tmp_path / "ft"
    code, out, _ = run(["finetune", ck, "--config", config, "--out-dir", out_dir, "--seeds", "0..1"], capsys)
    assert code == 0
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["scheme"] == "reduced" and len(summary["runs"]) == 2
    for s in (0, 1):
        rows = list(csv.reader((out_dir / f"returns_seed{s}.csv").open()))
        assert rows[0] == ["episode", "return"] and len(rows) == 3
        log = [json.loads(line) for line in (out_dir / f"log_seed{s}.jsonl").read_text().splitlines()]
        assert log[-1]["phase"] == "eval"
        assert len({r["run_config"] for r in log}) == 1
        agent_ck = load_checkpoint(out_dir / f"agent_seed{s}.sgic")
        assert agent_ck.provenance["scheme"] == "reduced" and agent_ck.provenance["pretrained"]


def test_finetune_scratch_needs_no_checkpoint(tmp_path, config, capsys):
    code, out, _ = run(["finetune", "--scratch", "--config", config, "--out-dir", tmp_path / "s", "--seeds", "0"],
                       capsys)
    assert code == 0 and json.loads(out)["scratch"] is True
    code, _, err = run(["finetune", "--config", config, "--out-dir", tmp_path / "s"], capsys)
    assert code == 2 and "--scratch" in err


def test_finetune_fingerprint_mismatch(tmp_path, config, dataset, capsys):
    ck = tmp_path / "p.sgic"
    run(["pretrain", "--config", config, "--dataset", dataset, "--out", ck], capsys)
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump({**SMALL, "network": {"head_hidden": 64}}))
    code, _, err = run(["finetune", ck, "--config", other, "--out-dir", tmp_path / "f"], capsys)
    assert code == 2 and "fingerprint" in err


def test_finetune_truncated_checkpoint(tmp_path, config, capsys):
    bad = tmp_path / "bad.sgic"
    bad.write_bytes(b"SGIC\x01\x00")
    code, _, _ = run(["finetune", bad, "--config", config, "--out-dir", tmp_path / "f"], capsys)
    assert code == 2


# eval


def test_eval_report(tmp_path, capsys):
    scores = tmp_path / "s.csv"
    scores.write_text("game,seed,score,random_ref,human_ref\nA,0,0.5,0,1\nB,0,1.5,0,1\nB,1,1.5,0,1\n")
    code, out, _ = run(["eval", scores, "--out", tmp_path / "r.json", "--resamples", 100], capsys)
    assert code == 0
    rep = json.loads(out)
    assert (rep["median"], rep["mean"], rep["above_human"], rep["above_random"]) == (1.0, 1.0, 1, 2)
    assert json.loads((tmp_path / "r.json").read_text()) == rep


def test_eval_bad_row(tmp_path, capsys):
    scores = tmp_path / "s.csv"
    scores.write_text("game,seed,score,random_ref,human_ref\nA,0,0.5,0,1\nA,1,oops,0,1\n")
    code, _, err = run(["eval", scores], capsys)
    assert code == 2 and "row 3" in err


# verify


@pytest.fixture(scope="module")
def verify_report():
    from sgi import verify

    return verify.run_all()


def test_verify_passes(capsys, monkeypatch, verify_report):
    from sgi import verify

    monkeypatch.setattr(verify, "run_all", lambda: verify_report)
    code, out, _ = run(["verify"], capsys)
    assert code == 0
    assert all(r.passed for r in verify_report)
    assert "cosine" in out


def test_verify_catches_sign_flipped_cosine_gradient(capsys, monkeypatch):
    original = dc._cosine_backward

    def broken(*args, **kwargs):
        grads = original(*args, **kwargs)
        return tuple(-g for g in grads)

    monkeypatch.setattr(dc, "_cosine_backward", broken)
    code, _, err = run(["verify"], capsys)
    assert code == 1
    assert "cosine" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "sgi", "--version"], capture_output=True, text=True, check=True)
    assert proc.stdout.startswith("sgi ")


def test_dataset_and_checkpoint_determinism_via_cli(tmp_path, config, dataset, capsys):
    digests = []
    for name in ("a", "b"):
        ck = tmp_path / f"{name}.sgic"
        code, out, _ = run(["pretrain", "--config", config, "--dataset", dataset, "--out", ck], capsys)
        assert code == 0
        digests.append((ck.read_bytes(), ck.with_suffix(".jsonl").read_text()))
    assert digests[0] == digests[1]
    assert np.all(np.isfinite([json.loads(x)["total"] for x in digests[0][1].splitlines()]))
