import json

import numpy as np
import pytest

from docasched import cli, nn


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os
    for k in list(os.environ):
        if k.startswith("DOCASCHED_"):
            monkeypatch.delenv(k)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def resolved(*argv, environ=None):
    args = cli.build_parser().parse_args(["eval", *argv])
    return cli.resolve(args, environ=environ or {})


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = cli.main(["train", "--epochs", "2", "--workers", "1", "--seed", "4",
                     "--out", str(out), "--quiet"])
    assert code == 0
    return out


def test_train_writes_artifacts(trained):
    assert (trained / "checkpoint.bin").exists()
    lines = (trained / "learning_curve.csv").read_text().splitlines()
    assert len(lines) == 3
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["config"]["train"]["epochs"] == 2
    assert manifest["config"]["seed"] == 4


def test_eval_rl_from_checkpoint(trained, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--scheduler", "rl", "--checkpoint",
                       str(trained / "checkpoint.bin"), "--actions", "30", "--out", str(tmp_path))
    assert code == 0 and "mean PRR" in out
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("scenario,scheduler,seed")
    assert (tmp_path / "transmissions.csv").exists()


def test_compare_writes_one_row_per_scheduler(trained, tmp_path, capsys):
    code, _, _ = run(capsys, "compare", "--checkpoint", str(trained / "checkpoint.bin"),
                     "--actions", "20", "--seeds", "0,1", "--out", str(tmp_path))
    assert code == 0
    rows = (tmp_path / "compare.csv").read_text().splitlines()[1:]
    assert [r.split(",")[1] for r in rows] == ["rl", "mode4", "random"]
    assert all(r.split(",")[2] == "0;1" for r in rows)


def test_inspect_checkpoint(trained, capsys):
    code, out, _ = run(capsys, "inspect-checkpoint", str(trained / "checkpoint.bin"))
    assert code == 0
    info = json.loads(out)
    assert info["format"] == "docasched-ac"
    assert info["meta"]["preset"] == "E1-A"
    assert info["actor"]["input_shape"] == [1, 10]


def test_checkpoint_mismatch_exit_code(trained, tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--preset", "E1-B", "--scheduler", "rl", "--checkpoint",
                       str(trained / "checkpoint.bin"), "--out", str(tmp_path))
    assert code == 3
    assert err.startswith("docasched: error: code=checkpoint")


def test_unknown_set_key_is_one_line_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--set", "train.warp=9", "--out", str(tmp_path))
    assert code == 2
    assert err.count("\n") == 1
    assert "key=train.warp" in err


def test_bad_value_type(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--set", "doca.speed=fast", "--out", str(tmp_path))
    assert code == 2 and "code=usage" in err


def test_rl_requires_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--scheduler", "rl", "--out", str(tmp_path))
    assert code == 2 and "key=checkpoint" in err


def test_unknown_preset(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--preset", "nope", "--out", str(tmp_path))
    assert code == 2 and "unknown preset" in err


def test_argparse_errors_use_error_line(capsys):
    code, _, err = run(capsys, "eval", "--seed", "abc")
    assert code == 2 and err.startswith("docasched: error: code=usage")


def test_eval_baseline(tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--scheduler", "roundrobin", "--actions", "50",
                       "--out", str(tmp_path))
    assert code == 0 and "mean PRR 1.0000" in out


def test_precedence(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("# comment\ntrain.epochs = 11\ntrain.workers=3\nseed=5\n")
    env = {"DOCASCHED_TRAIN__EPOCHS": "22", "DOCASCHED_SEED": "6"}
    r = resolved("--config", str(cfg_file), environ=env)
    assert r.train.workers == 3          # file beats default
    assert r.train.epochs == 22          # env beats file
    assert r.seed == 6
    r = resolved("--config", str(cfg_file), "--epochs", "33", "--seed", "7", environ=env)
    assert r.train.epochs == 33 and r.seed == 7   # flags beat env
    r = resolved("--config", str(cfg_file), "--set", "train.epochs=44", environ=env)
    assert r.train.epochs == 44


def test_preset_is_applied_before_overrides():
    r = resolved("--preset", "E1-C", "--set", "doca.target_population=20")
    assert r.doca.target_population == 20
    assert r.pool.n_tbs == 20
    assert r.train.lr_actor == "step:1e-4:1e-5:1000"


def test_json_config_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"preset": "E1-B", "train": {"workers": 2}, "mode4": {"fraction": 0.3}}))
    r = resolved("--config", str(f))
    assert r.preset.name == "E1-B"
    assert r.train.workers == 2
    assert r.mode4 == {"fraction": 0.3}


def test_sync_flags():
    assert resolved("--async").train.sync is False
    assert resolved("--sync").train.sync is True
