"""End-to-end command line behavior: exit codes, artifacts, determinism."""

import json
import os

import pytest

from splitmark.cli import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    main,
    preset_configs,
    preset_names,
)
from splitmark.config import ConfigError

TINY = """
run.rounds = 2
run.local_epochs = 1
run.batch_size = 10
run.probe_samples = 16
data.classes = 3
data.input_dim = 4
data.train_per_class = 30
data.test_per_class = 5
partition.clients = 2
model.widths = 8,8
model.split = 1
optimizer.lr = 0.05
embed.bits = 4
verify.probes = 32
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


@pytest.fixture()
def tiny_wm_cfg(tmp_path):
    path = tmp_path / "tiny_wm.cfg"
    path.write_text(TINY + "embed.enabled = true\nembed.strength = 0.5\n")
    return str(path)


def _json_lines(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines()]


def test_run_writes_artifacts_and_summary(tiny_cfg, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["run", "--config", tiny_cfg, "--out", out]) == EXIT_OK
    (line,) = _json_lines(capsys)
    assert line["out"] == out
    assert 0.0 <= line["final_test_acc"] <= 1.0
    assert "wsr" not in line  # no embedding requested
    for artifact in ("model.ckpt", "metrics.csv", "manifest.json"):
        assert os.path.isfile(os.path.join(out, artifact))


def test_run_with_embedding_saves_key_and_reports_wsr(tiny_wm_cfg, tmp_path, capsys):
    out = str(tmp_path / "wm")
    assert main(["run", "--config", tiny_wm_cfg, "--out", out]) == EXIT_OK
    (line,) = _json_lines(capsys)
    assert 0.0 <= line["wsr"] <= 1.0
    assert isinstance(line["wsr_passed"], bool)
    assert os.path.isfile(os.path.join(out, "key.txt"))


def test_verify_roundtrip_on_saved_run(tiny_wm_cfg, tmp_path, capsys):
    out = str(tmp_path / "wm")
    main(["run", "--config", tiny_wm_cfg, "--out", out])
    capsys.readouterr()
    code = main(
        [
            "verify",
            "--model",
            os.path.join(out, "model.ckpt"),
            "--key",
            os.path.join(out, "key.txt"),
            "--probes",
            "48",
            "--tau",
            "0.6",
        ]
    )
    assert code == EXIT_OK
    (doc,) = _json_lines(capsys)
    assert set(doc) == {"wsr", "tau", "passed", "n_samples"}
    assert doc["n_samples"] == 48
    assert doc["tau"] == 0.6


def test_verify_missing_files_exit_config(tmp_path):
    code = main(
        ["verify", "--model", str(tmp_path / "no.ckpt"), "--key", str(tmp_path / "no.key")]
    )
    assert code == EXIT_CONFIG


def test_run_argument_validation(tiny_cfg, tmp_path):
    assert main(["run"]) == EXIT_CONFIG  # neither source
    assert main(["run", "--config", tiny_cfg, "--preset", "fidelity"]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "ghost.cfg")]) == EXIT_CONFIG
    assert main(["run", "--preset", "no-such-preset"]) == EXIT_CONFIG
    bad_set = ["run", "--config", tiny_cfg, "--set", "optimizer.lr"]
    assert main(bad_set) == EXIT_CONFIG  # missing '='
    assert (
        main(["run", "--config", tiny_cfg, "--set", "optimizer.gear=3"]) == EXIT_CONFIG
    )
    assert (
        main(["run", "--config", tiny_cfg, "--set", "optimizer.lr=slow"]) == EXIT_CONFIG
    )


def test_divergent_run_exits_numeric(tiny_cfg, tmp_path):
    import numpy as np

    # lr * wd >> 1 flips and inflates every weight each step, so the
    # parameters overflow to inf within a couple of batches
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(
            [
                "run",
                "--config",
                tiny_cfg,
                "--out",
                str(tmp_path / "boom"),
                "--set",
                "optimizer.weight_decay=1e200",
            ]
        )
    assert code == EXIT_NUMERIC


def test_same_seed_runs_are_byte_identical(tiny_wm_cfg, tmp_path, capsys):
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    main(["run", "--config", tiny_wm_cfg, "--out", out_a, "--seed", "5"])
    main(["run", "--config", tiny_wm_cfg, "--out", out_b, "--seed", "5"])
    capsys.readouterr()
    for name in ("metrics.csv", "model.ckpt", "key.txt"):
        with open(os.path.join(out_a, name), "rb") as fa:
            with open(os.path.join(out_b, name), "rb") as fb:
                assert fa.read() == fb.read(), name


def test_set_override_controls_the_run(tiny_cfg, tmp_path, capsys):
    out = str(tmp_path / "short")
    main(["run", "--config", tiny_cfg, "--out", out, "--set", "run.rounds=1"])
    capsys.readouterr()
    with open(os.path.join(out, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["results"]["rounds"] == 1
    with open(os.path.join(out, "metrics.csv")) as fh:
        rows = fh.read().strip().splitlines()
    assert len(rows) == 2  # header + one round


def test_attack_command_replays_saved_checkpoint(tiny_wm_cfg, tmp_path, capsys):
    out = str(tmp_path / "wm")
    main(["run", "--config", tiny_wm_cfg, "--out", out])
    capsys.readouterr()
    atk_out = str(tmp_path / "atk")
    code = main(
        [
            "attack",
            "--config",
            tiny_wm_cfg,
            "--model",
            os.path.join(out, "model.ckpt"),
            "--key",
            os.path.join(out, "key.txt"),
            "--kind",
            "prune",
            "--kind",
            "quantize",
            "--out",
            atk_out,
        ]
    )
    assert code == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    names = {entry["name"] for entry in doc}
    assert names == {"prune", "quantize"}
    assert all("post_wsr" in entry for entry in doc)
    assert os.path.isfile(os.path.join(atk_out, "attacks.json"))


def test_attack_command_rejects_adaptive_and_empty(tiny_wm_cfg, tmp_path):
    out = str(tmp_path / "wm")
    main(["run", "--config", tiny_wm_cfg, "--out", out])
    model = os.path.join(out, "model.ckpt")
    args = ["attack", "--config", tiny_wm_cfg, "--model", model]
    assert main(args) == EXIT_CONFIG  # no kinds anywhere
    assert (
        main(args + ["--set", "attack.kinds=adaptive"]) == EXIT_CONFIG
    )  # adaptive only lives inside `run`


def test_sweep_runs_each_config_into_subdirs(tiny_cfg, tmp_path, capsys):
    cfg_dir = tmp_path / "cfgs"
    cfg_dir.mkdir()
    for name in ("one", "two"):
        (cfg_dir / f"{name}.cfg").write_text(TINY.replace("rounds = 2", "rounds = 1"))
    out = str(tmp_path / "sweep")
    code = main(["sweep", "--config-dir", str(cfg_dir), "--out", out])
    assert code == EXIT_OK
    lines = _json_lines(capsys)
    assert [os.path.basename(l["out"]) for l in lines] == ["one", "two"]
    for name in ("one", "two"):
        assert os.path.isfile(os.path.join(out, name, "metrics.csv"))
    assert main(["sweep", "--config-dir", str(tmp_path / "none")]) == EXIT_CONFIG
    assert main(["sweep"]) == EXIT_CONFIG


def test_preset_listing_and_member_selection(capsys):
    names = preset_names()
    for expected in ("fidelity", "removal", "detector", "noise", "heterogeneity"):
        assert expected in names
    assert main(["presets"]) == EXIT_OK
    listed = capsys.readouterr().out.split()
    assert listed == names

    assert len(preset_configs("fidelity")) == 4
    (one,) = preset_configs("fidelity/clean")
    assert one.endswith("clean.cfg")
    with pytest.raises(ConfigError, match="no member"):
        preset_configs("fidelity/missing")
    with pytest.raises(ConfigError, match="unknown preset"):
        preset_configs("imaginary")
