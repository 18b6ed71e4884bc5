import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import yaml

from refboost.cli import main
from refboost.config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    save_config,
)


def write_config(tmp_path, **overrides):
    cfg = ExperimentConfig(out_dir=str(tmp_path / "out"))
    cfg.simulate.horizon = 120
    cfg.eval.horizon = 120
    cfg.train.horizon = 60
    cfg.train.samples = 4
    cfg.train.epochs = 2
    cfg.train.batch_size = 2
    for key, val in overrides.items():
        obj = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            obj = getattr(obj, p)
        setattr(obj, leaf, val)
    path = tmp_path / "config.yaml"
    save_config(cfg, path)
    return path, cfg


def test_config_round_trip(tmp_path):
    path, cfg = write_config(tmp_path)
    loaded = load_config(path)
    again = tmp_path / "again.yaml"
    save_config(loaded, again)
    assert load_config(again).to_dict() == loaded.to_dict() == cfg.to_dict()


def test_config_round_trip_with_fixed_targets(tmp_path):
    path, _ = write_config(
        tmp_path, **{"train.reference_mode": "fixed",
                     "train.fixed_targets": np.array([[1.0, 2.0], [-1.0, 2.0]])}
    )
    loaded = load_config(path)
    assert np.array_equal(loaded.train.fixed_targets, [[1.0, 2.0], [-1.0, 2.0]])


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("layout: corridor\nbogus_section: {}\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("train: {bogus_field: 3}\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.yaml")


def test_cli_exit_codes(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2
    path, _ = write_config(tmp_path)
    assert main(["eval", "--config", str(path)]) == 2  # no checkpoint given
    assert main(["eval", "--config", str(path), "--checkpoint", "/nope.json"]) == 2
    # robustness requires a mismatch section
    assert main(["check-robustness", "--config", str(path)]) == 2
    bad = tmp_path / "broken.yaml"
    bad.write_text("{unclosed")
    assert main(["simulate", "--config", str(bad)]) == 2


def test_cli_simulate_base_controller(tmp_path):
    path, cfg = write_config(tmp_path)
    assert main(["simulate", "--config", str(path)]) == 0
    run_dir = os.path.join(cfg.out_dir, "rollout_00")
    for name in ("eta", "u", "e", "w_hat", "x_ref"):
        assert os.path.exists(os.path.join(run_dir, f"{name}.csv"))
    assert os.path.exists(os.path.join(run_dir, "record.json"))

    svg_path = os.path.join(run_dir, "trajectory.svg")
    tree = ET.parse(svg_path)  # valid XML or this raises
    ns = "{http://www.w3.org/2000/svg}"
    circles = tree.getroot().findall(f".//{ns}circle")
    polylines = tree.getroot().findall(f".//{ns}polyline")
    # two obstacle circles plus two start dots; one path per robot
    assert len(circles) == 4
    assert len(polylines) == 2


def test_cli_simulate_deterministic(tmp_path):
    path, cfg = write_config(tmp_path)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
    for name in ("eta", "u", "e"):
        fa = open(tmp_path / "a" / "rollout_00" / f"{name}.csv", "rb").read()
        fb = open(tmp_path / "b" / "rollout_00" / f"{name}.csv", "rb").read()
        assert fa == fb


def test_cli_train_eval_cycle(tmp_path):
    path, cfg = write_config(tmp_path, **{"eval.n_test": 4, "simulate.horizon": 200})
    assert main(["train", "--config", str(path)]) == 0
    ckpt = os.path.join(cfg.out_dir, "checkpoint.json")
    assert os.path.exists(ckpt)
    hist = open(os.path.join(cfg.out_dir, "loss_history.csv")).read().splitlines()
    assert hist[0] == "epoch,mean_loss"
    assert len(hist) == 3  # header + 2 epochs

    assert main(["eval", "--config", str(path), "--checkpoint", ckpt]) == 0
    metrics = json.load(open(os.path.join(cfg.out_dir, "metrics.json")))
    assert metrics["n_test"] == 4
    assert set(metrics) == {
        "n_test", "mean_loss", "collision_scenarios", "penetration_scenarios",
        "penetration_frames", "collision_free_fraction", "mean_final_error",
    }

    # simulate from the trained checkpoint: robots still reach their targets
    assert main(["simulate", "--config", str(path), "--checkpoint", ckpt]) == 0
    rec = json.load(open(os.path.join(cfg.out_dir, "rollout_00", "record.json")))
    final_err = np.abs(np.array(rec["e"][-1]).reshape(2, 2, 2)[:, 0]).max()
    assert final_err < 0.05


def test_cli_eval_zero_scenarios(tmp_path):
    path, cfg = write_config(tmp_path, **{"eval.n_test": 0})
    assert main(["train", "--config", str(path)]) == 0
    ckpt = os.path.join(cfg.out_dir, "checkpoint.json")
    assert main(["eval", "--config", str(path), "--checkpoint", ckpt]) == 0
    metrics = json.load(open(os.path.join(cfg.out_dir, "metrics.json")))
    assert metrics["n_test"] == 0


def test_cli_check_robustness(tmp_path):
    path, cfg = write_config(
        tmp_path,
        **{
            "mismatch.kind": "bounded_op",
            "mismatch.c": 0.02,
            "robustness.trials": 4,
            "robustness.horizon": 300,
            "robustness.gain_trials": 3,
            "robustness.betas": [0.5, 1.0],
        },
    )
    assert main(["check-robustness", "--config", str(path)]) == 0
    report = json.load(open(os.path.join(cfg.out_dir, "gain_report.json")))
    assert report["condition_ok"] is True
    assert report["margin"] == pytest.approx(0.5, rel=1e-6)
    validation = json.load(open(os.path.join(cfg.out_dir, "validation.json")))
    assert validation["tails_ok"] is True
    sweep = open(os.path.join(cfg.out_dir, "beta_sweep.csv")).read().splitlines()
    assert sweep[0] == "beta,max_u_ratio,max_e_ratio,tails_ok"
    assert len(sweep) == 3
