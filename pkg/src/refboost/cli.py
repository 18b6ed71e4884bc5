"""Experiment runner: simulate | train | eval | check-robustness.

Every subcommand takes a YAML experiment config (--config) and is
deterministic under the configured seed. Exit codes: 0 on success, 2 for
configuration problems (bad config, missing checkpoint), 3 for numerical
failures (diverged training, state blowup).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
import torch

from . import plant as plant_mod
from .boost import BoostOperator
from .closedloop import rollout
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .plant import DisturbanceSpec, IntegrationBlowupError, MismatchSpec, Plant, get_layout
from .ren import DTYPE
from .render import render_scene
from .robust import (
    beta_for_margin,
    boost_gain_bound,
    build_gain_report,
    make_report,
    sweep_beta,
    validate_robust_tracking,
)
from .train import (
    GradientBlowupError,
    TrainingDivergedError,
    evaluate,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _build_plant(cfg: ExperimentConfig, with_mismatch: bool = True) -> Plant:
    layout = get_layout(cfg.layout)
    mism = cfg.mismatch if with_mismatch else MismatchSpec()
    return Plant(cfg.robot, layout, mism)


def _load_checkpoint(path: str) -> BoostOperator:
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint file not found: {path}")
    try:
        return BoostOperator.load(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed checkpoint {path}: {exc}") from exc


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    plant = _build_plant(cfg)
    boost = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    rng = np.random.default_rng(cfg.seed)
    sim = cfg.simulate
    n_rollouts = args.rollouts or sim.n_rollouts
    os.makedirs(cfg.out_dir, exist_ok=True)
    layout = plant.layout
    for k in range(n_rollouts):
        if sim.use_benchmark_targets and layout.benchmark_targets is not None:
            targets = layout.benchmark_targets
        else:
            targets = plant_mod.sample_reference(layout, rng)
        w = plant_mod.sample_disturbance(
            DisturbanceSpec(sigma=sim.sigma), layout, plant.params, sim.horizon, rng
        )
        x_ref = plant_mod.make_reference_signal(targets, sim.horizon, plant.params)
        sess = boost.session(batch=1) if boost is not None else None
        res = rollout(
            plant, sess,
            torch.tensor(w[None], dtype=DTYPE),
            torch.tensor(x_ref[None], dtype=DTYPE),
        ).detach()
        run_dir = os.path.join(cfg.out_dir, f"rollout_{k:02d}")
        os.makedirs(run_dir, exist_ok=True)
        res.to_csv_dir(run_dir)
        with open(os.path.join(run_dir, "record.json"), "w") as fh:
            json.dump(res.to_json_record(), fh)
        pos = plant.positions(res.eta)[0].numpy()  # (T+1, R, D)
        render_scene(
            os.path.join(run_dir, "trajectory.svg"),
            paths=[pos[:, i] for i in range(plant.params.n_robots)],
            obstacles=layout.obstacles,
            targets=targets,
            starts=pos[0],
            title=f"{cfg.layout} rollout {k}",
        )
        final = np.linalg.norm(pos[-1] - targets, axis=-1).max()
        print(f"rollout {k}: wrote {run_dir} (final target distance {final:.4f} m)")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    plant = _build_plant(cfg, with_mismatch=False)
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.rollouts is not None:
        tcfg.samples = args.rollouts
    os.makedirs(cfg.out_dir, exist_ok=True)
    result = train(plant, cfg.loss, tcfg, checkpoint_dir=cfg.out_dir)
    ckpt = os.path.join(cfg.out_dir, "checkpoint.json")
    result.boost.save(ckpt)
    with open(os.path.join(cfg.out_dir, "loss_history.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(result.loss_history):
            writer.writerow([i, repr(v)])
    save_config(cfg, os.path.join(cfg.out_dir, "config.yaml"))
    print(
        f"trained {tcfg.epochs} epochs on {tcfg.samples} rollouts "
        f"({tcfg.reference_mode} references): loss {result.initial_loss:.4f} -> "
        f"{result.final_loss:.4f}; checkpoint at {ckpt}"
    )
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval requires --checkpoint")
    boost = _load_checkpoint(args.checkpoint)
    plant = _build_plant(cfg)
    ecfg = cfg.eval
    targets = None
    if ecfg.use_benchmark_targets and plant.layout.benchmark_targets is not None:
        targets = plant.layout.benchmark_targets
    metrics = evaluate(
        boost, plant, cfg.loss,
        n_test=ecfg.n_test, horizon=ecfg.horizon, seed=ecfg.seed,
        sigma=ecfg.sigma, targets=targets,
    )
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "metrics.json")
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_check_robustness(cfg: ExperimentConfig, args) -> int:
    if cfg.mismatch.kind == "none":
        raise ConfigError("check-robustness requires a mismatch section with kind != 'none'")
    plant = _build_plant(cfg)
    rcfg = cfg.robustness
    if args.checkpoint:
        boost = _load_checkpoint(args.checkpoint)
    else:
        boost = BoostOperator(
            plant.params.aug_dim, plant.params.plant_dim, plant.params.ctrl_dim,
            m2_mode="off", init_std=0.3, rng=np.random.default_rng(cfg.seed),
        )
    report = build_gain_report(
        plant, boost, trials=rcfg.gain_trials, rng=np.random.default_rng(rcfg.seed)
    )
    # rescale the operator so the small-gain margin hits the requested value
    gain_unit = report.alpha_m / max(abs(boost.output_scale), 1e-300)
    beta = beta_for_margin(report.alpha_delta, report.alpha_fx, gain_unit, rcfg.margin)
    boost.output_scale = beta
    report = make_report(report.alpha_delta, report.alpha_fx, gain_unit * beta, report.notes)
    report.notes["output_scale"] = beta

    os.makedirs(cfg.out_dir, exist_ok=True)
    print(report.table())
    if not report.condition_ok:
        print("warning: small-gain condition not satisfied; bounds unavailable")
    validation = validate_robust_tracking(
        plant, boost, report,
        trials=rcfg.trials, horizon=rcfg.horizon, seed=rcfg.seed,
    )
    with open(os.path.join(cfg.out_dir, "gain_report.json"), "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
    with open(os.path.join(cfg.out_dir, "validation.json"), "w") as fh:
        json.dump(validation, fh, indent=2)
    print(
        f"validation over {validation['trials']} rollouts: tails_ok={validation['tails_ok']} "
        f"max u ratio {validation['max_u_ratio']:.4g} (bound {report.u_gain}) "
        f"max e ratio {validation['max_e_ratio']:.4g} (bound {report.e_gain})"
    )
    rows = sweep_beta(
        plant, boost, rcfg.betas, trials=max(2, rcfg.trials // 10),
        horizon=rcfg.horizon, seed=rcfg.seed,
    )
    sweep_path = os.path.join(cfg.out_dir, "beta_sweep.csv")
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "max_u_ratio", "max_e_ratio", "tails_ok"])
        for row in rows:
            writer.writerow([row["beta"], repr(row["max_u_ratio"]), repr(row["max_e_ratio"]), row["tails_ok"]])
    print(f"beta sweep written to {sweep_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refboost",
        description="Train and analyze tracking-preserving boost controllers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("simulate", cmd_simulate),
        ("train", cmd_train),
        ("eval", cmd_eval),
        ("check-robustness", cmd_check_robustness),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--checkpoint", default=None, help="operator checkpoint JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--epochs", type=int, default=None, help="override training epochs")
        p.add_argument("--rollouts", type=int, default=None, help="override rollout count")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.train.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationBlowupError, TrainingDivergedError, GradientBlowupError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
