"""Unconstrained empirical-risk training of the boost operator through BPTT.

Because every parameter value of the boost operator preserves tracking, the
synthesis problem is a plain unconstrained minimization: sample scenarios
(disturbance, reference), roll the closed loop, accumulate a piecewise
differentiable trajectory cost, and follow Adam on the reverse-mode gradient
obtained by backpropagating through the unrolled rollout (the parameters
enter at every step). Nothing here checks stability -- that is the point --
but a spot-check hook records the tracking tail ratio during optimization
so the structural claim is monitored, not assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import plant as plant_mod
from .boost import BoostOperator
from .closedloop import RolloutResult, rollout
from .plant import DisturbanceSpec, Layout, Plant, sample_disturbance, sample_reference
from .ren import DTYPE
from .signals import lp_norm, tail_energy

__all__ = [
    "LossSpec",
    "TrainConfig",
    "Tape",
    "forward_tape",
    "backward",
    "trajectory_loss",
    "train",
    "TrainResult",
    "evaluate",
    "TrainingDivergedError",
    "GradientBlowupError",
]


class TrainingDivergedError(RuntimeError):
    pass


class GradientBlowupError(RuntimeError):
    pass


@dataclass
class LossSpec:
    """Weights of the trajectory cost.

    Per step and per robot: tracking (p - pbar)' Q (p - pbar) with
    Q = q_weight * I, input u'Ru with R = r_weight * I, and soft barriers
    ca * softplus(kappa(d_min - d))^2 for robot-robot proximity and
    co * w_k * softplus(kappa(r_k - dist_k))^2 per obstacle, where r_k may be
    inflated by ``obstacle_margin`` to train clearance beyond the physical
    radius. Softplus keeps the cost piecewise differentiable and bounded
    below by zero.
    """

    q_weight: float = 1.0
    r_weight: float = 0.01
    collision_weight: float = 10.0
    d_min: float = 0.5
    obstacle_weight: float = 10.0
    obstacle_margin: float = 0.0
    sharpness: float = 10.0

    def __post_init__(self):
        if self.q_weight <= 0:
            raise ValueError("tracking weight must be positive definite")
        if min(self.r_weight, self.collision_weight, self.obstacle_weight) < 0:
            raise ValueError("loss weights must be nonnegative")


def trajectory_loss(
    eta: torch.Tensor,
    u: torch.Tensor,
    x_ref: torch.Tensor,
    spec: LossSpec,
    obstacles,
    params,
) -> torch.Tensor:
    """Per-episode cost over (batch, T+1, ...) trajectories; returns (batch,)."""
    R, D, n = params.n_robots, params.space_dim, params.plant_dim
    x = eta[..., :n].reshape(*eta.shape[:-1], R, 2, D)
    pos = x[..., 0, :]                                  # (B, T+1, R, D)
    ref = x_ref.reshape(*x_ref.shape[:-1], R, 2, D)[..., 0, :]

    total = spec.q_weight * ((pos - ref) ** 2).sum(dim=(-1, -2, -3))
    total = total + spec.r_weight * (u**2).sum(dim=(-1, -2))

    kap = spec.sharpness
    if spec.collision_weight > 0 and R > 1:
        for i in range(R):
            for j in range(i + 1, R):
                gap = pos[..., i, :] - pos[..., j, :]
                d = torch.sqrt((gap**2).sum(-1) + 1e-24)
                pen = torch.nn.functional.softplus(kap * (spec.d_min - d)) ** 2
                total = total + spec.collision_weight * pen.sum(-1)
    if spec.obstacle_weight > 0 and obstacles is not None and len(obstacles) > 0:
        centers = torch.tensor(obstacles.centers, dtype=DTYPE)
        radii = torch.tensor(obstacles.radii, dtype=DTYPE) + spec.obstacle_margin
        weights = torch.tensor(obstacles.weights, dtype=DTYPE)
        diff = pos[..., None, :] - centers                # (B, T+1, R, K, D)
        dist = torch.sqrt((diff**2).sum(-1) + 1e-24)
        pen = torch.nn.functional.softplus(kap * (radii - dist)) ** 2
        total = total + spec.obstacle_weight * (weights * pen).sum(dim=(-1, -2, -3))
    return total


@dataclass
class Tape:
    """Forward record of a batch of rollouts, ready for the reverse sweep."""

    loss: torch.Tensor                 # scalar, attached to the graph
    per_sample: torch.Tensor           # (B,), detached
    boost: BoostOperator
    result: RolloutResult

    def __post_init__(self):
        if not bool(torch.isfinite(self.loss.detach())):
            raise TrainingDivergedError("non-finite loss on the forward pass")


def forward_tape(
    boost: BoostOperator,
    plant: Plant,
    w: torch.Tensor,
    x_ref: torch.Tensor,
    spec: LossSpec,
) -> Tape:
    """Roll the closed loop with gradients enabled and record the mean loss."""
    sess = boost.session(batch=w.shape[0])
    result = rollout(plant, sess, w, x_ref)
    per = trajectory_loss(result.eta, result.u, result.x_ref, spec,
                          plant.layout.obstacles if plant.layout else None, plant.params)
    return Tape(loss=per.mean(), per_sample=per.detach(), boost=boost, result=result)


def backward(tape: Tape) -> torch.Tensor:
    """Exact reverse-mode gradient of the recorded loss w.r.t. theta (flat)."""
    params = list(tape.boost.parameters())
    grads = torch.autograd.grad(tape.loss, params, allow_unused=True)
    flat = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            name = next(n for n, q in tape.boost.named_parameters() if q is p)
            raise GradientBlowupError(f"non-finite adjoint at parameter {name!r}")
        flat.append(g.reshape(-1))
    return torch.cat(flat)


@dataclass
class TrainConfig:
    """Optimization protocol: scenario pool, schedule, and safeguards.

    A fixed pool of ``samples`` scenarios is drawn once and reshuffled each
    epoch. ``reference_mode`` "sampled" draws a fresh reference per scenario
    (the generalizing trainer); "fixed" uses one target pair for the whole
    pool (the single-reference baseline).
    """

    samples: int = 30
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 10
    horizon: int = 200
    seed: int = 0
    clip_norm: float = 10.0
    sigma: float = 0.5
    reference_mode: str = "sampled"
    fixed_targets: np.ndarray | None = None
    init_std: float = 1e-2
    ren_state_dim: int = 12
    ren_nonlin_dim: int = 12
    ren_rho: float = 0.95
    mlp_hidden: list[int] = field(default_factory=lambda: [15, 20, 14])
    bound: float = 1.0
    m2_mode: str = "elementwise"
    divergence_threshold: float = 1e8
    stability_check_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.samples < 1 or self.epochs < 0 or self.batch_size < 1 or self.horizon < 1:
            raise ValueError("counts must be positive (epochs may be zero)")
        if self.reference_mode not in ("sampled", "fixed"):
            raise ValueError("reference_mode must be 'sampled' or 'fixed'")


@dataclass
class TrainResult:
    boost: BoostOperator
    loss_history: list[float]
    initial_loss: float
    final_loss: float
    clip_events: int
    stability_checks: list[tuple[int, float]] = field(default_factory=list)


def _draw_pool(cfg: TrainConfig, layout: Layout, params, rng):
    dspec = DisturbanceSpec(sigma=cfg.sigma)
    ws, refs = [], []
    if cfg.reference_mode == "fixed":
        targets = cfg.fixed_targets
        if targets is None:
            targets = layout.crossed_targets if layout.crossed_targets is not None else layout.starts
    for _ in range(cfg.samples):
        ws.append(sample_disturbance(dspec, layout, params, cfg.horizon, rng))
        if cfg.reference_mode == "sampled":
            t = sample_reference(layout, rng)
        else:
            t = targets
        refs.append(plant_mod.make_reference_signal(t, cfg.horizon, params))
    w = torch.tensor(np.stack(ws), dtype=DTYPE)
    x_ref = torch.tensor(np.stack(refs), dtype=DTYPE)
    return w, x_ref


def _pool_loss(boost, plant, w, x_ref, spec) -> float:
    with torch.no_grad():
        sess = boost.session(batch=w.shape[0])
        res = rollout(plant, sess, w, x_ref)
        per = trajectory_loss(res.eta, res.u, res.x_ref, spec,
                              plant.layout.obstacles if plant.layout else None, plant.params)
    return float(per.mean())


def tracking_tail_ratio(boost, plant, targets, horizon: int = 600, seed: int = 0) -> float:
    """max of tail_energy(s, 0.8T)/||s|| over e and u for one noisy episode."""
    rng = np.random.default_rng(seed)
    cut = horizon // 5
    dspec = DisturbanceSpec(sigma=0.5, process_noise=0.02, process_cutoff=cut)
    w = sample_disturbance(dspec, plant.layout, plant.params, horizon, rng)
    x_ref = plant_mod.make_reference_signal(targets, horizon, plant.params)
    with torch.no_grad():
        res = rollout(
            plant,
            boost.session(batch=1),
            torch.tensor(w[None], dtype=DTYPE),
            torch.tensor(x_ref[None], dtype=DTYPE),
        )
    t0 = int(0.8 * horizon)
    ratios = []
    for sig in (res.e[0].numpy(), res.u[0].numpy()):
        denom = lp_norm(sig)
        ratios.append(tail_energy(sig, t0) / denom if denom > 0 else 0.0)
    return max(ratios)


def train(
    plant: Plant,
    loss_spec: LossSpec,
    cfg: TrainConfig,
    boost: BoostOperator | None = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Minimize the empirical trajectory cost over the scenario pool.

    Deterministic under a fixed config seed: pool draws, parameter
    initialization, shuffling, and update order all derive from it.
    """
    if plant.layout is None:
        raise ValueError("training requires a plant with a layout")
    rng = np.random.default_rng(cfg.seed)
    w, x_ref = _draw_pool(cfg, plant.layout, plant.params, rng)
    if boost is None:
        boost = BoostOperator(
            plant.params.aug_dim,
            plant.params.plant_dim,
            plant.params.ctrl_dim,
            ren_state_dim=cfg.ren_state_dim,
            ren_nonlin_dim=cfg.ren_nonlin_dim,
            rho=cfg.ren_rho,
            mlp_hidden=tuple(cfg.mlp_hidden),
            bound=cfg.bound,
            m2_mode=cfg.m2_mode,
            init_std=cfg.init_std,
            rng=np.random.default_rng(rng.integers(2**32)),
        )

    initial_loss = _pool_loss(boost, plant, w, x_ref, loss_spec)
    opt = torch.optim.Adam(boost.parameters(), lr=cfg.lr)
    history: list[float] = []
    stability: list[tuple[int, float]] = []
    clip_events = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(cfg.samples)
        epoch_sum, seen = 0.0, 0
        for start in range(0, cfg.samples, cfg.batch_size):
            idx = torch.tensor(order[start : start + cfg.batch_size])
            tape = forward_tape(boost, plant, w[idx], x_ref[idx], loss_spec)
            batch_loss = float(tape.loss.detach())
            if not np.isfinite(batch_loss) or batch_loss > cfg.divergence_threshold:
                raise TrainingDivergedError(
                    f"loss {batch_loss:.3e} at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            opt.zero_grad(set_to_none=True)
            flat = backward(tape)
            off = 0
            for p in boost.parameters():
                p.grad = flat[off : off + p.numel()].view_as(p).clone()
                off += p.numel()
            total_norm = torch.nn.utils.clip_grad_norm_(boost.parameters(), cfg.clip_norm)
            if float(total_norm) > cfg.clip_norm:
                clip_events += 1
            opt.step()
            epoch_sum += batch_loss * len(idx)
            seen += len(idx)
        history.append(epoch_sum / seen)
        if cfg.stability_check_every and (epoch + 1) % cfg.stability_check_every == 0:
            targets = plant.layout.benchmark_targets
            if targets is None:
                targets = sample_reference(plant.layout, np.random.default_rng(0))
            stability.append((epoch, tracking_tail_ratio(boost, plant, targets)))
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            import os

            boost.save(os.path.join(checkpoint_dir, f"checkpoint_epoch{epoch + 1:04d}.json"))

    final_loss = _pool_loss(boost, plant, w, x_ref, loss_spec)
    return TrainResult(
        boost=boost,
        loss_history=history,
        initial_loss=initial_loss,
        final_loss=final_loss,
        clip_events=clip_events,
        stability_checks=stability,
    )


def evaluate(
    boost: BoostOperator | None,
    plant: Plant,
    loss_spec: LossSpec,
    n_test: int,
    horizon: int = 200,
    seed: int = 1,
    sigma: float = 0.5,
    targets: np.ndarray | None = None,
) -> dict:
    """Monte Carlo metrics on held-out scenarios.

    A scenario "collides" if the inter-robot distance drops below d_min at
    any step and "penetrates" if any robot enters an obstacle at any step;
    ``penetration_frames`` counts robot-steps inside obstacles.
    """
    metrics = {
        "n_test": n_test,
        "mean_loss": 0.0,
        "collision_scenarios": 0,
        "penetration_scenarios": 0,
        "penetration_frames": 0,
        "collision_free_fraction": 1.0,
        "mean_final_error": 0.0,
    }
    if n_test == 0:
        return metrics
    rng = np.random.default_rng(seed)
    layout = plant.layout
    dspec = DisturbanceSpec(sigma=sigma)
    ws, refs = [], []
    for _ in range(n_test):
        ws.append(sample_disturbance(dspec, layout, plant.params, horizon, rng))
        t = targets if targets is not None else sample_reference(layout, rng)
        refs.append(plant_mod.make_reference_signal(t, horizon, plant.params))
    w = torch.tensor(np.stack(ws), dtype=DTYPE)
    x_ref = torch.tensor(np.stack(refs), dtype=DTYPE)
    with torch.no_grad():
        sess = boost.session(batch=n_test) if boost is not None else None
        res = rollout(plant, sess, w, x_ref)
        per = trajectory_loss(res.eta, res.u, res.x_ref, loss_spec,
                              layout.obstacles, plant.params)
    pos = plant.positions(res.eta).numpy()               # (B, T+1, R, D)
    ref_pos = plant.ref_positions(x_ref).numpy()

    pair_min = np.inf * np.ones(n_test)
    R = plant.params.n_robots
    for i in range(R):
        for j in range(i + 1, R):
            d = np.linalg.norm(pos[:, :, i] - pos[:, :, j], axis=-1).min(axis=1)
            pair_min = np.minimum(pair_min, d)
    collided = pair_min < loss_spec.d_min if R > 1 else np.zeros(n_test, dtype=bool)

    inside = layout.obstacles.contains(pos)              # (B, T+1, R)
    penetrated = inside.any(axis=(1, 2))
    final_err = np.linalg.norm(pos[:, -1] - ref_pos[:, -1], axis=-1).max(axis=-1)

    metrics.update(
        mean_loss=float(per.mean()),
        collision_scenarios=int(collided.sum()),
        penetration_scenarios=int(penetrated.sum()),
        penetration_frames=int(inside.sum()),
        collision_free_fraction=float((~(collided | penetrated)).mean()),
        mean_final_error=float(final_err.mean()),
    )
    return metrics
