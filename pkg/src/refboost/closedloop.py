"""Closed-loop rollout engine wiring plant, model, and boost operator.

The controller reconstructs the disturbance through its internal copy of the
nominal model,

    w_hat_t = eta_t - f_hat(eta_{t-1}, u_{t-1}, x_ref_{t-1}),   w_hat_0 = eta_0,

feeds it (with the reference) to the boost operator, and the resulting offset
drives the true plant. With a perfect model the reconstruction equals the
real disturbance exactly, which opens the loop: the closed-loop input map
coincides with the boost operator applied to (w, x_ref) directly. Both facts
are exercised as tests, not just stated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch

from .plant import IntegrationBlowupError, Plant
from .ren import DTYPE
from .signals import Signal

__all__ = [
    "RolloutResult",
    "rollout",
    "reconstruct_disturbance",
    "ReplaySession",
    "completeness_check",
    "evaluate_loss",
]


class ControlSession(Protocol):
    """Causal per-step controller interface used by the rollout."""

    def reset(self) -> None: ...

    def boost_step(self, w_hat_t: torch.Tensor, x_ref_t: torch.Tensor) -> torch.Tensor: ...


@dataclass
class RolloutResult:
    """Trajectories of one batch of closed-loop episodes (all length T+1)."""

    eta: torch.Tensor     # (B, T+1, aug_dim)
    u: torch.Tensor       # (B, T+1, ctrl_dim)
    w_hat: torch.Tensor   # (B, T+1, aug_dim)
    x_ref: torch.Tensor   # (B, T+1, plant_dim)
    w: torch.Tensor       # (B, T+1, aug_dim)

    @property
    def e(self) -> torch.Tensor:
        """Tracking error x - x_ref over the plant block."""
        n = self.x_ref.shape[-1]
        return self.eta[..., :n] - self.x_ref

    @property
    def batch(self) -> int:
        return self.eta.shape[0]

    @property
    def horizon(self) -> int:
        return self.eta.shape[1] - 1

    def detach(self) -> "RolloutResult":
        return RolloutResult(
            *(t.detach() for t in (self.eta, self.u, self.w_hat, self.x_ref, self.w))
        )

    def signal(self, name: str, b: int = 0) -> Signal:
        tensor = {"eta": self.eta, "u": self.u, "w_hat": self.w_hat,
                  "x_ref": self.x_ref, "w": self.w, "e": self.e}[name]
        return Signal(tensor[b].detach().numpy())

    def to_csv_dir(self, out_dir, b: int = 0) -> list[str]:
        """One CSV per trace; returns the written paths."""
        import os

        paths = []
        for name in ("eta", "u", "e", "w_hat", "x_ref"):
            path = os.path.join(out_dir, f"{name}.csv")
            self.signal(name, b).to_csv(path)
            paths.append(path)
        return paths

    def to_json_record(self, b: int = 0) -> dict:
        return {
            "horizon": self.horizon,
            "eta": self.eta[b].detach().numpy().tolist(),
            "u": self.u[b].detach().numpy().tolist(),
            "e": self.e[b].detach().numpy().tolist(),
            "w_hat": self.w_hat[b].detach().numpy().tolist(),
            "x_ref": self.x_ref[b].detach().numpy().tolist(),
        }


def _check_w(plant: Plant, w: torch.Tensor) -> None:
    n = plant.params.plant_dim
    if w.shape[-1] != plant.params.aug_dim:
        raise ValueError(f"w has dim {w.shape[-1]}, expected {plant.params.aug_dim}")
    if w[..., n:].abs().max() > 0:
        raise ValueError("process noise must not enter the controller block of eta")


def rollout(
    plant: Plant,
    controller: ControlSession | None,
    w: torch.Tensor,
    x_ref: torch.Tensor,
) -> RolloutResult:
    """Run the closed loop over the horizon defined by w and x_ref.

    ``w`` is (B, T+1, aug_dim) with w_0 carrying the initial state;
    ``x_ref`` is (B, T+1, plant_dim). A ``controller`` of None means u = 0
    (the bare base system).
    """
    if w.ndim != 3 or x_ref.ndim != 3 or w.shape[:2] != x_ref.shape[:2]:
        raise ValueError("w and x_ref must be (batch, T+1, dim) with equal leading shapes")
    _check_w(plant, w)
    B, T1 = w.shape[0], w.shape[1]
    m = plant.params.ctrl_dim
    if controller is not None:
        controller.reset()

    eta = w[:, 0]
    etas, us, w_hats = [eta], [], [w[:, 0]]
    for t in range(T1):
        w_hat_t = w_hats[t]
        if controller is None:
            u_t = torch.zeros(B, m, dtype=DTYPE)
        else:
            u_t = controller.boost_step(w_hat_t, x_ref[:, t])
        us.append(u_t)
        if t + 1 < T1:
            nominal = plant.step(eta, u_t, x_ref[:, t])
            if plant.has_mismatch:
                eta_next = plant.step_true(eta, u_t, x_ref[:, t]) + w[:, t + 1]
            else:
                eta_next = nominal + w[:, t + 1]
            if not bool(torch.isfinite(eta_next).all()):
                raise IntegrationBlowupError(f"non-finite state at step {t + 1}")
            w_hats.append(eta_next - nominal)
            etas.append(eta_next)
            eta = eta_next
    return RolloutResult(
        eta=torch.stack(etas, dim=1),
        u=torch.stack(us, dim=1),
        w_hat=torch.stack(w_hats, dim=1),
        x_ref=x_ref,
        w=w,
    )


def reconstruct_disturbance(
    plant: Plant,
    eta: torch.Tensor,
    u: torch.Tensor,
    x_ref: torch.Tensor,
) -> torch.Tensor:
    """Recompute w_hat from recorded trajectories against the nominal model."""
    if eta.shape[1] != u.shape[1] or eta.shape[1] != x_ref.shape[1]:
        raise ValueError("trajectory lengths disagree")
    w_hat = [eta[:, 0]]
    for t in range(1, eta.shape[1]):
        w_hat.append(eta[:, t] - plant.step(eta[:, t - 1], u[:, t - 1], x_ref[:, t - 1]))
    return torch.stack(w_hat, dim=1)


class ReplaySession:
    """Table-driven causal operator that plays back a recorded input trace.

    This realizes the closed-loop input map of an arbitrary policy on a
    given (w, x_ref) instance, which is how the completeness direction of
    the parametrization is checked numerically.
    """

    def __init__(self, u_trace: torch.Tensor):
        self.u_trace = u_trace  # (B, T+1, m)
        self.t = 0

    def reset(self) -> None:
        self.t = 0

    def boost_step(self, w_hat_t, x_ref_t) -> torch.Tensor:
        u = self.u_trace[:, self.t]
        self.t += 1
        return u


class StatePolicy(Protocol):
    """A direct state-feedback policy u_t = C_t(eta_{t:0}, x_ref_{t:0})."""

    def reset(self) -> None: ...

    def policy_step(self, eta_t: torch.Tensor, x_ref_t: torch.Tensor) -> torch.Tensor: ...


def policy_rollout(plant: Plant, policy: StatePolicy, w, x_ref) -> RolloutResult:
    """Closed loop under a direct policy (no internal model in the loop)."""
    _check_w(plant, w)
    B, T1 = w.shape[0], w.shape[1]
    policy.reset()
    eta = w[:, 0]
    etas, us = [eta], []
    for t in range(T1):
        u_t = policy.policy_step(eta, x_ref[:, t])
        us.append(u_t)
        if t + 1 < T1:
            eta = plant.step_true(eta, u_t, x_ref[:, t]) + w[:, t + 1]
            etas.append(eta)
    eta_traj = torch.stack(etas, dim=1)
    u_traj = torch.stack(us, dim=1)
    return RolloutResult(
        eta=eta_traj,
        u=u_traj,
        w_hat=reconstruct_disturbance(plant, eta_traj, u_traj, x_ref),
        x_ref=x_ref,
        w=w,
    )


def completeness_check(
    plant: Plant,
    policy: StatePolicy,
    w: torch.Tensor,
    x_ref: torch.Tensor,
    tol: float = 1e-9,
) -> tuple[bool, float]:
    """Replay a policy's closed-loop inputs through the parametrization.

    Records the policy's input trace on the instance, installs it as the
    operator, re-runs the loop, and reports the worst trajectory deviation.
    Equality (to numerics) is the completeness statement: any tracking
    policy is reproduced by some admissible operator choice.
    """
    with torch.no_grad():
        direct = policy_rollout(plant, policy, w, x_ref)
        replay = rollout(plant, ReplaySession(direct.u), w, x_ref)
        err = max(
            float((direct.eta - replay.eta).abs().max()),
            float((direct.u - replay.u).abs().max()),
        )
    return err <= tol, err


def evaluate_loss(result: RolloutResult, loss_spec, obstacles, params) -> float:
    """Scalar trajectory cost of episode 0 under the configured loss."""
    from .train import trajectory_loss

    val = trajectory_loss(result.eta, result.u, result.x_ref, loss_spec, obstacles, params)
    return float(val.mean())
