"""The boosting operator: a contractive network gated by a bounded MLP.

The control signal is the elementwise product

    u_t = M1(w_hat)_t  *  M2(w_hat_t, x_ref_t)

where M1 is the contractive recurrent network of :mod:`refboost.ren` (its
output dies out whenever its input does) and M2 is a memoryless MLP whose
outputs are confined to (-B, B) by a rescaled sigmoid. The product therefore
dies out with M1 no matter what the reference does — which is exactly what
lets the operator consume non-decaying references without breaking tracking.

M2's gate can be elementwise (one bounded factor per control channel), a
single scalar gate shared by all channels, or disabled entirely (pure M1,
useful when a certified gain bound on the whole operator is needed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .ren import DTYPE, RenDims, RenParams, RenRealization, ren_step
from .signals import Signal, lp_norm, tail_energy

__all__ = ["BoundedMlp", "BoostOperator", "BoostSession", "lp_output_guarantee_test"]

M2_MODES = ("elementwise", "scalar", "off")


class BoundedMlp(nn.Module):
    """Feedforward net with sigmoid hidden layers and outputs in (-B, B).

    The output activation is B*(2*sigmoid(z) - 1): symmetric about zero and
    strictly inside the bound for every finite input, so boundedness is a
    structural fact rather than a trained one.
    """

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        hidden: tuple[int, ...] = (15, 20, 14),
        bound: float = 1.0,
        init_std: float = 1e-2,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if bound <= 0:
            raise ValueError("output bound must be positive")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.bound = float(bound)
        rng = np.random.default_rng(0) if rng is None else rng
        widths = [input_dim, *hidden, output_dim]
        layers = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            lin = nn.Linear(w_in, w_out, dtype=DTYPE)
            with torch.no_grad():
                lin.weight.copy_(torch.tensor(rng.standard_normal((w_out, w_in)) * init_std))
                lin.bias.copy_(torch.tensor(rng.standard_normal(w_out) * init_std))
            layers.append(lin)
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[-1]} != {self.input_dim}")
        for lin in self.layers[:-1]:
            x = torch.sigmoid(lin(x))
        z = self.layers[-1](x)
        return self.bound * (2.0 * torch.sigmoid(z) - 1.0)

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(l.out_features for l in self.layers[:-1])


def mlp_forward(m2: BoundedMlp, w_hat_t: torch.Tensor, x_ref_t: torch.Tensor) -> torch.Tensor:
    """Memoryless gate evaluation on the current (w_hat, x_ref) pair."""
    return m2(torch.cat([w_hat_t, x_ref_t], dim=-1))


class BoostOperator(nn.Module):
    """Trainable causal map (w_hat, x_ref) -> u with structurally l_p outputs."""

    def __init__(
        self,
        disturbance_dim: int,
        ref_dim: int,
        control_dim: int,
        ren_state_dim: int = 12,
        ren_nonlin_dim: int = 12,
        rho: float = 0.95,
        mlp_hidden: tuple[int, ...] = (15, 20, 14),
        bound: float = 1.0,
        m2_mode: str = "elementwise",
        output_scale: float = 1.0,
        init_std: float = 1e-2,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if m2_mode not in M2_MODES:
            raise ValueError(f"m2_mode must be one of {M2_MODES}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.disturbance_dim = disturbance_dim
        self.ref_dim = ref_dim
        self.control_dim = control_dim
        self.m2_mode = m2_mode
        self.ren = RenParams(
            RenDims(ren_state_dim, ren_nonlin_dim, disturbance_dim, control_dim),
            rho=rho,
            output_scale=output_scale,
            init_std=init_std,
            rng=rng,
        )
        if m2_mode == "off":
            self.mlp = None
        else:
            gate_dim = control_dim if m2_mode == "elementwise" else 1
            self.mlp = BoundedMlp(
                disturbance_dim + ref_dim, gate_dim,
                hidden=mlp_hidden, bound=bound, init_std=init_std, rng=rng,
            )

    @property
    def output_scale(self) -> float:
        return self.ren.output_scale

    @output_scale.setter
    def output_scale(self, beta: float) -> None:
        self.ren.output_scale = float(beta)

    def session(self, batch: int = 1, realization: RenRealization | None = None) -> "BoostSession":
        real = self.ren.realize() if realization is None else realization
        return BoostSession(real, self.mlp, self.m2_mode, batch)

    def theta(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def set_theta(self, theta) -> None:
        theta = torch.as_tensor(theta, dtype=DTYPE).reshape(-1)
        total = sum(p.numel() for p in self.parameters())
        if theta.numel() != total:
            raise ValueError(f"theta has {theta.numel()} entries, expected {total}")
        with torch.no_grad():
            off = 0
            for p in self.parameters():
                p.copy_(theta[off : off + p.numel()].view_as(p))
                off += p.numel()

    # --- checkpoint (JSON container bundling both parameter blocks) -------------

    def to_json_dict(self) -> dict:
        data = {
            "format": "refboost-checkpoint",
            "version": 1,
            "disturbance_dim": self.disturbance_dim,
            "ref_dim": self.ref_dim,
            "control_dim": self.control_dim,
            "m2_mode": self.m2_mode,
            "ren": self.ren.to_json_dict(),
        }
        if self.mlp is not None:
            data["mlp"] = {
                "hidden": list(self.mlp.hidden_widths),
                "bound": self.mlp.bound,
                "theta": torch.cat(
                    [p.detach().reshape(-1) for p in self.mlp.parameters()]
                ).numpy().tolist(),
            }
        return data

    @staticmethod
    def from_json_dict(data: dict) -> "BoostOperator":
        if data.get("format") != "refboost-checkpoint" or data.get("version") != 1:
            raise ValueError("unrecognized checkpoint format")
        ren = RenParams.from_json_dict(data["ren"])
        op = BoostOperator(
            data["disturbance_dim"],
            data["ref_dim"],
            data["control_dim"],
            ren_state_dim=ren.dims.state_dim,
            ren_nonlin_dim=ren.dims.nonlin_dim,
            rho=ren.rho,
            mlp_hidden=tuple(data["mlp"]["hidden"]) if "mlp" in data else (),
            bound=data["mlp"]["bound"] if "mlp" in data else 1.0,
            m2_mode=data["m2_mode"],
            output_scale=ren.output_scale,
            init_std=0.0,
        )
        op.ren.set_theta(ren.theta())
        if op.mlp is not None:
            theta2 = torch.as_tensor(data["mlp"]["theta"], dtype=DTYPE)
            off = 0
            with torch.no_grad():
                for p in op.mlp.parameters():
                    p.copy_(theta2[off : off + p.numel()].view_as(p))
                    off += p.numel()
        return op

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @staticmethod
    def load(path) -> "BoostOperator":
        with open(path) as fh:
            return BoostOperator.from_json_dict(json.load(fh))


class BoostSession:
    """One rollout's worth of operator state; also a causal operator over
    the stacked input (w_hat_t, x_ref_t)."""

    def __init__(self, real: RenRealization, mlp: BoundedMlp | None, m2_mode: str, batch: int):
        self.real = real
        self.mlp = mlp
        self.m2_mode = m2_mode
        self.batch = batch
        self.input_dim = real.input_dim + (mlp.input_dim - real.input_dim if mlp else 0)
        self.ref_dim = self.input_dim - real.input_dim
        self.output_dim = real.output_dim
        self.xi = real.init_state(batch)

    def reset(self) -> None:
        self.xi = self.real.init_state(self.batch)

    def boost_step(self, w_hat_t: torch.Tensor, x_ref_t: torch.Tensor) -> torch.Tensor:
        """Advance one step: y1 from the network, gated by the MLP factor."""
        self.xi, y1 = ren_step(self.real, self.xi, w_hat_t)
        if self.m2_mode == "off":
            return y1
        gate = mlp_forward(self.mlp, w_hat_t, x_ref_t)
        return y1 * gate  # scalar mode broadcasts over channels

    def step(self, u_t) -> np.ndarray:
        arr = torch.tensor(np.asarray(u_t, dtype=np.float64), dtype=DTYPE).reshape(self.batch, -1)
        w_hat = arr[:, : self.real.input_dim]
        x_ref = arr[:, self.real.input_dim :]
        with torch.no_grad():
            u = self.boost_step(w_hat, x_ref)
        out = u.numpy()
        return out[0] if self.batch == 1 else out

    def apply(self, w_hat: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
        """Run over whole (batch, T+1, dim) trajectories from rest."""
        self.reset()
        us = [self.boost_step(w_hat[:, t], x_ref[:, t]) for t in range(w_hat.shape[1])]
        return torch.stack(us, dim=1)


def lp_output_guarantee_test(
    op: BoostOperator,
    p: float = 2,
    trials: int = 10,
    horizon: int = 400,
    cutoff: int = 40,
    rng: np.random.Generator | None = None,
    tail_fraction: float = 1e-3,
) -> bool:
    """Check the structural guarantee: dead inputs give dying outputs.

    Drives the operator with disturbances that vanish after ``cutoff`` and
    bounded non-decaying references (constant plus ramp components); the
    output's tail past the settling window must fall below
    ``tail_fraction`` of the input size. The settling window is computed
    from the certified contraction rate.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    real = op.ren.realize().detach()
    settle = int(np.ceil(np.log(tail_fraction / 100.0) / np.log(real.rho)))
    if cutoff + settle >= horizon:
        raise ValueError("horizon too short for the settling window")
    for _ in range(trials):
        w_hat = np.zeros((1, horizon + 1, op.disturbance_dim))
        w_hat[0, : cutoff + 1] = rng.standard_normal((cutoff + 1, op.disturbance_dim))
        const = rng.uniform(-2, 2, op.ref_dim)
        slope = rng.uniform(-0.02, 0.02, op.ref_dim)
        x_ref = const[None, :] + slope[None, :] * np.arange(horizon + 1)[:, None]
        sess = op.session(batch=1, realization=real)
        with torch.no_grad():
            u = sess.apply(
                torch.tensor(w_hat, dtype=DTYPE),
                torch.tensor(x_ref[None], dtype=DTYPE),
            ).numpy()[0]
        scale = lp_norm(w_hat[0], p)
        if tail_energy(u, cutoff + settle, p) > tail_fraction * max(scale, 1e-12):
            return False
    return True
