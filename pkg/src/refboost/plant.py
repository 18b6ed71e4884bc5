"""Point-mass robots with nonlinear drag and an integral tracking controller.

The "base system" is the plant augmented with a per-robot PI controller with
velocity damping; it tracks any constant position target on its own. The
boost signal u enters purely as an offset to the tracked target (reference
governor wiring), so the augmented dynamics are

    err  = (pbar + u) - p
    F    = kp*err - kd*q + ki*v
    q+   = q + dt/m * (F - b_lin*q - b_quad*|q|*q)
    p+   = p + dt*q+
    v+   = v + err

per robot, with |q| the robot's speed. The augmented state is
eta = (p1, q1, ..., pR, qR, v1, ..., vR) and process noise enters the
plant block only.

Model mismatch is supported in two flavors: a drag-coefficient error, and a
saturated linear operator of (x - x_ref, u) whose incremental gain is known
in closed form (it vanishes on exact-tracking trajectories, so achievable
references stay achievable under the perturbed plant).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .ren import DTYPE

__all__ = [
    "RobotParams",
    "Obstacles",
    "Layout",
    "corridor_layout",
    "mountain_range_layout",
    "get_layout",
    "MismatchSpec",
    "Plant",
    "DisturbanceSpec",
    "sample_disturbance",
    "sample_reference",
    "make_reference_signal",
    "base_force",
    "IntegrationBlowupError",
]


class IntegrationBlowupError(RuntimeError):
    """Raised when a plant state stops being finite during a rollout."""


@dataclass
class RobotParams:
    """Physical constants and base-controller gains (shared by all robots).

    The gain defaults are fixed by the base-tracking test: from rest, the
    position error to a constant target must fall below 1e-3 within 400
    steps. kp/kd/ki act per axis (diagonal gain matrices).
    """

    n_robots: int = 2
    space_dim: int = 2
    mass: float = 1.0
    drag_lin: float = 1.0
    drag_quad: float = 0.1
    dt: float = 0.05
    kp: float = 4.0
    kd: float = 3.0
    ki: float = 0.1

    def __post_init__(self):
        if self.mass <= 0 or self.dt <= 0:
            raise ValueError("mass and dt must be positive")
        if self.drag_lin < 0 or self.drag_quad < 0:
            raise ValueError("drag coefficients must be nonnegative")

    # eta = (p1, q1, ..., pR, qR | v1, ..., vR), blocks of space_dim each
    @property
    def plant_dim(self) -> int:
        return 2 * self.n_robots * self.space_dim

    @property
    def ctrl_dim(self) -> int:
        return self.n_robots * self.space_dim

    @property
    def integ_dim(self) -> int:
        return self.n_robots * self.space_dim

    @property
    def aug_dim(self) -> int:
        return self.plant_dim + self.integ_dim


@dataclass
class Obstacles:
    """Circular obstacles: centers (K, 2), radii (K,), penalty weights (K,)."""

    centers: np.ndarray
    radii: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.radii = np.atleast_1d(np.asarray(self.radii, dtype=np.float64))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        if (self.radii <= 0).any():
            raise ValueError("obstacle radii must be positive")

    def __len__(self) -> int:
        return len(self.radii)

    @staticmethod
    def empty() -> "Obstacles":
        return Obstacles(np.zeros((0, 2)), np.zeros(0), np.zeros(0))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask: is each (.., 2) point strictly inside any obstacle."""
        if len(self) == 0:
            return np.zeros(points.shape[:-1], dtype=bool)
        d = np.linalg.norm(points[..., None, :] - self.centers, axis=-1)
        return (d < self.radii).any(axis=-1)


@dataclass
class Layout:
    """A named benchmark scene: obstacles, nominal starts, reference band.

    References are constant position pairs sampled on the line y = ref_y
    with x in ref_x_range and pairwise separation >= min_separation.
    """

    name: str
    obstacles: Obstacles
    starts: np.ndarray  # (n_robots, 2) nominal initial positions
    ref_y: float = 2.0
    ref_x_range: tuple[float, float] = (-2.0, 2.0)
    min_separation: float = 1.0
    benchmark_targets: np.ndarray | None = None
    crossed_targets: np.ndarray | None = None

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.float64)


def corridor_layout() -> Layout:
    """Two large circles flanking a 1.6 m gap at the origin; targets above."""
    obstacles = Obstacles(
        centers=np.array([[-2.0, 0.0], [2.0, 0.0]]),
        radii=np.array([1.2, 1.2]),
        weights=np.ones(2),
    )
    return Layout(
        name="corridor",
        obstacles=obstacles,
        starts=np.array([[-2.0, -2.0], [2.0, -2.0]]),
        benchmark_targets=np.array([[-2.0, 2.0], [2.0, 2.0]]),
        crossed_targets=np.array([[2.0, 2.0], [-2.0, 2.0]]),
    )


def mountain_range_layout() -> Layout:
    """A 2x3 grid of small circles with several gaps; targets beyond it."""
    centers = np.array([[x, y] for y in (-0.5, 0.5) for x in (-1.5, 0.0, 1.5)])
    obstacles = Obstacles(
        centers=centers, radii=np.full(6, 0.4), weights=np.ones(6)
    )
    return Layout(
        name="mountain_range",
        obstacles=obstacles,
        starts=np.array([[-1.5, -2.0], [1.5, -2.0]]),
        benchmark_targets=np.array([[1.5, 2.0], [-1.5, 2.0]]),
        crossed_targets=np.array([[-1.5, 2.0], [1.5, 2.0]]),
    )


_LAYOUTS = {"corridor": corridor_layout, "mountain_range": mountain_range_layout}


def get_layout(name: str) -> Layout:
    try:
        return _LAYOUTS[name]()
    except KeyError:
        raise ValueError(f"unknown layout {name!r}; choose from {sorted(_LAYOUTS)}")


@dataclass
class MismatchSpec:
    """Configuration of the model error injected into the true plant.

    kind "bounded_op": delta_x = c * tanh(L (x - x_ref; u)) with the fixed
    random matrix L normalized to unit spectral norm, so the incremental
    gain is exactly bounded by c. kind "drag_error": the true plant's drag
    coefficients are scaled by (1 + drag_lin_error/quad_error).
    """

    kind: str = "none"
    c: float = 0.0
    seed: int = 0
    drag_lin_error: float = 0.0
    drag_quad_error: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "bounded_op", "drag_error"):
            raise ValueError(f"unknown mismatch kind {self.kind!r}")
        if self.c < 0:
            raise ValueError("mismatch gain c must be nonnegative")


class _BoundedOpMismatch:
    def __init__(self, spec: MismatchSpec, params: RobotParams):
        rng = np.random.default_rng(spec.seed)
        n, m = params.plant_dim, params.ctrl_dim
        L = rng.standard_normal((n, n + m))
        L /= np.linalg.norm(L, ord=2)
        self.L = torch.tensor(L, dtype=DTYPE)
        self.c = spec.c
        self.gain_bound = spec.c  # tanh is 1-Lipschitz and ||L||_2 = 1

    def delta(self, x, u, x_ref, params) -> torch.Tensor:
        z = torch.cat([x - x_ref, u], dim=-1)
        return self.c * torch.tanh(z @ self.L.T)


class _DragErrorMismatch:
    def __init__(self, spec: MismatchSpec, params: RobotParams):
        self.db1 = spec.drag_lin_error * params.drag_lin
        self.db2 = spec.drag_quad_error * params.drag_quad
        self.gain_bound = None  # no closed form; estimate empirically

    def delta(self, x, u, x_ref, params) -> torch.Tensor:
        R, D = params.n_robots, params.space_dim
        xr = x.reshape(*x.shape[:-1], R, 2, D)
        q = xr[..., 1, :]
        speed = torch.sqrt((q**2).sum(-1, keepdim=True) + 1e-24)
        dq = -(params.dt / params.mass) * (self.db1 * q + self.db2 * speed * q)
        dp = params.dt * dq
        out = torch.zeros_like(xr)
        out[..., 0, :] = dp
        out[..., 1, :] = dq
        return out.reshape(*x.shape)


def build_mismatch(spec: MismatchSpec, params: RobotParams):
    if spec.kind == "none":
        return None
    if spec.kind == "bounded_op":
        return _BoundedOpMismatch(spec, params)
    return _DragErrorMismatch(spec, params)


def base_force(
    params: RobotParams,
    p: torch.Tensor,
    q: torch.Tensor,
    v: torch.Tensor,
    target: torch.Tensor,
    offset: torch.Tensor,
) -> torch.Tensor:
    """PI-with-damping control force; arguments are (.., n_robots, D)."""
    err = (target + offset) - p
    return params.kp * err - params.kd * q + params.ki * v


class Plant:
    """The augmented base system, optionally with an injected model error.

    ``step`` is the nominal map f-hat used as the controller's internal
    model; ``step_true`` is the physical plant (identical object and code
    path when no mismatch is configured, so rollouts agree bit for bit).
    Both take and return batched flat tensors and exclude process noise,
    which the rollout adds afterwards per the system convention.
    """

    def __init__(
        self,
        params: RobotParams | None = None,
        layout: Layout | None = None,
        mismatch: MismatchSpec | None = None,
    ):
        self.params = params if params is not None else RobotParams()
        self.layout = layout
        self.mismatch_spec = mismatch if mismatch is not None else MismatchSpec()
        self._mismatch = build_mismatch(self.mismatch_spec, self.params)

    @property
    def has_mismatch(self) -> bool:
        return self._mismatch is not None

    @property
    def mismatch_gain_bound(self) -> float | None:
        if self._mismatch is None:
            return 0.0
        return self._mismatch.gain_bound

    def split(self, eta: torch.Tensor):
        """eta -> (p, q, v) with shapes (.., R, D)."""
        pr = self.params
        n = pr.plant_dim
        xr = eta[..., :n].reshape(*eta.shape[:-1], pr.n_robots, 2, pr.space_dim)
        v = eta[..., n:].reshape(*eta.shape[:-1], pr.n_robots, pr.space_dim)
        return xr[..., 0, :], xr[..., 1, :], v

    def pack(self, p: torch.Tensor, q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        x = torch.stack([p, q], dim=-2).reshape(*p.shape[:-2], self.params.plant_dim)
        return torch.cat([x, v.reshape(*v.shape[:-2], self.params.integ_dim)], dim=-1)

    def ref_positions(self, x_ref: torch.Tensor) -> torch.Tensor:
        pr = self.params
        xr = x_ref.reshape(*x_ref.shape[:-1], pr.n_robots, 2, pr.space_dim)
        return xr[..., 0, :]

    def positions(self, eta_or_x: torch.Tensor) -> torch.Tensor:
        pr = self.params
        x = eta_or_x[..., : pr.plant_dim]
        return x.reshape(*x.shape[:-1], pr.n_robots, 2, pr.space_dim)[..., 0, :]

    def _advance(self, eta, u, x_ref):
        pr = self.params
        p, q, v = self.split(eta)
        target = self.ref_positions(x_ref)
        offset = u.reshape(*u.shape[:-1], pr.n_robots, pr.space_dim)
        err = (target + offset) - p
        force = pr.kp * err - pr.kd * q + pr.ki * v
        speed = torch.sqrt((q**2).sum(-1, keepdim=True) + 1e-24)
        drag = pr.drag_lin * q + pr.drag_quad * speed * q
        q_new = q + (pr.dt / pr.mass) * (force - drag)
        p_new = p + pr.dt * q_new
        v_new = v + err
        return p_new, q_new, v_new

    def step(self, eta: torch.Tensor, u: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
        """Nominal one-step map f-hat(eta_t, u_t, x_ref_t) -> eta_{t+1} part."""
        return self.pack(*self._advance(eta, u, x_ref))

    def step_true(self, eta: torch.Tensor, u: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
        out = self.step(eta, u, x_ref)
        if self._mismatch is not None:
            n = self.params.plant_dim
            dx = self._mismatch.delta(eta[..., :n], u, x_ref, self.params)
            out = torch.cat([out[..., :n] + dx, out[..., n:]], dim=-1)
        return out

    def mismatch_delta(self, eta, u, x_ref) -> torch.Tensor:
        """The injected error term for the step taken from (eta, u, x_ref)."""
        n = self.params.plant_dim
        if self._mismatch is None:
            return torch.zeros_like(eta[..., :n])
        return self._mismatch.delta(eta[..., :n], u, x_ref, self.params)

    def equilibrium(self, x_ref_row: torch.Tensor) -> torch.Tensor:
        """Augmented state holding an achievable constant reference exactly."""
        zeros_v = torch.zeros(
            *x_ref_row.shape[:-1], self.params.integ_dim, dtype=DTYPE
        )
        return torch.cat([x_ref_row, zeros_v], dim=-1)


@dataclass
class DisturbanceSpec:
    """Distribution of w: initial-state randomness plus optional process noise.

    w_0 carries the full initial plant state (positions jittered by
    ``sigma``, velocities nominal); later steps default to zero. When
    ``reject_inside_obstacles`` is set, initial positions are resampled
    until no robot starts inside an obstacle, which keeps evaluation
    scenarios physically meaningful.
    """

    sigma: float = 0.5
    process_noise: float = 0.0
    process_cutoff: int = 0
    reject_inside_obstacles: bool = True
    rejection_budget: int = 1000


def sample_disturbance(
    spec: DisturbanceSpec,
    layout: Layout,
    params: RobotParams,
    horizon: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one w trajectory of shape (horizon+1, aug_dim)."""
    R, D = params.n_robots, params.space_dim
    w = np.zeros((horizon + 1, params.aug_dim))
    for _ in range(max(spec.rejection_budget, 1)):
        pos = layout.starts + spec.sigma * rng.standard_normal((R, D))
        if not spec.reject_inside_obstacles or len(layout.obstacles) == 0:
            break
        if not layout.obstacles.contains(pos).any():
            break
    else:
        raise RuntimeError("could not sample initial positions outside obstacles")
    x0 = np.zeros((R, 2, D))
    x0[:, 0, :] = pos
    w[0, : params.plant_dim] = x0.reshape(-1)
    if spec.process_noise > 0.0 and spec.process_cutoff > 0:
        t_end = min(spec.process_cutoff, horizon)
        w[1 : t_end + 1, : params.plant_dim] = spec.process_noise * rng.standard_normal(
            (t_end, params.plant_dim)
        )
    return w


def sample_reference(
    layout: Layout, rng: np.random.Generator, budget: int = 10000
) -> np.ndarray:
    """Rejection-sample a constant target pair (R, D) from the layout band."""
    lo, hi = layout.ref_x_range
    n = layout.starts.shape[0]
    for _ in range(budget):
        xs = rng.uniform(lo, hi, n)
        pts = np.column_stack([xs, np.full(n, layout.ref_y)])
        ok = True
        for i in range(n):
            for j in range(i + 1, n):
                if np.linalg.norm(pts[i] - pts[j]) < layout.min_separation:
                    ok = False
        if ok:
            return pts
    raise RuntimeError("reference rejection sampling budget exhausted")


def make_reference_signal(
    targets: np.ndarray, horizon: int, params: RobotParams
) -> np.ndarray:
    """Constant full-state reference (positions = targets, velocities = 0)."""
    targets = np.asarray(targets, dtype=np.float64)
    R, D = params.n_robots, params.space_dim
    if targets.shape != (R, D):
        raise ValueError(f"targets must have shape {(R, D)}, got {targets.shape}")
    row = np.zeros((R, 2, D))
    row[:, 0, :] = targets
    return np.tile(row.reshape(-1), (horizon + 1, 1))
