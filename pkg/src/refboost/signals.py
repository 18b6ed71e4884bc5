"""Finite-horizon vector signals and the causal-operator execution contract.

A signal is a sequence of real vectors indexed t = 0..T. Every stateful
component in this package (boost operators, plants, replay tables) consumes
and produces signals one step at a time through the :class:`CausalOperator`
interface, which makes causality an executable property rather than a
convention.
"""

from __future__ import annotations

import csv
from typing import Protocol, runtime_checkable

import numpy as np

__all__ = [
    "Signal",
    "InvalidSignalError",
    "lp_norm",
    "tail_energy",
    "CausalOperator",
    "check_causality",
]


class InvalidSignalError(ValueError):
    """Raised when signal data contains NaN/Inf or has inconsistent shape."""


class Signal:
    """Immutable sequence of T+1 vectors of a fixed dimension.

    ``values[t]`` is the vector at time t. Instances are safe to share
    across threads; the underlying array is made read-only on construction.
    """

    __slots__ = ("_values",)

    def __init__(self, values: np.ndarray):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidSignalError(f"expected (T+1, dim) array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidSignalError("signal contains non-finite entries")
        arr = arr.copy()
        arr.setflags(write=False)
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return self._values.shape[1]

    @property
    def horizon(self) -> int:
        """Largest time index T (the signal has T+1 entries)."""
        return self._values.shape[0] - 1

    def __len__(self) -> int:
        return self._values.shape[0]

    def __getitem__(self, t) -> np.ndarray:
        return self._values[t]

    def __repr__(self) -> str:
        return f"Signal(dim={self.dim}, horizon={self.horizon})"

    @staticmethod
    def zeros(horizon: int, dim: int) -> "Signal":
        return Signal(np.zeros((horizon + 1, dim)))

    def to_csv(self, path, names: list[str] | None = None) -> None:
        """Write one row per time step with a header of column names."""
        if names is None:
            names = [f"x{i}" for i in range(self.dim)]
        if len(names) != self.dim:
            raise ValueError("number of column names must equal signal dimension")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for row in self._values:
                writer.writerow([repr(float(v)) for v in row])

    @staticmethod
    def from_csv(path) -> "Signal":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
        if len(rows) < 2:
            raise InvalidSignalError(f"{path}: expected a header plus at least one row")
        data = np.array([[float(v) for v in row] for row in rows[1:]])
        return Signal(data)


def lp_norm(s: Signal | np.ndarray, p: float = 2) -> float:
    """Signal p-norm: (sum_t |s_t|_p^p)^(1/p), with the vector p-norm per step.

    For p = inf this is sup_t |s_t|_inf. For finite p the double sum over
    (t, coordinate) collapses to a flat p-norm of all entries.
    """
    arr = s.values if isinstance(s, Signal) else np.asarray(s, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise InvalidSignalError("lp_norm of a signal with non-finite entries")
    if np.isinf(p):
        return float(np.abs(arr).max()) if arr.size else 0.0
    if p < 1:
        raise ValueError("norm order must satisfy p >= 1")
    return float(np.linalg.norm(arr.ravel(), ord=p))


def tail_energy(s: Signal | np.ndarray, t0: int, p: float = 2) -> float:
    """p-norm of the suffix s_{t0..T}; the finite-horizon decay proxy."""
    arr = s.values if isinstance(s, Signal) else np.asarray(s, dtype=np.float64)
    if not 0 <= t0 <= arr.shape[0] - 1:
        raise IndexError(f"tail start {t0} outside 0..{arr.shape[0] - 1}")
    return lp_norm(arr[t0:], p)


@runtime_checkable
class CausalOperator(Protocol):
    """Step-wise execution contract for causal sequence-to-sequence maps.

    ``step`` consumes the input at the current time and returns the output
    at the same time; internal state may only accumulate past inputs.
    ``reset`` must restore the exact initial internal state.
    """

    input_dim: int
    output_dim: int

    def reset(self) -> None: ...

    def step(self, u_t: np.ndarray) -> np.ndarray: ...


def apply_operator(op: CausalOperator, u: Signal) -> Signal:
    """Run a causal operator over a whole signal (resets first)."""
    op.reset()
    out = np.empty((len(u), op.output_dim))
    for t in range(len(u)):
        out[t] = np.asarray(op.step(u[t]), dtype=np.float64).reshape(-1)
    return Signal(out)


def check_causality(
    op: CausalOperator,
    trials: int = 20,
    horizon: int = 30,
    rng: np.random.Generator | None = None,
    tol: float = 1e-12,
) -> bool:
    """Prefix-perturbation test of causality.

    For random input pairs that agree on 0..t, the outputs must agree on
    0..t. Returns False at the first violation.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for _ in range(trials):
        t_split = int(rng.integers(0, horizon))
        u_a = rng.standard_normal((horizon + 1, op.input_dim))
        u_b = u_a.copy()
        u_b[t_split + 1 :] = rng.standard_normal((horizon - t_split, op.input_dim))
        y_a = apply_operator(op, Signal(u_a))
        y_b = apply_operator(op, Signal(u_b))
        if np.abs(y_a.values[: t_split + 1] - y_b.values[: t_split + 1]).max() > tol:
            return False
    return True
