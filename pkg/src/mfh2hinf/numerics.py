"""Dense small-matrix linear algebra and backward ODE integration.

Every Riccati / adjoint / offset equation in this package is integrated by the
same fixed-step classical RK4 routine, backward from the terminal time.
Coefficients are treated as piecewise constant per grid interval: all four RK4
stages of the step over [s_k, s_{k+1}] see the field evaluated at the left
node time s_k, which keeps trajectories reproducible and node-aligned.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np


class NonFiniteError(RuntimeError):
    """A step produced a non-finite entry (signals Riccati blow-up)."""

    def __init__(self, time: float, message: str | None = None):
        self.time = float(time)
        super().__init__(message or f"non-finite value during integration at s={time:.6g}")


class SingularBlockError(RuntimeError):
    """A block or its Schur complement is singular beyond the conditioning threshold."""


COND_LIMIT = 1e12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of K+1 nodes s_k = t0 + k*dt on [t0, T]."""

    t0: float
    T: float
    K: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"T={self.T} must exceed t0={self.t0}")
        if self.K < 2:
            raise ValueError(f"K={self.K} must be at least 2")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.K

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.K + 1)

    def index_of(self, s: float) -> int:
        """Nearest node index, clipped to the grid."""
        k = int(round((s - self.t0) / self.dt))
        return min(max(k, 0), self.K)

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.K * int(factor))


class MatrixTrajectory:
    """A time-indexed array-valued function on a uniform grid.

    ``values[k]`` is the value at node s_k; evaluation between nodes is linear
    interpolation. Items may be matrices (r, c) or vectors (d,).
    """

    __slots__ = ("grid", "values")

    def __init__(self, grid: TimeGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != grid.K + 1:
            raise ValueError(f"expected {grid.K + 1} node values, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(grid.t0, "trajectory contains non-finite entries")
        self.grid = grid
        self.values = values

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "MatrixTrajectory":
        value = np.asarray(value, dtype=float)
        return cls(grid, np.broadcast_to(value, (grid.K + 1,) + value.shape).copy())

    @property
    def item_shape(self) -> tuple:
        return self.values.shape[1:]

    def __getitem__(self, k: int) -> np.ndarray:
        return self.values[k]

    def __len__(self) -> int:
        return self.values.shape[0]

    def value(self, s: float) -> np.ndarray:
        """Linear interpolation between the two bracketing nodes."""
        g = self.grid
        x = (s - g.t0) / g.dt
        if x <= 0.0:
            return self.values[0]
        if x >= g.K:
            return self.values[g.K]
        k = int(x)
        w = x - k
        if w == 0.0:
            return self.values[k]
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def resampled(self, grid: TimeGrid) -> "MatrixTrajectory":
        out = np.stack([self.value(s) for s in grid.nodes])
        return MatrixTrajectory(grid, out)

    def is_constant(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.values - self.values[0]) <= tol))


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def integrate_backward(
    field: Callable[[float, np.ndarray], np.ndarray],
    terminal: np.ndarray,
    grid: TimeGrid,
    symmetric: bool = False,
) -> MatrixTrajectory:
    """Classical RK4, backward from value(T) = terminal to t0.

    ``field(s, M)`` returns dM/ds. All stages of the step over
    [s_k, s_{k+1}] are evaluated with s frozen at the left node s_k.
    With ``symmetric=True`` the state is symmetrized over its last two axes
    after every step (blockwise for stacked states).
    """
    M = np.array(terminal, dtype=float)
    out = np.empty((grid.K + 1,) + M.shape)
    out[grid.K] = M
    h = grid.dt
    for k in range(grid.K - 1, -1, -1):
        s = grid.t0 + k * h
        k1 = np.asarray(field(s, M))
        k2 = np.asarray(field(s, M - 0.5 * h * k1))
        k3 = np.asarray(field(s, M - 0.5 * h * k2))
        k4 = np.asarray(field(s, M - h * k3))
        M = M - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if symmetric:
            M = _symmetrize(M)
        if not np.all(np.isfinite(M)):
            raise NonFiniteError(s)
        out[k] = M
    return MatrixTrajectory(grid, out)


def integrate_forward(
    field: Callable[[float, np.ndarray], np.ndarray],
    initial: np.ndarray,
    grid: TimeGrid,
) -> MatrixTrajectory:
    """RK4 forward companion (deterministic mean / moment equations)."""
    M = np.array(initial, dtype=float)
    out = np.empty((grid.K + 1,) + M.shape)
    out[0] = M
    h = grid.dt
    for k in range(grid.K):
        s = grid.t0 + k * h
        k1 = np.asarray(field(s, M))
        k2 = np.asarray(field(s, M + 0.5 * h * k1))
        k3 = np.asarray(field(s, M + 0.5 * h * k2))
        k4 = np.asarray(field(s, M + h * k3))
        M = M + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(M)):
            raise NonFiniteError(s)
        out[k + 1] = M
    return MatrixTrajectory(grid, out)


def solve_linear_block2(M11, M12, M21, M22, r1, r2):
    """Solve the 2x2 block system  M11 X1 + M12 X2 = r1,  M21 X1 + M22 X2 = r2.

    Block elimination through the Schur complement of M11; raises
    SingularBlockError when M11 or the complement exceeds the conditioning
    threshold. Right-hand sides may carry multiple columns.
    """
    M11 = np.atleast_2d(np.asarray(M11, dtype=float))
    M12 = np.atleast_2d(np.asarray(M12, dtype=float))
    M21 = np.atleast_2d(np.asarray(M21, dtype=float))
    M22 = np.atleast_2d(np.asarray(M22, dtype=float))
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    if np.linalg.cond(M11) > COND_LIMIT:
        raise SingularBlockError("M11 block is singular beyond conditioning threshold")
    try:
        Y1 = np.linalg.solve(M11, r1)
        Y2 = np.linalg.solve(M11, M12)
    except np.linalg.LinAlgError as exc:
        raise SingularBlockError(f"M11 block solve failed: {exc}") from exc
    S = M22 - M21 @ Y2
    if np.linalg.cond(S) > COND_LIMIT:
        raise SingularBlockError("Schur complement is singular beyond conditioning threshold")
    try:
        X2 = np.linalg.solve(S, r2 - M21 @ Y1)
    except np.linalg.LinAlgError as exc:
        raise SingularBlockError(f"Schur complement solve failed: {exc}") from exc
    X1 = Y1 - Y2 @ X2
    return X1, X2


def min_eigenvalue(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(_symmetrize(M))[0])


def backward_residual_error(
    traj: MatrixTrajectory,
    rhs_at_node: Callable[[int], np.ndarray],
    nodes,
) -> list[float]:
    """Relative mismatch between a five-point central-difference derivative and
    the algebraic right-hand side, at the requested interior nodes."""
    g = traj.grid
    errs = []
    for k in nodes:
        k = int(k)
        if k < 2 or k > g.K - 2:
            raise ValueError(f"node {k} is not interior enough for the 5-point stencil")
        v = traj.values
        dM = (-v[k + 2] + 8.0 * v[k + 1] - 8.0 * v[k - 1] + v[k - 2]) / (12.0 * g.dt)
        rhs = np.asarray(rhs_at_node(k))
        denom = max(np.linalg.norm(rhs), np.linalg.norm(dM), 1e-9)
        errs.append(float(np.linalg.norm(dM - rhs) / denom))
    return errs


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.K + 1, grid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w
