"""Mean-field stochastic bounded-real-lemma engine.

Feasibility of the coupled Riccati pair for the disturbance-to-output gain
bound, affine corrections for the deterministic drift/diffusion offsets, the
worst-case disturbance in feedback form, the attained cost, and the
H-infinity norm by bisection over the attenuation level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import InitialLaw, MFSystem
from .numerics import (
    MatrixTrajectory,
    NonFiniteError,
    TimeGrid,
    integrate_backward,
    min_eigenvalue,
    trapezoid_weights,
)


class NoUpperBoundError(RuntimeError):
    """Feasibility not attained below the doubling cap (degenerate inputs)."""


class _PositivityViolation(Exception):
    def __init__(self, time: float, which: str):
        self.time = time
        self.which = which


@dataclass
class Infeasible:
    """Certificate of infeasibility at the probed attenuation level."""

    gamma: float
    reason: str  # "positivity" or "blowup"
    time: float
    feasible: bool = False


@dataclass
class BRLKernels:
    """Node-sampled gain kernels of the bounded-real pair."""

    Lambda: np.ndarray      # (K+1, n_v, n_v)
    LambdaBar: np.ndarray   # (K+1, n_v, n_v)
    Phi: np.ndarray         # (K+1, n, n_v)
    PhiBar: np.ndarray      # (K+1, n, n_v)
    phi: np.ndarray | None = None      # (K+1, n_v)
    phiBar: np.ndarray | None = None   # (K+1, n_v)


@dataclass
class BRLSolution:
    gamma: float
    P: MatrixTrajectory
    Pi: MatrixTrajectory
    kernels: BRLKernels
    delta: float
    weights_dev: np.ndarray
    weights_mean: np.ndarray
    sys: MFSystem
    eta: MatrixTrajectory | None = None
    etaBar: MatrixTrajectory | None = None
    F: np.ndarray | None = None        # (K+1, n_v, n)
    Fbar: np.ndarray | None = None     # (K+1, n_v, n)
    f: np.ndarray | None = None        # (K+1, n_v)
    J1star: float | None = None
    feasible: bool = True


def _weight_array(w, grid: TimeGrid, n: int) -> np.ndarray:
    if isinstance(w, MatrixTrajectory):
        w = w.values
    w = np.asarray(w, dtype=float)
    if w.shape == (n, n):
        w = np.broadcast_to(w, (grid.K + 1, n, n))
    if w.shape != (grid.K + 1, n, n):
        raise ValueError(f"weight shape {w.shape} does not match grid/state dimensions")
    return np.ascontiguousarray(w)


def brl_cdre_solve(
    sys: MFSystem,
    gamma: float,
    weights=None,
    delta_margin: float = 1e-8,
    steps: int | None = None,
):
    """Integrate the bounded-real Riccati pair backward from zero terminals.

    Returns a BRLSolution when both kernels stay uniformly positive
    (min eigenvalue >= delta_margin on every node and stage), otherwise an
    Infeasible record carrying the violation or blow-up time. The optional
    ``weights`` pair substitutes Gram state weights (W_dev in the deviation
    equation, W_mean in the mean equation) for the default Q^T Q, which is
    how the closed-loop gain bound is certified.
    """
    if steps is not None and steps != sys.grid.K:
        sys = sys.resampled(steps)
    grid = sys.grid
    n, n_v = sys.n, sys.n_v
    g2 = gamma * gamma
    eye_v = np.eye(n_v)

    if weights is None:
        Wdev = Wmean = sys.q_gram()
    else:
        Wdev = _weight_array(weights[0], grid, n)
        Wmean = _weight_array(weights[1], grid, n)

    til = sys.tilde()
    A1, A2, C1, C2 = sys.A1.values, sys.A2.values, sys.C1.values, sys.C2.values
    At1, At2, Ct1, Ct2 = til.A1.values, til.A2.values, til.C1.values, til.C2.values

    def field(s, M):
        k = grid.index_of(s)
        P, Pi = M[0], M[1]
        Lam = g2 * eye_v + C2[k].T @ P @ C2[k]
        LamBar = g2 * eye_v + Ct2[k].T @ P @ Ct2[k]
        if min_eigenvalue(Lam) < delta_margin:
            raise _PositivityViolation(s, "Lambda")
        if min_eigenvalue(LamBar) < delta_margin:
            raise _PositivityViolation(s, "LambdaBar")
        Phi = P @ C1[k] + A2[k].T @ P @ C2[k]
        PhiBar = Pi @ Ct1[k] + At2[k].T @ P @ Ct2[k]
        dP = -(P @ A1[k] + A1[k].T @ P + A2[k].T @ P @ A2[k] - Wdev[k]
               - Phi @ np.linalg.solve(Lam, Phi.T))
        dPi = -(Pi @ At1[k] + At1[k].T @ Pi + At2[k].T @ P @ At2[k] - Wmean[k]
                - PhiBar @ np.linalg.solve(LamBar, PhiBar.T))
        return np.stack([dP, dPi])

    try:
        # blow-up at infeasible levels is detected, not an arithmetic error
        with np.errstate(over="ignore", invalid="ignore"):
            sol = integrate_backward(field, np.zeros((2, n, n)), grid, symmetric=True)
    except _PositivityViolation as exc:
        return Infeasible(gamma=gamma, reason="positivity", time=exc.time)
    except NonFiniteError as exc:
        return Infeasible(gamma=gamma, reason="blowup", time=exc.time)

    P = MatrixTrajectory(grid, sol.values[:, 0])
    Pi = MatrixTrajectory(grid, sol.values[:, 1])

    Lam = g2 * eye_v + np.einsum("kiv,kij,kjw->kvw", C2, P.values, C2)
    LamBar = g2 * eye_v + np.einsum("kiv,kij,kjw->kvw", Ct2, P.values, Ct2)
    Phi = np.einsum("kij,kjv->kiv", P.values, C1) + np.einsum(
        "kji,kjl,klv->kiv", A2, P.values, C2)
    PhiBar = np.einsum("kij,kjv->kiv", Pi.values, Ct1) + np.einsum(
        "kji,kjl,klv->kiv", At2, P.values, Ct2)
    delta = min(
        min(min_eigenvalue(Lam[k]) for k in range(grid.K + 1)),
        min(min_eigenvalue(LamBar[k]) for k in range(grid.K + 1)),
    )
    if delta < delta_margin:
        k_bad = int(np.argmin([min(min_eigenvalue(Lam[k]), min_eigenvalue(LamBar[k]))
                               for k in range(grid.K + 1)]))
        return Infeasible(gamma=gamma, reason="positivity", time=float(grid.nodes[k_bad]))

    return BRLSolution(
        gamma=gamma, P=P, Pi=Pi,
        kernels=BRLKernels(Lambda=Lam, LambdaBar=LamBar, Phi=Phi, PhiBar=PhiBar),
        delta=delta, weights_dev=np.asarray(Wdev), weights_mean=np.asarray(Wmean),
        sys=sys,
    )


def brl_affine_solve(sys: MFSystem, sol: BRLSolution):
    """Backward affine corrections for deterministic drift/diffusion offsets.

    The deviation-channel correction solves the adjoint equation under the
    worst-case deviation feedback; the mean-channel correction solves the
    companion equation under the mean feedback. Both vanish when the affine
    terms do. Fills the worst-case feedback gains and offsets on ``sol`` and
    returns ``(eta, etaBar)``.
    """
    grid = sys.grid
    n = sys.n
    til = sys.tilde()
    A1, A2, C1, C2 = sys.A1.values, sys.A2.values, sys.C1.values, sys.C2.values
    At1, At2, Ct1, Ct2 = til.A1.values, til.A2.values, til.C1.values, til.C2.values
    b, sg = sys.b.values, sys.sigma.values
    P, Pi = sol.P.values, sol.Pi.values
    ker = sol.kernels

    F = -np.stack([np.linalg.solve(ker.Lambda[k], ker.Phi[k].T) for k in range(grid.K + 1)])
    Fbar = -np.stack([np.linalg.solve(ker.LambdaBar[k], ker.PhiBar[k].T)
                      for k in range(grid.K + 1)])

    def field(s, M):
        k = grid.index_of(s)
        eta, etaBar = M[0], M[1]
        Psig = P[k] @ sg[k]
        d_eta = -((A1[k] + C1[k] @ F[k]).T @ eta
                  + (A2[k] + C2[k] @ F[k]).T @ Psig + P[k] @ b[k])
        d_etaBar = -((At1[k] + Ct1[k] @ Fbar[k]).T @ etaBar
                     + (At2[k] + Ct2[k] @ Fbar[k]).T @ Psig + Pi[k] @ b[k])
        return np.stack([d_eta, d_etaBar])

    traj = integrate_backward(field, np.zeros((2, n)), grid)
    eta = MatrixTrajectory(grid, traj.values[:, 0])
    etaBar = MatrixTrajectory(grid, traj.values[:, 1])

    Psig = np.einsum("kij,kj->ki", P, sg)
    phi = np.einsum("kiv,ki->kv", C1, eta.values) + np.einsum("kiv,ki->kv", C2, Psig)
    phiBar = np.einsum("kiv,ki->kv", Ct1, etaBar.values) + np.einsum("kiv,ki->kv", Ct2, Psig)
    # Offset of the worst-case disturbance. The deviation-channel offset is the
    # centered part of -Lambda^{-1} phi, which is identically zero for
    # deterministic affine terms, so only the mean-channel offset survives.
    f = -np.stack([np.linalg.solve(ker.LambdaBar[k], phiBar[k]) for k in range(grid.K + 1)])

    sol.eta, sol.etaBar = eta, etaBar
    sol.F, sol.Fbar, sol.f = F, Fbar, f
    ker.phi, ker.phiBar = phi, phiBar
    return eta, etaBar


def brl_worst_disturbance(sol: BRLSolution, x, m, s: float) -> np.ndarray:
    """Worst-case disturbance value F(s)(x-m) + Fbar(s)m + f(s)."""
    if sol.F is None:
        raise ValueError("affine corrections not computed; call brl_affine_solve first")
    grid = sol.P.grid
    k = grid.index_of(s)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m = np.atleast_1d(np.asarray(m, dtype=float))
    return sol.F[k] @ (x - m) + sol.Fbar[k] @ m + sol.f[k]


def brl_optimal_cost(sol: BRLSolution, law: InitialLaw) -> float:
    """Attained value of the disturbance-suppression cost for the given
    initial law: quadratic forms at the initial time plus the affine time
    integral (trapezoid on the grid)."""
    if sol.eta is None:
        raise ValueError("affine corrections not computed; call brl_affine_solve first")
    sys = sol.sys
    grid = sys.grid
    mu = law.mean
    cov = law.cov
    P0, Pi0 = sol.P.values[0], sol.Pi.values[0]
    value = float(np.trace(P0 @ cov)) + float((Pi0 @ mu + 2.0 * sol.etaBar.values[0]) @ mu)

    sg, b = sys.sigma.values, sys.b.values
    P = sol.P.values
    ker = sol.kernels
    Psig = np.einsum("kij,kj->ki", P, sg)
    lam_phi = np.stack([np.linalg.solve(ker.Lambda[k], ker.phi[k]) for k in range(grid.K + 1)])
    lamb_phib = np.stack([np.linalg.solve(ker.LambdaBar[k], ker.phiBar[k])
                          for k in range(grid.K + 1)])
    integrand = (np.einsum("ki,ki->k", Psig, sg)
                 + 2.0 * np.einsum("ki,ki->k", sol.etaBar.values, b)
                 - np.einsum("kv,kv->k", ker.phi, lam_phi)
                 - np.einsum("kv,kv->k", ker.phiBar, lamb_phib))
    value += float(trapezoid_weights(grid) @ integrand)
    return value


def brl_solve(sys: MFSystem, gamma: float, weights=None, delta_margin: float = 1e-8,
              steps: int | None = None):
    """Convenience driver: Riccati pair plus affine corrections and gains."""
    result = brl_cdre_solve(sys, gamma, weights=weights, delta_margin=delta_margin, steps=steps)
    if result.feasible:
        brl_affine_solve(result.sys, result)
    return result


GAMMA_CAP = 2.0 ** 20


def hinf_norm(sys: MFSystem, tol: float = 1e-4, delta_margin: float = 1e-8,
              steps: int | None = None) -> float:
    """Disturbance-to-output operator norm by bisection on the feasibility
    predicate of the bounded-real pair.

    The returned level is infeasible at gamma* - tol and feasible at
    gamma* + tol. Monotonicity of feasibility over all probes is asserted.
    """
    probes: list[tuple[float, bool]] = []

    def feasible(g: float) -> bool:
        ok = brl_cdre_solve(sys, g, delta_margin=delta_margin, steps=steps).feasible
        probes.append((g, ok))
        return ok

    lo, hi = 0.0, 1.0
    while not feasible(hi):
        lo = hi
        hi *= 2.0
        if hi > GAMMA_CAP:
            raise NoUpperBoundError(f"no feasible attenuation level below {GAMMA_CAP}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    bad = [g for g, ok in probes if not ok]
    good = [g for g, ok in probes if ok]
    if bad and good and max(bad) >= min(good):
        raise AssertionError("feasibility predicate is not monotone in gamma")
    return 0.5 * (lo + hi)
