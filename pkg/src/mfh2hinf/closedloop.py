"""Closed-loop Nash synthesis: four cross-coupled Riccati equations with
per-instant algebraically coupled gains, the affine offset system, equilibrium
cost evaluation, and certification of the closed-loop gain bound.

The gain coupling is linear at every time instant and is resolved exactly by
block elimination at each integrator stage; no outer fixed-point loop over the
horizon is used (a damped iteration exists only as a test oracle).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .brl import brl_cdre_solve
from .model import InitialLaw, MFSystem
from .numerics import (
    MatrixTrajectory,
    NonFiniteError,
    integrate_backward,
    min_eigenvalue,
    solve_linear_block2,
    trapezoid_weights,
)


class SingularCouplingError(RuntimeError):
    """The joint linear gain map is singular at some time."""

    def __init__(self, time: float):
        self.time = float(time)
        super().__init__(f"gain coupling singular at s={time:.6g}")


class _PositivityViolation(Exception):
    def __init__(self, time: float, which: str):
        self.time = time
        self.which = which


@dataclass
class ClosedLoopInfeasible:
    gamma: float
    reason: str   # "positivity", "blowup", "singular"
    time: float
    which: str = ""
    feasible: bool = False


@dataclass
class GainKernels:
    Lambda: np.ndarray      # (K+1, n_v, n_v)
    LambdaBar: np.ndarray
    Theta: np.ndarray       # (K+1, n_u, n_u)
    ThetaBar: np.ndarray


def gain_coupling_solve(P1, P2, Pi1, Pi2, coeffs, gamma, delta1=0.0, delta2=0.0,
                        time=0.0):
    """Resolve the per-instant gain coupling from the four value matrices.

    ``coeffs`` carries (A2, B1, B2, C1, C2) and the tilde versions
    (At2, Bt1, Bt2, Ct1, Ct2) at the instant. Returns (U, Ubar, V, Vbar)
    plus the tilde gains; raises on positivity or singularity failure.
    """
    (A2, B1, B2, C1, C2, At2, Bt1, Bt2, Ct1, Ct2) = coeffs
    n_u = B1.shape[1]
    n_v = C1.shape[1]
    g2 = gamma * gamma

    Theta = np.eye(n_u) + B2.T @ P2 @ B2
    Lam = g2 * np.eye(n_v) + C2.T @ P1 @ C2
    ThetaBar = np.eye(n_u) + Bt2.T @ P2 @ Bt2
    LamBar = g2 * np.eye(n_v) + Ct2.T @ P1 @ Ct2
    if min_eigenvalue(Lam) < delta1 or min_eigenvalue(LamBar) < delta1:
        raise _PositivityViolation(time, "Lambda")
    if min_eigenvalue(Theta) < delta2 or min_eigenvalue(ThetaBar) < delta2:
        raise _PositivityViolation(time, "Theta")

    from .numerics import SingularBlockError

    try:
        U, V = solve_linear_block2(
            Theta, B2.T @ P2 @ C2, C2.T @ P1 @ B2, Lam,
            -(B1.T @ P2 + B2.T @ P2 @ A2), -(C1.T @ P1 + C2.T @ P1 @ A2))
        Ut, Vt = solve_linear_block2(
            ThetaBar, Bt2.T @ P2 @ Ct2, Ct2.T @ P1 @ Bt2, LamBar,
            -(Bt1.T @ Pi2 + Bt2.T @ P2 @ At2), -(Ct1.T @ Pi1 + Ct2.T @ P1 @ At2))
    except SingularBlockError as exc:
        raise SingularCouplingError(time) from exc
    return U, Ut - U, V, Vt - V, Ut, Vt


@dataclass
class ClosedLoopCdre:
    gamma: float
    P1: MatrixTrajectory
    P2: MatrixTrajectory
    Pi1: MatrixTrajectory
    Pi2: MatrixTrajectory
    U: MatrixTrajectory
    Ubar: MatrixTrajectory
    V: MatrixTrajectory
    Vbar: MatrixTrajectory
    kernels: GainKernels
    delta1: float
    delta2: float
    feasible: bool = True


def _coeffs_at(sys: MFSystem, til, k: int):
    return (sys.A2.values[k], sys.B1.values[k], sys.B2.values[k],
            sys.C1.values[k], sys.C2.values[k],
            til.A2.values[k], til.B1.values[k], til.B2.values[k],
            til.C1.values[k], til.C2.values[k])


def closedloop_cdre_solve(sys: MFSystem, gamma: float, delta1: float = 1e-8,
                          delta2: float = 1e-8, steps: int | None = None):
    """Integrate the four cross-coupled Riccati equations backward from zero
    terminals, resolving the gain coupling at every integrator stage."""
    if steps is not None and steps != sys.grid.K:
        sys = sys.resampled(steps)
    grid = sys.grid
    n = sys.n
    til = sys.tilde()
    A1, A2 = sys.A1.values, sys.A2.values
    At1 = til.A1.values
    Qg = sys.q_gram()

    def field(s, M):
        k = grid.index_of(s)
        P1, P2, Pi1, Pi2 = M[0], M[1], M[2], M[3]
        co = _coeffs_at(sys, til, k)
        (A2k, B1, B2, C1, C2, At2, Bt1, Bt2, Ct1, Ct2) = co
        U, Ubar, V, Vbar, Ut, Vt = gain_coupling_solve(
            P1, P2, Pi1, Pi2, co, gamma, delta1, delta2, time=s)
        Ups = P1 @ C1 + (A2k + B2 @ U).T @ P1 @ C2
        UpsBar = Pi1 @ Ct1 + (At2 + Bt2 @ Ut).T @ P1 @ Ct2
        Sig = P2 @ B1 + (A2k + C2 @ V).T @ P2 @ B2
        SigBar = Pi2 @ Bt1 + (At2 + Ct2 @ Vt).T @ P2 @ Bt2

        Au = A1[k] + B1 @ U
        Du = A2k + B2 @ U
        dP1 = -(Au.T @ P1 + P1 @ Au + Du.T @ P1 @ Du - Qg[k] - U.T @ U + Ups @ V)
        Atu = At1[k] + Bt1 @ Ut
        Dtu = At2 + Bt2 @ Ut
        dPi1 = -(Atu.T @ Pi1 + Pi1 @ Atu + Dtu.T @ P1 @ Dtu - Qg[k] - Ut.T @ Ut
                 + UpsBar @ Vt)
        Av = A1[k] + C1 @ V
        Dv = A2k + C2 @ V
        dP2 = -(Av.T @ P2 + P2 @ Av + Dv.T @ P2 @ Dv + Qg[k] + Sig @ U)
        Atv = At1[k] + Ct1 @ Vt
        Dtv = At2 + Ct2 @ Vt
        dPi2 = -(Atv.T @ Pi2 + Pi2 @ Atv + Dtv.T @ P2 @ Dtv + Qg[k] + SigBar @ Ut)
        return np.stack([dP1, dP2, dPi1, dPi2])

    try:
        with np.errstate(over="ignore", invalid="ignore"):
            sol = integrate_backward(field, np.zeros((4, n, n)), grid, symmetric=True)
    except _PositivityViolation as exc:
        return ClosedLoopInfeasible(gamma=gamma, reason="positivity", time=exc.time,
                                    which=exc.which)
    except SingularCouplingError as exc:
        return ClosedLoopInfeasible(gamma=gamma, reason="singular", time=exc.time)
    except NonFiniteError as exc:
        return ClosedLoopInfeasible(gamma=gamma, reason="blowup", time=exc.time)

    P1 = MatrixTrajectory(grid, sol.values[:, 0])
    P2 = MatrixTrajectory(grid, sol.values[:, 1])
    Pi1 = MatrixTrajectory(grid, sol.values[:, 2])
    Pi2 = MatrixTrajectory(grid, sol.values[:, 3])
    Kn = grid.K + 1
    n_u, n_v = sys.n_u, sys.n_v
    U = np.empty((Kn, n_u, n))
    Ub = np.empty((Kn, n_u, n))
    V = np.empty((Kn, n_v, n))
    Vb = np.empty((Kn, n_v, n))
    Lam = np.empty((Kn, n_v, n_v))
    LamBar = np.empty((Kn, n_v, n_v))
    Theta = np.empty((Kn, n_u, n_u))
    ThetaBar = np.empty((Kn, n_u, n_u))
    g2 = gamma * gamma
    try:
        for k in range(Kn):
            co = _coeffs_at(sys, til, k)
            U[k], Ub[k], V[k], Vb[k], _, _ = gain_coupling_solve(
                P1.values[k], P2.values[k], Pi1.values[k], Pi2.values[k], co, gamma,
                delta1, delta2, time=float(grid.nodes[k]))
            (_, _, B2, _, C2, _, _, Bt2, _, Ct2) = co
            Lam[k] = g2 * np.eye(n_v) + C2.T @ P1.values[k] @ C2
            LamBar[k] = g2 * np.eye(n_v) + Ct2.T @ P1.values[k] @ Ct2
            Theta[k] = np.eye(n_u) + B2.T @ P2.values[k] @ B2
            ThetaBar[k] = np.eye(n_u) + Bt2.T @ P2.values[k] @ Bt2
    except _PositivityViolation as exc:
        return ClosedLoopInfeasible(gamma=gamma, reason="positivity", time=exc.time,
                                    which=exc.which)
    except SingularCouplingError as exc:
        return ClosedLoopInfeasible(gamma=gamma, reason="singular", time=exc.time)

    return ClosedLoopCdre(
        gamma=gamma, P1=P1, P2=P2, Pi1=Pi1, Pi2=Pi2,
        U=MatrixTrajectory(grid, U), Ubar=MatrixTrajectory(grid, Ub),
        V=MatrixTrajectory(grid, V), Vbar=MatrixTrajectory(grid, Vb),
        kernels=GainKernels(Lambda=Lam, LambdaBar=LamBar, Theta=Theta, ThetaBar=ThetaBar),
        delta1=delta1, delta2=delta2)


@dataclass
class AffineOffsets:
    U0: MatrixTrajectory      # (K+1, n_u)
    V0: MatrixTrajectory      # (K+1, n_v)
    eta1: MatrixTrajectory
    eta2: MatrixTrajectory
    etaBar1: MatrixTrajectory
    etaBar2: MatrixTrajectory


def _offset_coupling(sys: MFSystem, til, cdre: ClosedLoopCdre, k: int,
                     eta1, eta2, etaB1, etaB2, time=0.0):
    """Per-instant linear system for the feed-forward offsets (V0, U0)."""
    B1, C1 = sys.B1.values[k], sys.C1.values[k]
    Bt2, Ct2 = til.B2.values[k], til.C2.values[k]
    Bt1, Ct1 = til.B1.values[k], til.C1.values[k]
    sg = sys.sigma.values[k]
    P1, P2 = cdre.P1.values[k], cdre.P2.values[k]
    ker = cdre.kernels
    Lam, LamBar = ker.Lambda[k], ker.LambdaBar[k]
    Theta, ThetaBar = ker.Theta[k], ker.ThetaBar[k]
    from .numerics import SingularBlockError

    r_v = -(LamBar @ np.linalg.solve(Lam, C1.T @ eta1) + Ct2.T @ P1 @ sg + Ct1.T @ etaB1)
    r_u = -(ThetaBar @ np.linalg.solve(Theta, B1.T @ eta2) + Bt2.T @ P2 @ sg + Bt1.T @ etaB2)
    try:
        V0, U0 = solve_linear_block2(
            LamBar, Ct2.T @ P1 @ Bt2, Bt2.T @ P2 @ Ct2, ThetaBar, r_v, r_u)
    except SingularBlockError as exc:
        raise SingularCouplingError(time) from exc
    return V0, U0


def affine_coupling_solve(sys: MFSystem, cdre: ClosedLoopCdre) -> AffineOffsets:
    """Backward integration of the four affine correction equations with the
    per-instant (V0, U0) coupling resolved at every stage."""
    grid = cdre.P1.grid
    if grid.K != sys.grid.K:
        sys = sys.resampled(grid.K)
    til = sys.tilde()
    n = sys.n
    A1, A2 = sys.A1.values, sys.A2.values
    At1, At2 = til.A1.values, til.A2.values
    b, sg = sys.b.values, sys.sigma.values
    U, V = cdre.U.values, cdre.V.values
    Ut = cdre.U.values + cdre.Ubar.values
    Vt = cdre.V.values + cdre.Vbar.values

    def field(s, M):
        k = grid.index_of(s)
        eta1, eta2, etaB1, etaB2 = M[0], M[1], M[2], M[3]
        B1, B2, C1, C2 = (sys.B1.values[k], sys.B2.values[k],
                          sys.C1.values[k], sys.C2.values[k])
        Bt1, Bt2, Ct1, Ct2 = (til.B1.values[k], til.B2.values[k],
                              til.C1.values[k], til.C2.values[k])
        P1, P2 = cdre.P1.values[k], cdre.P2.values[k]
        Pi1, Pi2 = cdre.Pi1.values[k], cdre.Pi2.values[k]
        V0, U0 = _offset_coupling(sys, til, cdre, k, eta1, eta2, etaB1, etaB2, time=s)

        Ups = P1 @ C1 + (A2[k] + B2 @ U[k]).T @ P1 @ C2
        UpsBar = Pi1 @ Ct1 + (At2[k] + Bt2 @ Ut[k]).T @ P1 @ Ct2
        Sig = P2 @ B1 + (A2[k] + C2 @ V[k]).T @ P2 @ B2
        SigBar = Pi2 @ Bt1 + (At2[k] + Ct2 @ Vt[k]).T @ P2 @ Bt2
        ker = cdre.kernels

        d1 = -((A1[k] + B1 @ U[k]).T @ eta1
               - Ups @ np.linalg.solve(ker.Lambda[k], C1.T @ eta1))
        d2 = -((A1[k] + C1 @ V[k]).T @ eta2
               - Sig @ np.linalg.solve(ker.Theta[k], B1.T @ eta2))
        sig1 = P1 @ (Bt2 @ U0 + sg[k])
        dB1 = -((At1[k] + Bt1 @ Ut[k]).T @ etaB1
                - UpsBar @ np.linalg.solve(ker.LambdaBar[k], Ct1.T @ etaB1)
                + (At2[k] + Bt2 @ Ut[k]).T @ sig1
                - UpsBar @ np.linalg.solve(ker.LambdaBar[k], Ct2.T @ sig1)
                + Pi1 @ (b[k] + Bt1 @ U0))
        sig2 = P2 @ (Ct2 @ V0 + sg[k])
        dB2 = -((At1[k] + Ct1 @ Vt[k]).T @ etaB2
                - SigBar @ np.linalg.solve(ker.ThetaBar[k], Bt1.T @ etaB2)
                + (At2[k] + Ct2 @ Vt[k]).T @ sig2
                - SigBar @ np.linalg.solve(ker.ThetaBar[k], Bt2.T @ sig2)
                + Pi2 @ (b[k] + Ct1 @ V0))
        return np.stack([d1, d2, dB1, dB2])

    traj = integrate_backward(field, np.zeros((4, n)), grid)
    eta1 = traj.values[:, 0]
    eta2 = traj.values[:, 1]
    etaB1 = traj.values[:, 2]
    etaB2 = traj.values[:, 3]
    Kn = grid.K + 1
    U0 = np.empty((Kn, sys.n_u))
    V0 = np.empty((Kn, sys.n_v))
    for k in range(Kn):
        V0[k], U0[k] = _offset_coupling(sys, til, cdre, k, eta1[k], eta2[k],
                                        etaB1[k], etaB2[k], time=float(grid.nodes[k]))
    mk = lambda arr: MatrixTrajectory(grid, arr)
    return AffineOffsets(U0=mk(U0), V0=mk(V0), eta1=mk(eta1), eta2=mk(eta2),
                         etaBar1=mk(etaB1), etaBar2=mk(etaB2))


@dataclass
class ClosedLoopSolution:
    gamma: float
    P1: MatrixTrajectory
    P2: MatrixTrajectory
    Pi1: MatrixTrajectory
    Pi2: MatrixTrajectory
    U: MatrixTrajectory
    Ubar: MatrixTrajectory
    V: MatrixTrajectory
    Vbar: MatrixTrajectory
    U0: MatrixTrajectory
    V0: MatrixTrajectory
    eta1: MatrixTrajectory
    eta2: MatrixTrajectory
    etaBar1: MatrixTrajectory
    etaBar2: MatrixTrajectory
    kernels: GainKernels
    J1star: float | None = None
    J2star: float | None = None
    gainbound_ok: bool | None = None
    feasible: bool = True


def closed_loop_system(sys: MFSystem, U: MatrixTrajectory, Ubar: MatrixTrajectory) -> MFSystem:
    """Plant with the control feedback absorbed (disturbance input kept, zero
    affine terms, control channel removed); used for gain-bound certification."""
    grid = sys.grid
    Uv, Ubv = U.values, Ubar.values
    Utv = Uv + Ubv
    B1, B2 = sys.B1.values, sys.B2.values
    B1b, B2b = sys.B1bar.values, sys.B2bar.values
    A1 = sys.A1.values + np.matmul(B1, Uv)
    A1b = sys.A1bar.values + np.matmul(B1, Ubv) + np.matmul(B1b, Utv)
    A2 = sys.A2.values + np.matmul(B2, Uv)
    A2b = sys.A2bar.values + np.matmul(B2, Ubv) + np.matmul(B2b, Utv)
    zero_nu = MatrixTrajectory.constant(grid, np.zeros((sys.n, sys.n_u)))
    zero_vec = MatrixTrajectory.constant(grid, np.zeros(sys.n))
    return replace(
        sys,
        A1=MatrixTrajectory(grid, A1), A1bar=MatrixTrajectory(grid, A1b),
        A2=MatrixTrajectory(grid, A2), A2bar=MatrixTrajectory(grid, A2b),
        B1=zero_nu, B1bar=zero_nu, B2=zero_nu, B2bar=zero_nu,
        b=zero_vec, sigma=zero_vec,
    )


def certification_weights(sys: MFSystem, U: MatrixTrajectory, Ubar: MatrixTrajectory):
    """Gram state weights of the closed-loop output stack: the deviation rows
    weight Q^T Q + U^T U, the mean rows Q^T Q + (U + Ubar)^T (U + Ubar)."""
    Qg = sys.q_gram()
    Uv = U.values
    Utv = U.values + Ubar.values
    Wdev = Qg + np.einsum("kui,kuj->kij", Uv, Uv)
    Wmean = Qg + np.einsum("kui,kuj->kij", Utv, Utv)
    return Wdev, Wmean


def equilibrium_costs(sys: MFSystem, sol, law: InitialLaw):
    """Equilibrium values of the two cost functionals from the quadratic-form
    constants plus trapezoid affine integrals (deterministic reductions)."""
    grid = sol.P1.grid
    if grid.K != sys.grid.K:
        sys = sys.resampled(grid.K)
    til = sys.tilde()
    w = trapezoid_weights(grid)
    mu, cov = law.mean, law.cov
    sg, b = sys.sigma.values, sys.b.values
    Bt1, Bt2 = til.B1.values, til.B2.values
    Ct1, Ct2 = til.C1.values, til.C2.values
    U0, V0 = sol.U0.values, sol.V0.values
    P1, P2 = sol.P1.values, sol.P2.values
    ker = sol.kernels

    sig1 = sg + np.einsum("kij,kj->ki", Bt2, U0)
    b1 = b + np.einsum("kij,kj->ki", Bt1, U0)
    XiBar = (np.einsum("kiv,kij,kj->kv", Ct2, P1, sig1)
             + np.einsum("kiv,ki->kv", Ct1, sol.etaBar1.values))
    lam_xi = np.stack([np.linalg.solve(ker.LambdaBar[k], XiBar[k])
                       for k in range(grid.K + 1)])
    int1 = (np.einsum("kij,kj,ki->k", P1, sig1, sig1)
            + 2.0 * np.einsum("ki,ki->k", sol.etaBar1.values, b1)
            - np.einsum("kv,kv->k", XiBar, lam_xi))
    J1 = float(np.trace(P1[0] @ cov) + mu @ sol.Pi1.values[0] @ mu
               + 2.0 * sol.etaBar1.values[0] @ mu + w @ int1)

    sig2 = sg + np.einsum("kij,kj->ki", Ct2, V0)
    b2 = b + np.einsum("kij,kj->ki", Ct1, V0)
    PsiBar = (np.einsum("kiu,kij,kj->ku", Bt2, P2, sig2)
              + np.einsum("kiu,ki->ku", Bt1, sol.etaBar2.values))
    th_psi = np.stack([np.linalg.solve(ker.ThetaBar[k], PsiBar[k])
                       for k in range(grid.K + 1)])
    int2 = (np.einsum("kij,kj,ki->k", P2, sig2, sig2)
            + 2.0 * np.einsum("ki,ki->k", sol.etaBar2.values, b2)
            - np.einsum("ku,ku->k", PsiBar, th_psi))
    J2 = float(np.trace(P2[0] @ cov) + mu @ sol.Pi2.values[0] @ mu
               + 2.0 * sol.etaBar2.values[0] @ mu + w @ int2)
    return J1, J2


def synthesize(sys: MFSystem, gamma: float | None = None, law: InitialLaw | None = None,
               delta1: float = 1e-8, delta2: float = 1e-8, steps: int | None = None,
               certify: bool = True):
    """Full closed-loop synthesis: coupled Riccati solve, affine offsets,
    equilibrium costs, and the closed-loop gain-bound certificate."""
    gamma = sys.gamma if gamma is None else gamma
    cdre = closedloop_cdre_solve(sys, gamma, delta1=delta1, delta2=delta2, steps=steps)
    if not cdre.feasible:
        return cdre
    work_sys = sys if cdre.P1.grid.K == sys.grid.K else sys.resampled(cdre.P1.grid.K)
    offs = affine_coupling_solve(work_sys, cdre)
    sol = ClosedLoopSolution(
        gamma=gamma, P1=cdre.P1, P2=cdre.P2, Pi1=cdre.Pi1, Pi2=cdre.Pi2,
        U=cdre.U, Ubar=cdre.Ubar, V=cdre.V, Vbar=cdre.Vbar,
        U0=offs.U0, V0=offs.V0, eta1=offs.eta1, eta2=offs.eta2,
        etaBar1=offs.etaBar1, etaBar2=offs.etaBar2, kernels=cdre.kernels)
    if law is not None:
        sol.J1star, sol.J2star = equilibrium_costs(work_sys, sol, law)
    if certify:
        cl = closed_loop_system(work_sys, sol.U, sol.Ubar)
        weights = certification_weights(work_sys, sol.U, sol.Ubar)
        sol.gainbound_ok = brl_cdre_solve(cl, gamma, weights=weights,
                                          delta_margin=min(delta1, delta2)).feasible
    return sol


def gain_fixed_point(P1, P2, Pi1, Pi2, coeffs, gamma, iters=200, damping=0.5):
    """Damped fixed-point iteration for the gain coupling; test oracle for
    gain_coupling_solve."""
    (A2, B1, B2, C1, C2, At2, Bt1, Bt2, Ct1, Ct2) = coeffs
    n_u, n_v = B1.shape[1], C1.shape[1]
    n = A2.shape[0]
    g2 = gamma * gamma
    Theta = np.eye(n_u) + B2.T @ P2 @ B2
    Lam = g2 * np.eye(n_v) + C2.T @ P1 @ C2
    ThetaBar = np.eye(n_u) + Bt2.T @ P2 @ Bt2
    LamBar = g2 * np.eye(n_v) + Ct2.T @ P1 @ Ct2
    U = np.zeros((n_u, n))
    V = np.zeros((n_v, n))
    Ut = np.zeros((n_u, n))
    Vt = np.zeros((n_v, n))
    for _ in range(iters):
        Un = -np.linalg.solve(Theta, B1.T @ P2 + B2.T @ P2 @ (A2 + C2 @ V))
        Vn = -np.linalg.solve(Lam, C1.T @ P1 + C2.T @ P1 @ (A2 + B2 @ U))
        Utn = -np.linalg.solve(ThetaBar, Bt1.T @ Pi2 + Bt2.T @ P2 @ (At2 + Ct2 @ Vt))
        Vtn = -np.linalg.solve(LamBar, Ct1.T @ Pi1 + Ct2.T @ P1 @ (At2 + Bt2 @ Ut))
        U = damping * Un + (1 - damping) * U
        V = damping * Vn + (1 - damping) * V
        Ut = damping * Utn + (1 - damping) * Ut
        Vt = damping * Vtn + (1 - damping) * Vt
    return U, Ut - U, V, Vt - V, Ut, Vt