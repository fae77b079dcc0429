"""Open-loop Nash machinery: augmented two-copy system, the stacked Riccati
pair, affine corrections, the closed-loop representation of the open-loop
strategy, and stationarity-residual verification.

The two adjoint copies are stacked H2-copy-on-top: the value stacks are
2n x n with block rows (P2; P1) and (Pi2; Pi1). Solvability here is a
sufficient-conditions certificate tied to the given initial law; it is not a
necessary condition for open-loop solvability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import InitialLaw, MFSystem
from .numerics import (
    MatrixTrajectory,
    NonFiniteError,
    integrate_backward,
    trapezoid_weights,
)

COND_LIMIT = 1e12


class SingularSigmaError(RuntimeError):
    """The stationarity weighting block is singular beyond the conditioning
    threshold at some time."""

    def __init__(self, time: float):
        self.time = float(time)
        super().__init__(f"stationarity block singular at s={time:.6g}")


@dataclass
class OpenLoopInfeasible:
    gamma: float
    reason: str  # "blowup" or "singular"
    time: float
    feasible: bool = False


@dataclass
class AugmentedSystem:
    """Stacked input maps of the two-copy formulation."""

    sys: MFSystem
    gamma: float
    m: int                    # n_u + n_v
    B: np.ndarray             # (K+1, n, m) = [B1 C1]
    Bbar: np.ndarray
    D: np.ndarray             # (K+1, n, m) = [B2 C2]
    Dbar: np.ndarray
    R: np.ndarray             # (m, m) = diag(I, gamma^2 I)
    J: np.ndarray             # (2m, m) selector

    @property
    def Btil(self):
        return self.B + self.Bbar

    @property
    def Dtil(self):
        return self.D + self.Dbar


def build_augmented(sys: MFSystem, gamma: float) -> AugmentedSystem:
    """Concatenate control and disturbance channels into one input of width
    m = n_u + n_v and build the weight and selector blocks."""
    n_u, n_v = sys.n_u, sys.n_v
    m = n_u + n_v
    B = np.concatenate([sys.B1.values, sys.C1.values], axis=2)
    Bbar = np.concatenate([sys.B1bar.values, sys.C1bar.values], axis=2)
    D = np.concatenate([sys.B2.values, sys.C2.values], axis=2)
    Dbar = np.concatenate([sys.B2bar.values, sys.C2bar.values], axis=2)
    R = np.zeros((m, m))
    R[:n_u, :n_u] = np.eye(n_u)
    R[n_u:, n_u:] = gamma * gamma * np.eye(n_v)
    J = np.zeros((2 * m, m))
    J[:n_u, :n_u] = np.eye(n_u)        # control condition reads the H2 copy
    J[m + n_u:, n_u:] = np.eye(n_v)    # disturbance condition reads the other copy
    return AugmentedSystem(sys=sys, gamma=gamma, m=m, B=B, Bbar=Bbar, D=D, Dbar=Dbar,
                           R=R, J=J)


def _j_select(aug: AugmentedSystem, top: np.ndarray, bottom: np.ndarray) -> np.ndarray:
    """J^T applied to the (top; bottom) two-copy stack: control rows from the
    top copy, disturbance rows from the bottom copy."""
    n_u = aug.sys.n_u
    return np.concatenate([top[:n_u], bottom[n_u:]], axis=0)


def _sigma_blocks(aug: AugmentedSystem, P2, P1, D):
    DtP2D = D.T @ P2 @ D
    DtP1D = D.T @ P1 @ D
    return aug.R + _j_select(aug, DtP2D, DtP1D)


@dataclass
class OpenLoopCdre:
    aug: AugmentedSystem
    P2: MatrixTrajectory
    P1: MatrixTrajectory
    Pi2: MatrixTrajectory
    Pi1: MatrixTrajectory
    Sigma: np.ndarray        # (K+1, m, m)
    SigmaBar: np.ndarray
    cond_Sigma: np.ndarray   # (K+1,)
    cond_SigmaBar: np.ndarray
    feasible: bool = True

    def pbold(self, k: int) -> np.ndarray:
        return np.concatenate([self.P2.values[k], self.P1.values[k]], axis=0)

    def pibold(self, k: int) -> np.ndarray:
        return np.concatenate([self.Pi2.values[k], self.Pi1.values[k]], axis=0)


def _cdre_rhs(aug: AugmentedSystem, k: int, P2, P1, Pi2, Pi1, check_time: float):
    sys = aug.sys
    til = sys.tilde()
    A1, A2 = sys.A1.values[k], sys.A2.values[k]
    At1, At2 = til.A1.values[k], til.A2.values[k]
    B, D = aug.B[k], aug.D[k]
    Bt, Dt = aug.Btil[k], aug.Dtil[k]
    Qg = sys.Q.values[k].T @ sys.Q.values[k]

    Sig = _sigma_blocks(aug, P2, P1, D)
    SigBar = _sigma_blocks(aug, P2, P1, Dt)
    if np.linalg.cond(Sig) > COND_LIMIT or np.linalg.cond(SigBar) > COND_LIMIT:
        raise SingularSigmaError(check_time)

    def riccati_pair(Pa, Pb, Pia, Pib, A1x, A2x, Bx, Dx, Sx, sign_top):
        # one stacked equation: rows (value for H2 copy; value for the other)
        G_top = Pa @ Bx + A2x.T @ Pa @ Dx
        G_bot = Pb @ Bx + A2x.T @ Pb @ Dx
        H = _j_select(aug, Bx.T @ Pa + Dx.T @ Pa @ A2x, Bx.T @ Pb + Dx.T @ Pb @ A2x)
        SH = np.linalg.solve(Sx, H)
        d_top = -(Pa @ A1x + A1x.T @ Pa + A2x.T @ Pa @ A2x + sign_top * Qg - G_top @ SH)
        d_bot = -(Pb @ A1x + A1x.T @ Pb + A2x.T @ Pb @ A2x - sign_top * Qg - G_bot @ SH)
        return d_top, d_bot

    dP2, dP1 = riccati_pair(P2, P1, None, None, A1, A2, B, D, Sig, +1.0)

    # mean equation: quadratic terms carry the deviation stack P
    G_top = Pi2 @ Bt + At2.T @ P2 @ Dt
    G_bot = Pi1 @ Bt + At2.T @ P1 @ Dt
    H = _j_select(aug, Bt.T @ Pi2 + Dt.T @ P2 @ At2, Bt.T @ Pi1 + Dt.T @ P1 @ At2)
    SH = np.linalg.solve(SigBar, H)
    dPi2 = -(Pi2 @ At1 + At1.T @ Pi2 + At2.T @ P2 @ At2 + Qg - G_top @ SH)
    dPi1 = -(Pi1 @ At1 + At1.T @ Pi1 + At2.T @ P1 @ At2 - Qg - G_bot @ SH)
    return dP2, dP1, dPi2, dPi1


def openloop_cdre_solve(aug: AugmentedSystem, steps: int | None = None):
    """Integrate the stacked Riccati pair backward from zero terminals,
    inverting the stationarity blocks at every stage."""
    sys = aug.sys if steps is None or steps == aug.sys.grid.K else aug.sys.resampled(steps)
    if sys is not aug.sys:
        aug = build_augmented(sys, aug.gamma)
    grid = sys.grid
    n = sys.n

    def field(s, M):
        k = grid.index_of(s)
        dP2, dP1, dPi2, dPi1 = _cdre_rhs(aug, k, M[0], M[1], M[2], M[3], s)
        return np.stack([dP2, dP1, dPi2, dPi1])

    try:
        with np.errstate(over="ignore", invalid="ignore"):
            sol = integrate_backward(field, np.zeros((4, n, n)), grid, symmetric=True)
    except SingularSigmaError as exc:
        return OpenLoopInfeasible(gamma=aug.gamma, reason="singular", time=exc.time)
    except NonFiniteError as exc:
        return OpenLoopInfeasible(gamma=aug.gamma, reason="blowup", time=exc.time)

    P2 = MatrixTrajectory(grid, sol.values[:, 0])
    P1 = MatrixTrajectory(grid, sol.values[:, 1])
    Pi2 = MatrixTrajectory(grid, sol.values[:, 2])
    Pi1 = MatrixTrajectory(grid, sol.values[:, 3])
    Kn = grid.K + 1
    Sigma = np.empty((Kn, aug.m, aug.m))
    SigmaBar = np.empty((Kn, aug.m, aug.m))
    cS = np.empty(Kn)
    cSB = np.empty(Kn)
    for k in range(Kn):
        Sigma[k] = _sigma_blocks(aug, P2.values[k], P1.values[k], aug.D[k])
        SigmaBar[k] = _sigma_blocks(aug, P2.values[k], P1.values[k], aug.Dtil[k])
        cS[k] = np.linalg.cond(Sigma[k])
        cSB[k] = np.linalg.cond(SigmaBar[k])
    if max(cS.max(), cSB.max()) > COND_LIMIT:
        k_bad = int(np.argmax(np.maximum(cS, cSB)))
        return OpenLoopInfeasible(gamma=aug.gamma, reason="singular",
                                  time=float(grid.nodes[k_bad]))
    return OpenLoopCdre(aug=aug, P2=P2, P1=P1, Pi2=Pi2, Pi1=Pi1,
                        Sigma=Sigma, SigmaBar=SigmaBar, cond_Sigma=cS, cond_SigmaBar=cSB)


def openloop_affine_solve(cdre: OpenLoopCdre):
    """Backward affine corrections of the two-copy stack (deterministic
    drift/diffusion offsets); returns (eta, etaBar) as (K+1, 2, n) stacks."""
    aug = cdre.aug
    sys = aug.sys
    til = sys.tilde()
    grid = sys.grid
    n = sys.n
    A1, A2 = sys.A1.values, sys.A2.values
    At1, At2 = til.A1.values, til.A2.values
    b, sg = sys.b.values, sys.sigma.values
    P2, P1 = cdre.P2.values, cdre.P1.values
    Pi2, Pi1 = cdre.Pi2.values, cdre.Pi1.values

    def field(s, M):
        k = grid.index_of(s)
        eta2, eta1, etaB2, etaB1 = M[0], M[1], M[2], M[3]
        B, D = aug.B[k], aug.D[k]
        Bt, Dt = aug.Btil[k], aug.Dtil[k]
        P2s, P1s = P2[k] @ sg[k], P1[k] @ sg[k]
        G_top = P2[k] @ B + A2[k].T @ P2[k] @ D
        G_bot = P1[k] @ B + A2[k].T @ P1[k] @ D
        rhs = _j_select(aug, B.T @ eta2 + D.T @ P2s, B.T @ eta1 + D.T @ P1s)
        z = np.linalg.solve(cdre.Sigma[k], rhs)
        d2 = -(A1[k].T @ eta2 - G_top @ z + A2[k].T @ P2s + P2[k] @ b[k])
        d1 = -(A1[k].T @ eta1 - G_bot @ z + A2[k].T @ P1s + P1[k] @ b[k])

        Gt_top = Pi2[k] @ Bt + At2[k].T @ P2[k] @ Dt
        Gt_bot = Pi1[k] @ Bt + At2[k].T @ P1[k] @ Dt
        rhs_b = _j_select(aug, Bt.T @ etaB2 + Dt.T @ P2s, Bt.T @ etaB1 + Dt.T @ P1s)
        zb = np.linalg.solve(cdre.SigmaBar[k], rhs_b)
        dB2 = -(At1[k].T @ etaB2 - Gt_top @ zb + At2[k].T @ P2s + Pi2[k] @ b[k])
        dB1 = -(At1[k].T @ etaB1 - Gt_bot @ zb + At2[k].T @ P1s + Pi1[k] @ b[k])
        return np.stack([d2, d1, dB2, dB1])

    traj = integrate_backward(field, np.zeros((4, n)), grid)
    eta = traj.values[:, :2]       # (K+1, 2, n): rows (eta2, eta1)
    etaBar = traj.values[:, 2:]
    return eta, etaBar


@dataclass
class OpenLoopSolution:
    """Closed-loop representation of the open-loop equilibrium strategy.

    The stacked input is w = (u; v); Kstar acts on the state deviation,
    Ktilde on the mean, chi is the offset. Solvability of the stacked pair is
    a sufficient-conditions certificate only (tied to the initial law), never
    a necessary one.
    """

    aug: AugmentedSystem
    cdre: OpenLoopCdre
    eta: np.ndarray           # (K+1, 2, n)
    etaBar: np.ndarray
    Kstar: np.ndarray         # (K+1, m, n)
    Ktilde: np.ndarray        # (K+1, m, n)
    chi: np.ndarray           # (K+1, m)
    feasible: bool = True

    @property
    def gamma(self):
        return self.aug.gamma

    def u_policy_parts(self):
        n_u = self.aug.sys.n_u
        return (self.Kstar[:, :n_u], self.Ktilde[:, :n_u] - self.Kstar[:, :n_u],
                self.chi[:, :n_u])

    def v_policy_parts(self):
        n_u = self.aug.sys.n_u
        return (self.Kstar[:, n_u:], self.Ktilde[:, n_u:] - self.Kstar[:, n_u:],
                self.chi[:, n_u:])


def openloop_gains(cdre: OpenLoopCdre, eta: np.ndarray, etaBar: np.ndarray):
    """Per-node gains of the closed-loop representation and the offset from
    the mean-channel corrections."""
    aug = cdre.aug
    sys = aug.sys
    til = sys.tilde()
    grid = sys.grid
    Kn = grid.K + 1
    A2, At2 = sys.A2.values, til.A2.values
    sg = sys.sigma.values
    P2, P1 = cdre.P2.values, cdre.P1.values
    Pi2, Pi1 = cdre.Pi2.values, cdre.Pi1.values
    Kstar = np.empty((Kn, aug.m, sys.n))
    Ktilde = np.empty((Kn, aug.m, sys.n))
    chi = np.empty((Kn, aug.m))
    for k in range(Kn):
        B, D = aug.B[k], aug.D[k]
        Bt, Dt = aug.Btil[k], aug.Dtil[k]
        H = _j_select(aug, B.T @ P2[k] + D.T @ P2[k] @ A2[k],
                      B.T @ P1[k] + D.T @ P1[k] @ A2[k])
        Kstar[k] = -np.linalg.solve(cdre.Sigma[k], H)
        Ht = _j_select(aug, Bt.T @ Pi2[k] + Dt.T @ P2[k] @ At2[k],
                       Bt.T @ Pi1[k] + Dt.T @ P1[k] @ At2[k])
        Ktilde[k] = -np.linalg.solve(cdre.SigmaBar[k], Ht)
        rhs = _j_select(aug, Bt.T @ etaBar[k, 0] + Dt.T @ (P2[k] @ sg[k]),
                        Bt.T @ etaBar[k, 1] + Dt.T @ (P1[k] @ sg[k]))
        chi[k] = -np.linalg.solve(cdre.SigmaBar[k], rhs)
    return Kstar, Ktilde, chi


def synth_open(sys: MFSystem, gamma: float, steps: int | None = None):
    """Full open-loop synthesis: augmented build, stacked Riccati pair,
    affine corrections, gains."""
    aug = build_augmented(sys, gamma)
    cdre = openloop_cdre_solve(aug, steps=steps)
    if not cdre.feasible:
        return cdre
    eta, etaBar = openloop_affine_solve(cdre)
    Kstar, Ktilde, chi = openloop_gains(cdre, eta, etaBar)
    return OpenLoopSolution(aug=cdre.aug, cdre=cdre, eta=eta, etaBar=etaBar,
                            Kstar=Kstar, Ktilde=Ktilde, chi=chi)


def stationarity_residual(sys: MFSystem, sol: OpenLoopSolution, law: InitialLaw,
                          n_paths: int = 10000, seed: int = 20240, steps: int | None = None,
                          workers: int = 1):
    """L2-in-time-and-paths norms of the two first-order stationarity
    conditions along simulated equilibrium paths.

    The adjoint pair is reconstructed from its closed-form representation in
    the value stacks; the conditions are evaluated with the continuous-time
    mean, so the residual measures the gap between the Euler ensemble and the
    continuous stationarity system and must shrink linearly with the step.
    """
    from . import mcsim

    if steps is not None and steps != sys.grid.K:
        sim_sys = sys.resampled(steps)
    else:
        sim_sys = sys
    grid = sim_sys.grid
    Kn = grid.K + 1
    nodes = grid.nodes
    n_u = sys.n_u

    def at_nodes(arr):
        src_grid = sol.aug.sys.grid
        traj = MatrixTrajectory(src_grid, arr)
        return np.stack([traj.value(s) for s in nodes])

    Kstar = at_nodes(sol.Kstar)
    Ktilde = at_nodes(sol.Ktilde)
    chi = at_nodes(sol.chi)
    P2 = at_nodes(sol.cdre.P2.values)
    P1 = at_nodes(sol.cdre.P1.values)
    Pi2 = at_nodes(sol.cdre.Pi2.values)
    Pi1 = at_nodes(sol.cdre.Pi1.values)
    etaB = at_nodes(sol.etaBar)

    pu = mcsim.AffinePolicy(Kstar[:, :n_u], Ktilde[:, :n_u] - Kstar[:, :n_u], chi[:, :n_u])
    pv = mcsim.AffinePolicy(Kstar[:, n_u:], Ktilde[:, n_u:] - Kstar[:, n_u:], chi[:, n_u:])

    # continuous-time mean for the adjoint reconstruction; the policy itself
    # rides on the Euler mean of the scheme, and the gap between the two is
    # what the residual measures
    m_ref = mcsim.propagate_mean(sim_sys, pu, pv, law)
    m_euler, _, _ = mcsim._euler_mean(sim_sys, pu, pv, law)

    til = sim_sys.tilde()
    A2 = sim_sys.A2.values
    At2 = til.A2.values
    sg = sim_sys.sigma.values
    B = np.concatenate([sim_sys.B1.values, sim_sys.C1.values], axis=2)
    Bb = np.concatenate([sim_sys.B1bar.values, sim_sys.C1bar.values], axis=2)
    D = np.concatenate([sim_sys.B2.values, sim_sys.C2.values], axis=2)
    Db = np.concatenate([sim_sys.B2bar.values, sim_sys.C2bar.values], axis=2)
    Bt, Dt = B + Bb, D + Db
    R = sol.aug.R

    # Y = P (x - m) + Pi m + etaBar ; Z = P[(A2 + D K*)(x - m) + (At2 + Dt Kt) m + Dt chi + sigma]
    res_forms = []
    for copy, Pdev, Pimean, etaBar_c in ((0, P2, Pi2, etaB[:, 0]), (1, P1, Pi1, etaB[:, 1])):
        Zmat = np.stack([Pdev[k] @ (A2[k] + D[k] @ Kstar[k]) for k in range(Kn)])
        zoff = np.stack([
            Pdev[k] @ ((At2[k] + Dt[k] @ Ktilde[k]) @ m_ref[k] + Dt[k] @ chi[k] + sg[k]
                       - (A2[k] + D[k] @ Kstar[k]) @ m_ref[k])
            for k in range(Kn)])
        yoff = np.stack([(Pimean[k] - Pdev[k]) @ m_ref[k] + etaBar_c[k] for k in range(Kn)])
        EY = np.stack([Pimean[k] @ m_ref[k] + etaBar_c[k] for k in range(Kn)])
        EZ = np.stack([Pdev[k] @ ((At2[k] + Dt[k] @ Ktilde[k]) @ m_ref[k]
                                  + Dt[k] @ chi[k] + sg[k]) for k in range(Kn)])
        rows = slice(0, n_u) if copy == 0 else slice(n_u, sol.aug.m)
        Wrow = R[rows, :]
        # residual = B^T Y + D^T Z + Bbar^T E[Y] + Dbar^T E[Z] + (R w)_rows
        Amat = np.stack([
            B[k].T[rows] @ Pdev[k] + D[k].T[rows] @ Zmat[k] + Wrow @ Kstar[k]
            for k in range(Kn)])
        aoff = np.stack([
            B[k].T[rows] @ yoff[k]
            + D[k].T[rows] @ zoff[k]
            + Bb[k].T[rows] @ EY[k]
            + Db[k].T[rows] @ EZ[k]
            + Wrow @ ((Ktilde[k] - Kstar[k]) @ m_euler[k] + chi[k])
            for k in range(Kn)])
        name = "res_u" if copy == 0 else "res_v"
        res_forms.append(mcsim.FormSpec(name, A=Amat, a=aoff))

    ens = mcsim.simulate(sim_sys, pu, pv, law, n_paths, seed, workers=workers,
                         extra_forms=tuple(res_forms))
    res_u = float(np.sqrt(max(ens.extras["res_u"].mean(), 0.0)))
    res_v = float(np.sqrt(max(ens.extras["res_v"].mean(), 0.0)))
    return res_v, res_u
