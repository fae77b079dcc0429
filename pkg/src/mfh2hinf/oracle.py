"""Independent ground-truth computations at desk scale.

Two oracles: the exact disturbance-to-output operator norm of the
Euler-discretized plant on a non-recombining binary scenario tree, and an
exact discrete-time dynamic-programming recursion for the quadratic
subproblems. Both are deliberately independent of the continuous-time
Riccati machinery they cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import InitialLaw, MFSystem
from .numerics import MatrixTrajectory

# Full dense SVD below this entry count; Gram accumulation above it.
_DENSE_SVD_BUDGET = 6_000_000


class TooLargeError(RuntimeError):
    """Desk-scale guard exceeded."""


def _sample(traj: MatrixTrajectory, s: float) -> np.ndarray:
    return np.asarray(traj.value(s))


@dataclass
class TreeModel:
    """Binary non-recombining scenario tree of the Euler-discretized plant.

    Disturbance coordinates are indexed by (depth k, node, component) for
    k = 0..N-1; outputs are sampled after each step at depths 1..N. Both
    coordinate systems carry the probability weight sqrt(2^-depth) and the
    quadrature weight sqrt(dt), so the largest singular value of the operator
    matrix is the exact discrete L2-to-L2 gain.
    """

    sys: MFSystem
    N: int
    output_spec: str = "q"            # "q" or "q_plus_gain"
    gains: tuple | None = None        # (U, Ubar) trajectories for "q_plus_gain"

    def __post_init__(self):
        if self.sys.n * 2 ** self.N > 1_000_000:
            raise TooLargeError(f"n*2^N = {self.sys.n * 2 ** self.N} exceeds the desk-scale guard")
        if self.output_spec not in ("q", "q_plus_gain"):
            raise ValueError(f"unknown output_spec {self.output_spec!r}")
        if self.output_spec == "q_plus_gain" and self.gains is None:
            raise ValueError("output_spec 'q_plus_gain' requires (U, Ubar) gains")

    @property
    def dt(self) -> float:
        g = self.sys.grid
        return (g.T - g.t0) / self.N

    @property
    def n_cols(self) -> int:
        return self.sys.n_v * (2 ** self.N - 1)

    def _coeffs(self, j: int) -> dict:
        s = self.sys.grid.t0 + j * self.dt
        sys = self.sys
        out = {name: _sample(getattr(sys, name), s)
               for name in ("A1", "A1bar", "A2", "A2bar", "C1", "C1bar", "C2", "C2bar", "Q")}
        if self.gains is not None:
            out["U"] = _sample(self.gains[0], s)
            out["Ubar"] = _sample(self.gains[1], s)
        return out

    def _z_dim(self) -> int:
        n_q = self.sys.n_q
        return n_q + (self.sys.n_u if self.output_spec == "q_plus_gain" else 0)

    def operator_row_blocks(self):
        """Yield (depth, row_block) pairs; block columns follow the global
        disturbance-coordinate order, zero-padded for not-yet-active columns."""
        sys = self.sys
        n, n_v = sys.n, sys.n_v
        dt = self.dt
        sq = np.sqrt(dt)
        R = np.zeros((1, 0, n))  # states per (node, column, state component)
        n_cols = self.n_cols
        for j in range(self.N):
            co = self._coeffs(j)
            nodes = 2 ** j
            live = R.shape[1]
            EX = R.mean(axis=0)
            drift = np.einsum("ab,mcb->mca", co["A1"], R) + np.einsum("ab,cb->ca", co["A1bar"], EX)
            diff = np.einsum("ab,mcb->mca", co["A2"], R) + np.einsum("ab,cb->ca", co["A2bar"], EX)
            # fresh impulse block: one column per (node, component) at this depth
            alpha = np.sqrt(2 ** j / dt)
            mean_dr = (alpha * 2.0 ** -j) * co["C1bar"].T      # (n_v, n)
            spec_dr = alpha * co["C1"].T
            mean_df = (alpha * 2.0 ** -j) * co["C2bar"].T
            spec_df = alpha * co["C2"].T
            blk_dr = np.tile(mean_dr[None, None], (nodes, nodes, 1, 1))
            blk_df = np.tile(mean_df[None, None], (nodes, nodes, 1, 1))
            idx = np.arange(nodes)
            blk_dr[idx, idx] += spec_dr
            blk_df[idx, idx] += spec_df
            blk_dr = blk_dr.reshape(nodes, nodes * n_v, n)
            blk_df = blk_df.reshape(nodes, nodes * n_v, n)

            new_live = live + nodes * n_v
            Rn = np.empty((2 * nodes, new_live, n))
            up = R + dt * drift
            dn = sq * diff
            Rn[0::2, :live] = up + dn
            Rn[1::2, :live] = up - dn
            Rn[0::2, live:] = dt * blk_dr + sq * blk_df
            Rn[1::2, live:] = dt * blk_dr - sq * blk_df
            R = Rn

            con = self._coeffs(j + 1)
            w = sq * np.sqrt(2.0 ** -(j + 1))
            Z = w * np.einsum("qa,mca->mcq", con["Q"], R)
            if self.output_spec == "q_plus_gain":
                EXn = R.mean(axis=0)
                Zu = w * (np.einsum("ua,mca->mcu", con["U"], R)
                          + np.einsum("ua,ca->cu", con["Ubar"], EXn)[None])
                Z = np.concatenate([Z, Zu], axis=2)
            block = np.zeros((2 ** (j + 1) * self._z_dim(), n_cols))
            block[:, :new_live] = np.moveaxis(Z, 2, 1).reshape(-1, new_live)
            yield j + 1, block

    def operator_matrix(self) -> np.ndarray:
        return np.concatenate([blk for _, blk in self.operator_row_blocks()], axis=0)

    def norm(self) -> float:
        n_rows = (2 ** (self.N + 1) - 2) * self._z_dim()
        if n_rows * self.n_cols <= _DENSE_SVD_BUDGET:
            O = self.operator_matrix()
            if min(O.shape) == 0:
                return 0.0
            return float(np.linalg.svd(O, compute_uv=False)[0])
        G = np.zeros((self.n_cols, self.n_cols))
        for _, blk in self.operator_row_blocks():
            G += blk.T @ blk
        return float(np.sqrt(max(np.linalg.eigvalsh(G)[-1], 0.0)))


def tree_operator_norm(sys: MFSystem, N: int, output_spec: str = "q",
                       gains: tuple | None = None) -> float:
    """Exact operator norm of the depth-N scenario-tree discretization."""
    return TreeModel(sys, N, output_spec=output_spec, gains=gains).norm()


# --- discrete-time dynamic programming oracle --------------------------------


def euler_deviation_riccati(A1s, Bs, A2s, Ds, Ws, R, dt: float) -> np.ndarray:
    """Exact DP recursion for the Euler-discretized deviation channel.

    One-step model x+ = x + dt(A1 x + B w) + sqrt(dt) eps (A2 x + D w) with
    stage cost dt(<W x, x> + <R w, w>); arrays carry one slice per step.
    Returns the value matrix at step 0 (terminal value zero).
    """
    N = len(A1s)
    n = A1s[0].shape[0]
    P = np.zeros((n, n))
    eye = np.eye(n)
    for j in range(N - 1, -1, -1):
        F = eye + dt * A1s[j]
        M = R + Ds[j].T @ P @ Ds[j] + dt * Bs[j].T @ P @ Bs[j]
        Sig = F.T @ P @ Bs[j] + A2s[j].T @ P @ Ds[j]
        P = dt * Ws[j] + F.T @ P @ F + dt * A2s[j].T @ P @ A2s[j] \
            - dt * Sig @ np.linalg.solve(M, Sig.T)
        P = 0.5 * (P + P.T)
    return P


@dataclass
class DiscreteDPResult:
    P: list          # deviation value matrices per step, length N+1
    Pi: list         # mean value matrices
    g: list          # mean linear terms
    c: list          # constants
    K_dev: list      # deviation feedback gains per step, length N
    K_mean: list     # mean feedback gains
    k_mean: list     # mean feedback offsets
    dt: float

    def cost(self, law: InitialLaw) -> float:
        mu, cov = law.mean, law.cov
        return float(np.trace(self.P[0] @ cov) + mu @ self.Pi[0] @ mu
                     + 2.0 * self.g[0] @ mu + self.c[0])


def _vpolicy_at(vpolicy, s, n, n_v):
    if vpolicy is None:
        return np.zeros((n_v, n)), np.zeros((n_v, n)), np.zeros(n_v)
    V, Vbar, V0 = vpolicy
    take = lambda t: np.asarray(t.value(s)) if isinstance(t, MatrixTrajectory) else np.asarray(t)
    return take(V), take(Vbar), take(V0)


def discrete_dp_lq(sys: MFSystem, vpolicy, N: int, law: InitialLaw | None = None):
    """Backward dynamic programming on the Euler-discretized mean-field plant
    under an affine disturbance feedback, split into deviation and mean parts.

    ``vpolicy`` is an (V, Vbar, V0) triple of trajectories/constants or None.
    Returns a DiscreteDPResult; its ``cost`` must converge to the continuous
    quadratic-cost formula as N grows.
    """
    g = sys.grid
    dt = (g.T - g.t0) / N
    n, n_u, n_v = sys.n, sys.n_u, sys.n_v
    til = sys.tilde()
    eye_n, eye_u = np.eye(n), np.eye(n_u)

    P = np.zeros((n, n))
    Pi = np.zeros((n, n))
    gv = np.zeros(n)
    c = 0.0
    Ps, Pis, gs, cs = [P], [Pi], [gv], [c]
    K_dev, K_mean, k_mean = [], [], []

    for j in range(N - 1, -1, -1):
        s = g.t0 + j * dt
        V, Vbar, V0 = _vpolicy_at(vpolicy, s, n, n_v)
        Vt = V + Vbar
        A1 = _sample(sys.A1, s); A2 = _sample(sys.A2, s)
        B1 = _sample(sys.B1, s); B2 = _sample(sys.B2, s)
        C1 = _sample(sys.C1, s); C2 = _sample(sys.C2, s)
        At1 = _sample(til.A1, s); At2 = _sample(til.A2, s)
        Bt1 = _sample(til.B1, s); Bt2 = _sample(til.B2, s)
        Ct1 = _sample(til.C1, s); Ct2 = _sample(til.C2, s)
        Qm = _sample(sys.Q, s)
        W = Qm.T @ Qm
        b = _sample(sys.b, s); sg = _sample(sys.sigma, s)

        Ad = A1 + C1 @ V
        Cd = A2 + C2 @ V
        Am = At1 + Ct1 @ Vt
        Cm = At2 + Ct2 @ Vt
        h1 = Ct1 @ V0 + b
        h2 = Ct2 @ V0 + sg

        # deviation channel
        F = eye_n + dt * Ad
        Md = eye_u + B2.T @ P @ B2 + dt * B1.T @ P @ B1
        Sd = F.T @ P @ B1 + Cd.T @ P @ B2
        Kd = -np.linalg.solve(Md, Sd.T)
        Pn = dt * W + F.T @ P @ F + dt * Cd.T @ P @ Cd - dt * Sd @ np.linalg.solve(Md, Sd.T)
        Pn = 0.5 * (Pn + Pn.T)

        # mean channel
        Fm = eye_n + dt * Am
        Mm = eye_u + Bt2.T @ P @ Bt2 + dt * Bt1.T @ Pi @ Bt1
        Sm = Fm.T @ Pi @ Bt1 + Cm.T @ P @ Bt2
        psi = Bt1.T @ (gv + dt * Pi @ h1) + Bt2.T @ P @ h2
        Km = -np.linalg.solve(Mm, Sm.T)
        km = -np.linalg.solve(Mm, psi)
        Pin = dt * W + Fm.T @ Pi @ Fm + dt * Cm.T @ P @ Cm - dt * Sm @ np.linalg.solve(Mm, Sm.T)
        Pin = 0.5 * (Pin + Pin.T)
        gn = Fm.T @ (gv + dt * Pi @ h1) + dt * Cm.T @ P @ h2 - dt * Sm @ np.linalg.solve(Mm, psi)
        cn = c + dt * h2 @ P @ h2 + 2.0 * dt * gv @ h1 + dt * dt * h1 @ Pi @ h1 \
            - dt * psi @ np.linalg.solve(Mm, psi)

        P, Pi, gv, c = Pn, Pin, gn, cn
        Ps.append(P); Pis.append(Pi); gs.append(gv); cs.append(c)
        K_dev.append(Kd); K_mean.append(Km); k_mean.append(km)

    Ps.reverse(); Pis.reverse(); gs.reverse(); cs.reverse()
    K_dev.reverse(); K_mean.reverse(); k_mean.reverse()
    result = DiscreteDPResult(P=Ps, Pi=Pis, g=gs, c=cs,
                              K_dev=K_dev, K_mean=K_mean, k_mean=k_mean, dt=dt)
    if law is not None:
        return result, result.cost(law)
    return result


def tree_exhaustive_lq(sys: MFSystem, vpolicy, N: int, x0) -> float:
    """Exact minimum of the quadratic cost over all tree-adapted controls.

    The state is affine in the stacked control coordinates and the cost is a
    convex quadratic, so the normal equations give the exact minimizer. Must
    agree with discrete_dp_lq on the same tree.
    """
    n, n_u, n_v = sys.n, sys.n_u, sys.n_v
    D = n_u * (2 ** N - 1)
    if D > 2000:
        raise TooLargeError(f"n_u*(2^N-1) = {D} exceeds the exhaustive-oracle guard")
    g = sys.grid
    dt = (g.T - g.t0) / N
    sq = np.sqrt(dt)
    til = sys.tilde()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    S = np.zeros((1, n, D))
    s0 = np.tile(x0, (1, 1))
    H = np.zeros((D, D))
    lin = np.zeros(D)
    const = 0.0
    offset = 0

    for j in range(N):
        s = g.t0 + j * dt
        V, Vbar, V0 = _vpolicy_at(vpolicy, s, n, n_v)
        A1 = _sample(sys.A1, s); A1b = _sample(sys.A1bar, s)
        A2 = _sample(sys.A2, s); A2b = _sample(sys.A2bar, s)
        B1 = _sample(sys.B1, s); B1b = _sample(sys.B1bar, s)
        B2 = _sample(sys.B2, s); B2b = _sample(sys.B2bar, s)
        C1 = _sample(sys.C1, s); C1b = _sample(sys.C1bar, s)
        C2 = _sample(sys.C2, s); C2b = _sample(sys.C2bar, s)
        Qm = _sample(sys.Q, s)
        b = _sample(sys.b, s); sg = _sample(sys.sigma, s)
        nodes = 2 ** j
        p = 2.0 ** -j

        # stage cost at the pre-step states plus this level's control energy
        QS = np.einsum("qa,maD->mqD", Qm, S)
        Qs0 = np.einsum("qa,ma->mq", Qm, s0)
        H += dt * p * np.einsum("mqD,mqE->DE", QS, QS)
        lin += dt * p * np.einsum("mqD,mq->D", QS, Qs0)
        const += dt * p * float(np.einsum("mq,mq->", Qs0, Qs0))
        for m in range(nodes):
            sl = slice(offset + m * n_u, offset + (m + 1) * n_u)
            H[sl, sl] += dt * p * np.eye(n_u)

        # controls of this level as affine maps of the coordinate vector
        Su = np.zeros((nodes, n_u, D))
        for m in range(nodes):
            Su[m, :, offset + m * n_u:offset + (m + 1) * n_u] = np.eye(n_u)
        SuM = Su.mean(axis=0)
        SM, s0M = S.mean(axis=0), s0.mean(axis=0)
        Sv = np.einsum("va,maD->mvD", V, S) + np.einsum("va,aD->vD", Vbar, SM)[None]
        sv0 = np.einsum("va,ma->mv", V, s0) + (Vbar @ s0M + V0)[None]
        SvM, sv0M = Sv.mean(axis=0), sv0.mean(axis=0)

        drift_S = (np.einsum("ab,mbD->maD", A1, S) + np.einsum("ab,bD->aD", A1b, SM)[None]
                   + np.einsum("ab,mbD->maD", B1, Su) + np.einsum("ab,bD->aD", B1b, SuM)[None]
                   + np.einsum("ab,mbD->maD", C1, Sv) + np.einsum("ab,bD->aD", C1b, SvM)[None])
        drift_0 = (np.einsum("ab,mb->ma", A1, s0) + (A1b @ s0M)[None]
                   + np.einsum("ab,mb->ma", C1, sv0) + (C1b @ sv0M)[None] + b[None])
        diff_S = (np.einsum("ab,mbD->maD", A2, S) + np.einsum("ab,bD->aD", A2b, SM)[None]
                  + np.einsum("ab,mbD->maD", B2, Su) + np.einsum("ab,bD->aD", B2b, SuM)[None]
                  + np.einsum("ab,mbD->maD", C2, Sv) + np.einsum("ab,bD->aD", C2b, SvM)[None])
        diff_0 = (np.einsum("ab,mb->ma", A2, s0) + (A2b @ s0M)[None]
                  + np.einsum("ab,mb->ma", C2, sv0) + (C2b @ sv0M)[None] + sg[None])

        Sn = np.empty((2 * nodes, n, D))
        sn = np.empty((2 * nodes, n))
        Sn[0::2] = S + dt * drift_S + sq * diff_S
        Sn[1::2] = S + dt * drift_S - sq * diff_S
        sn[0::2] = s0 + dt * drift_0 + sq * diff_0
        sn[1::2] = s0 + dt * drift_0 - sq * diff_0
        S, s0 = Sn, sn
        offset += nodes * n_u

    Hs = 0.5 * (H + H.T)
    ustar = -np.linalg.solve(Hs, lin)
    return float(const + 2.0 * lin @ ustar + ustar @ Hs @ ustar)
