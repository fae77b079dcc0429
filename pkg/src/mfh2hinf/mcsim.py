"""Euler-Maruyama Monte Carlo engine for the mean-field plant.

Simulation uses the deterministic-mean scheme: the mean-field terms E[X],
E[u], E[v] are replaced by the exactly propagated deterministic mean of the
Euler recursion, which is exact for linear dynamics and removes particle
bias. Noise is drawn from counter-based per-path streams keyed by
(seed, path index), so results are byte-identical for a fixed seed no matter
how the paths are chunked or scheduled. A particle mode (mean = batch
average) exists only to regression-test the scheme.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .model import InitialLaw, MFSystem
from .numerics import MatrixTrajectory, TimeGrid, trapezoid_weights

DEFAULT_CHUNK = 8192


class UnsupportedPolicyError(RuntimeError):
    """The policy's mean action is unknown, so the mean dynamics do not close."""


# --- policies -----------------------------------------------------------------


class AffinePolicy:
    """action(s) = G(s) x + Gbar(s) m + g(s) with m the mean state."""

    def __init__(self, G, Gbar=None, g=None):
        self.G = np.asarray(G.values if isinstance(G, MatrixTrajectory) else G, dtype=float)
        d, n = self.G.shape[1], self.G.shape[2]
        self.dim = d
        if Gbar is None:
            self.Gbar = np.zeros_like(self.G)
        else:
            self.Gbar = np.asarray(Gbar.values if isinstance(Gbar, MatrixTrajectory) else Gbar,
                                   dtype=float)
        if g is None:
            self.g = np.zeros((self.G.shape[0], d))
        else:
            self.g = np.asarray(g.values if isinstance(g, MatrixTrajectory) else g, dtype=float)

    def gain_nodes(self):
        return self.G

    def offset_nodes(self, m):
        return np.einsum("kdn,kn->kd", self.Gbar, m) + self.g

    def mean_nodes(self, m):
        return np.einsum("kdn,kn->kd", self.G + self.Gbar, m) + self.g

    def mean_fn(self, k, m):
        return (self.G[k] + self.Gbar[k]) @ m + self.g[k]

    def path_values(self, lo, hi):
        return None


class OpenLoopPolicy:
    """Deterministic open-loop action trajectory (its own mean)."""

    def __init__(self, values):
        self.values = np.asarray(values.values if isinstance(values, MatrixTrajectory) else values,
                                 dtype=float)
        self.dim = self.values.shape[1]

    def gain_nodes(self):
        return None

    def offset_nodes(self, m):
        return self.values

    def mean_nodes(self, m):
        return self.values

    def mean_fn(self, k, m):
        return self.values[k]

    def path_values(self, lo, hi):
        return None


class ZeroPolicy(OpenLoopPolicy):
    def __init__(self, grid: TimeGrid, dim: int):
        super().__init__(np.zeros((grid.K + 1, dim)))


class PathPolicy:
    """Per-path open-loop actions with a caller-supplied deterministic mean.

    The mean must be the ensemble mean of the process (exact, not the sample
    average); without it the mean dynamics do not close.
    """

    def __init__(self, values, mean=None):
        self.values = np.asarray(values, dtype=float)  # (K+1, P, d)
        self.dim = self.values.shape[2]
        self.mean = None if mean is None else np.asarray(mean, dtype=float)

    def gain_nodes(self):
        return None

    def offset_nodes(self, m):
        return np.zeros((self.values.shape[0], self.dim))

    def mean_nodes(self, m):
        if self.mean is None:
            raise UnsupportedPolicyError("path policy carries no mean trajectory")
        return self.mean

    def mean_fn(self, k, m):
        if self.mean is None:
            raise UnsupportedPolicyError("path policy carries no mean trajectory")
        return self.mean[k]

    def path_values(self, lo, hi):
        return self.values[:, lo:hi]


# --- deterministic means --------------------------------------------------------


def _euler_mean(sys: MFSystem, policy_u, policy_v, law: InitialLaw):
    """Exact mean of the Euler recursion under the deterministic-mean scheme."""
    g = sys.grid
    til = sys.tilde()
    At1, Bt1, Ct1 = til.A1.values, til.B1.values, til.C1.values
    b = sys.b.values
    m = np.empty((g.K + 1, sys.n))
    Eu = np.empty((g.K + 1, sys.n_u))
    Ev = np.empty((g.K + 1, sys.n_v))
    m[0] = law.mean
    for k in range(g.K):
        Eu[k] = policy_u.mean_fn(k, m[k])
        Ev[k] = policy_v.mean_fn(k, m[k])
        m[k + 1] = m[k] + g.dt * (At1[k] @ m[k] + Bt1[k] @ Eu[k] + Ct1[k] @ Ev[k] + b[k])
    Eu[g.K] = policy_u.mean_fn(g.K, m[g.K])
    Ev[g.K] = policy_v.mean_fn(g.K, m[g.K])
    return m, Eu, Ev


def propagate_mean(sys: MFSystem, policy_u, policy_v, law: InitialLaw,
                   steps: int | None = None) -> np.ndarray:
    """Mean-state ODE solved by forward RK4 (continuous-time accurate)."""
    if steps is not None and steps != sys.grid.K:
        sys = sys.resampled(steps)
    g = sys.grid
    til = sys.tilde()
    At1, Bt1, Ct1 = til.A1.values, til.B1.values, til.C1.values
    b = sys.b.values

    from .numerics import integrate_forward

    def fieldfn(s, m):
        k = g.index_of(s)
        return (At1[k] @ m + Bt1[k] @ policy_u.mean_fn(k, m)
                + Ct1[k] @ policy_v.mean_fn(k, m) + b[k])

    return integrate_forward(fieldfn, np.asarray(law.mean, dtype=float), g).values


# --- form specifications ---------------------------------------------------------


@dataclass
class FormSpec:
    """Affine-in-state node values r = A x + a (+ per-path extra), reduced to
    per-path trapezoid integrals of |r|^2 (or <W r, r>)."""

    name: str
    A: np.ndarray | None = None       # (K+1, d, n)
    a: np.ndarray | None = None       # (K+1, d)
    W: np.ndarray | None = None       # (K+1, d, d)
    extra: np.ndarray | None = None   # (K+1, P_total, d)
    store: bool = False

    def is_zero(self) -> bool:
        return (self.A is None and self.extra is None and not self.store
                and (self.a is None or not self.a.any()))

    def evaluate(self, X, lo, hi):
        if self.A is not None:
            if self.A.shape[1] == 1 and self.A.shape[2] == 1:
                r = X * self.A[:, None, 0, :]
            else:
                r = np.matmul(X, self.A.swapaxes(1, 2))
            if self.a is not None:
                r += self.a[:, None, :]
        else:
            K1, P = X.shape[0], X.shape[1]
            d = self.a.shape[1] if self.a is not None else self.extra.shape[2]
            if self.extra is not None and (self.a is None or not self.a.any()):
                r = self.extra[:, lo:hi].copy()
                return r
            r = np.zeros((K1, P, d))
            if self.a is not None:
                r += self.a[:, None, :]
        if self.extra is not None:
            r += self.extra[:, lo:hi]
        return r

    def squared(self, r):
        if self.W is None:
            if r.shape[2] == 1:
                return np.square(r[:, :, 0])
            return np.square(r).sum(axis=2)
        return (np.matmul(r, self.W) * r).sum(axis=2)


# --- ensemble --------------------------------------------------------------------


@dataclass
class Ensemble:
    grid: TimeGrid
    n_paths: int
    seed: int
    gamma: float
    mean: np.ndarray                 # scheme mean (K+1, n)
    u_mean: np.ndarray               # (K+1, n_u)
    v_mean: np.ndarray               # (K+1, n_v)
    node_mean: np.ndarray            # empirical (K+1, n)
    node_var: np.ndarray             # (K+1, n)
    node_u_sq: np.ndarray            # node means of |u|^2, (K+1,)
    node_v_sq: np.ndarray
    node_qx_sq: np.ndarray
    int_u_sq: np.ndarray             # per-path integrals, (P,)
    int_v_sq: np.ndarray
    int_qx_sq: np.ndarray
    sup_x_sq: np.ndarray             # per-path sup over nodes of |x|^2
    extras: dict = field(default_factory=dict)    # name -> (P,) integrals
    stored: dict = field(default_factory=dict)    # name -> (K+1, P, d)
    paths: np.ndarray | None = None

    def j1_paths(self, gamma: float | None = None) -> np.ndarray:
        g = self.gamma if gamma is None else gamma
        return g * g * self.int_v_sq - self.int_qx_sq - self.int_u_sq

    def j2_paths(self) -> np.ndarray:
        return self.int_qx_sq + self.int_u_sq


def evaluate_cost(ensemble: Ensemble, kind: str, gamma: float | None = None):
    """Sample mean and standard error of the requested cost functional."""
    if kind.lower() == "j1":
        vals = ensemble.j1_paths(gamma)
    elif kind.lower() == "j2":
        vals = ensemble.j2_paths()
    else:
        raise ValueError(f"unknown cost kind {kind!r}")
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return est, se


class NoiseBank:
    """Initial states and noise increments from counter-based streams.

    Each fixed-size chunk of paths owns one Philox stream keyed by
    (seed, chunk index), so the increment at (path, step) is a pure function
    of (seed, path, step) and results do not depend on scheduling. With
    ``cache=True`` the arrays are kept for reuse across common-random-number
    runs (pairing baseline and perturbed simulations)."""

    def __init__(self, sys: MFSystem, law: InitialLaw, n_paths: int, seed: int,
                 cache: bool = False):
        self.K, self.n = sys.grid.K, sys.n
        self.n_paths, self.seed = n_paths, seed
        self.chunk = DEFAULT_CHUNK
        self.law = law
        self.cache = cache
        self._store: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def slices(self):
        for lo in range(0, self.n_paths, self.chunk):
            yield lo, min(lo + self.chunk, self.n_paths)

    def chunk_inputs(self, lo: int, hi: int):
        if lo in self._store:
            return self._store[lo]
        gen = np.random.Generator(np.random.Philox(
            key=np.array([self.seed % 2 ** 64, lo // self.chunk], dtype=np.uint64)))
        X0 = self.law.draw_batch(gen, hi - lo, lo)
        noise = gen.standard_normal((self.K, hi - lo))
        if self.cache:
            self._store[lo] = (X0, noise)
        return X0, noise


def _policy_dynamics(sys: MFSystem, policy_u, policy_v, m):
    """Fold affine-feedback policies and deterministic means into per-interval
    state matrices and offsets."""
    K = sys.grid.K
    A1, A2 = sys.A1.values, sys.A2.values
    A1b, A2b = sys.A1bar.values, sys.A2bar.values
    B1, B2, B1b, B2b = sys.B1.values, sys.B2.values, sys.B1bar.values, sys.B2bar.values
    C1, C2, C1b, C2b = sys.C1.values, sys.C2.values, sys.C1bar.values, sys.C2bar.values
    b, sg = sys.b.values, sys.sigma.values

    Gu, Gv = policy_u.gain_nodes(), policy_v.gain_nodes()
    F1 = A1.copy()
    F2 = A2.copy()
    if Gu is not None:
        F1 += np.einsum("kij,kjn->kin", B1, Gu)
        F2 += np.einsum("kij,kjn->kin", B2, Gu)
    if Gv is not None:
        F1 += np.einsum("kij,kjn->kin", C1, Gv)
        F2 += np.einsum("kij,kjn->kin", C2, Gv)

    m_arr, Eu, Ev = m
    uoff = policy_u.offset_nodes(m_arr)
    voff = policy_v.offset_nodes(m_arr)
    f1 = (np.einsum("kij,kj->ki", A1b, m_arr) + np.einsum("kij,kj->ki", B1, uoff)
          + np.einsum("kij,kj->ki", B1b, Eu) + np.einsum("kij,kj->ki", C1, voff)
          + np.einsum("kij,kj->ki", C1b, Ev) + b)
    f2 = (np.einsum("kij,kj->ki", A2b, m_arr) + np.einsum("kij,kj->ki", B2, uoff)
          + np.einsum("kij,kj->ki", B2b, Eu) + np.einsum("kij,kj->ki", C2, voff)
          + np.einsum("kij,kj->ki", C2b, Ev) + sg)
    return F1[:K], F2[:K], f1[:K], f2[:K], uoff, voff


def simulate(sys: MFSystem, policy_u, policy_v, law: InitialLaw, n_paths: int, seed: int,
             workers: int = 1, steps: int | None = None, extra_forms=(),
             store_paths: bool = False, store_controls=(), particle_mode: bool = False,
             bank: NoiseBank | None = None, light: bool = False) -> Ensemble:
    """Simulate the plant under the given policy pair.

    Paths are processed in fixed-size chunks; reductions run in fixed chunk
    order, so the result is byte-identical no matter the ``workers`` count.
    ``light=True`` skips the per-node statistics (cost integrals only), which
    is what the paired perturbation runs of verify_nash need.
    """
    if steps is not None and steps != sys.grid.K:
        sys = sys.resampled(steps)
    grid = sys.grid
    K, n = grid.K, sys.n
    if policy_u.dim != sys.n_u:
        raise UnsupportedPolicyError(f"u policy dimension {policy_u.dim} != n_u={sys.n_u}")
    if policy_v.dim != sys.n_v:
        raise UnsupportedPolicyError(f"v policy dimension {policy_v.dim} != n_v={sys.n_v}")
    if particle_mode:
        return _simulate_particle(sys, policy_u, policy_v, law, n_paths, seed,
                                  store_paths=store_paths)

    m = _euler_mean(sys, policy_u, policy_v, law)
    m_arr, Eu, Ev = m
    F1, F2, f1, f2, uoff, voff = _policy_dynamics(sys, policy_u, policy_v, m)

    Q = sys.Q.values
    forms = [
        FormSpec("u", A=policy_u.gain_nodes(), a=uoff, store="u" in store_controls),
        FormSpec("v", A=policy_v.gain_nodes(), a=voff, store="v" in store_controls),
        FormSpec("qx", A=Q),
    ]
    forms += list(extra_forms)
    u_paths = policy_u.path_values(0, n_paths)
    v_paths = policy_v.path_values(0, n_paths)
    forms[0].extra = u_paths
    forms[1].extra = v_paths

    if bank is None:
        bank = NoiseBank(sys, law, n_paths, seed)
    w = trapezoid_weights(grid)
    slices = list(bank.slices())
    extra_specs = forms[3:]
    need_X = bool(extra_specs) or any(spec.store for spec in forms) or store_paths
    Gu_arr = policy_u.gain_nodes()
    Gv_arr = policy_v.gain_nodes()
    if Gu_arr is None:
        Gu_arr = np.zeros((K + 1, sys.n_u, n))
    if Gv_arr is None:
        Gv_arr = np.zeros((K + 1, sys.n_v, n))
    dummy3 = np.zeros((1, 1, 1))
    use_fused = kernels.has_fused() and max(n, sys.n_u, sys.n_v, sys.n_q) <= 16

    def run_chunk(bounds):
        lo, hi = bounds
        P = hi - lo
        X0, noise = bank.chunk_inputs(lo, hi)
        up = u_paths[:, lo:hi] if u_paths is not None else None
        vp = v_paths[:, lo:hi] if v_paths is not None else None
        out = {}
        ints = {}
        sq_sums = {}
        stored = {}
        if use_fused:
            X = np.empty((K + 1, P, n)) if need_X else dummy3
            int_u, int_v, int_qx = np.zeros(P), np.zeros(P), np.zeros(P)
            ns, nss = np.zeros((K + 1, n)), np.zeros((K + 1, n))
            sup = np.zeros(P)
            nu, nv, nq = np.zeros(K + 1), np.zeros(K + 1), np.zeros(K + 1)
            kernels.fused_paths(
                F1, F2, f1, f2, up, vp,
                sys.B1.values[:K], sys.B2.values[:K], sys.C1.values[:K], sys.C2.values[:K],
                Gu_arr, uoff, Gv_arr, voff, Q,
                X0, noise, grid.dt, w,
                need_X, X, int_u, int_v, int_qx,
                not light, ns, nss, sup, nu, nv, nq,
            )
            ints.update(u=int_u, v=int_v, qx=int_qx)
            if not light:
                out.update(node_sum=ns, node_sumsq=nss, sup=sup)
                sq_sums.update(u=nu, v=nv, qx=nq)
            for spec in forms:
                run_extra = spec in extra_specs
                if not (spec.store or run_extra):
                    continue
                r = spec.evaluate(X, lo, hi)
                if run_extra:
                    val = spec.squared(r)
                    ints[spec.name] = w @ val
                    if not light:
                        sq_sums[spec.name] = val.sum(axis=1)
                if spec.store:
                    stored[spec.name] = r
        else:
            def fold(vals, M):
                if M.shape[1] == 1 and M.shape[2] == 1:
                    return vals * M[:, None, 0, :]
                return np.matmul(vals, M.swapaxes(1, 2))

            E1 = E2 = None
            if up is not None or vp is not None:
                E1 = np.zeros((K, P, n))
                E2 = np.zeros((K, P, n))
                if up is not None:
                    E1 += fold(up[:K], sys.B1.values[:K])
                    E2 += fold(up[:K], sys.B2.values[:K])
                if vp is not None:
                    E1 += fold(vp[:K], sys.C1.values[:K])
                    E2 += fold(vp[:K], sys.C2.values[:K])
            X = np.empty((K + 1, P, n))
            kernels.step_paths(F1, F2, f1, f2, E1, E2, X0, noise, grid.dt, X)
            if not light:
                Xsq = np.square(X)
                out["node_sum"] = X.sum(axis=1)
                out["node_sumsq"] = Xsq.sum(axis=1)
                out["sup"] = Xsq.sum(axis=2).max(axis=0)
            for spec in forms:
                if spec.is_zero():
                    ints[spec.name] = np.zeros(P)
                    if not light:
                        sq_sums[spec.name] = np.zeros(K + 1)
                    continue
                r = spec.evaluate(X, lo, hi)
                val = spec.squared(r)
                ints[spec.name] = w @ val
                if not light:
                    sq_sums[spec.name] = val.sum(axis=1)
                if spec.store:
                    stored[spec.name] = r
        out["ints"] = ints
        out["sq_sums"] = sq_sums
        out["stored"] = stored
        if store_paths:
            out["paths"] = X
        return out

    if workers > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, slices))
    else:
        results = [run_chunk(s) for s in slices]

    if light:
        node_mean = m_arr.copy()
        node_var = np.zeros_like(m_arr)
        sup = np.zeros(n_paths)
        sqm = {"u": np.zeros(K + 1), "v": np.zeros(K + 1), "qx": np.zeros(K + 1)}
    else:
        node_mean = sum(r["node_sum"] for r in results) / n_paths
        node_var = sum(r["node_sumsq"] for r in results) / n_paths - node_mean ** 2
        sup = np.concatenate([r["sup"] for r in results])
        sqm = {name: sum(r["sq_sums"][name] for r in results) / n_paths for name in
               results[0]["sq_sums"]}

    ints = {name: np.concatenate([r["ints"][name] for r in results]) for name in
            results[0]["ints"]}
    stored = {}
    for name in results[0]["stored"]:
        stored[name] = np.concatenate([r["stored"][name] for r in results], axis=1)

    return Ensemble(
        grid=grid, n_paths=n_paths, seed=seed, gamma=sys.gamma,
        mean=m_arr, u_mean=Eu, v_mean=Ev,
        node_mean=node_mean, node_var=node_var,
        node_u_sq=sqm["u"], node_v_sq=sqm["v"], node_qx_sq=sqm["qx"],
        int_u_sq=ints["u"], int_v_sq=ints["v"], int_qx_sq=ints["qx"],
        sup_x_sq=sup,
        extras={k: v for k, v in ints.items() if k not in ("u", "v", "qx")},
        stored=stored,
        paths=np.concatenate([r["paths"] for r in results], axis=1) if store_paths else None,
    )


def _simulate_particle(sys: MFSystem, policy_u, policy_v, law: InitialLaw, n_paths: int,
                       seed: int, extra_forms=(), store_paths: bool = False) -> Ensemble:
    """Interacting-particle regression mode: the batch average replaces the
    deterministic mean. Single chunk, numpy only."""
    grid = sys.grid
    K, n = grid.K, sys.n
    A1, A2 = sys.A1.values, sys.A2.values
    A1b, A2b = sys.A1bar.values, sys.A2bar.values
    B1, B2, B1b, B2b = sys.B1.values, sys.B2.values, sys.B1bar.values, sys.B2bar.values
    C1, C2, C1b, C2b = sys.C1.values, sys.C2.values, sys.C1bar.values, sys.C2bar.values
    bv, sg = sys.b.values, sys.sigma.values
    bank = NoiseBank(sys, law, n_paths, seed, chunk=n_paths)
    X0, noise = bank.chunk_inputs(0, n_paths)
    Gu, Gv = policy_u.gain_nodes(), policy_v.gain_nodes()
    X = X0.copy()
    out = np.empty((K + 1, n_paths, n))
    out[0] = X
    sq = np.sqrt(grid.dt)
    mhat = np.empty((K + 1, n))
    for k in range(K):
        mk = X.mean(axis=0)
        mhat[k] = mk
        # evaluate policies against the batch mean
        if Gu is not None:
            u = X @ Gu[k].T + (policy_u.Gbar[k] @ mk + policy_u.g[k])
        else:
            u = np.broadcast_to(policy_u.mean_fn(k, mk), (n_paths, sys.n_u))
        if Gv is not None:
            v = X @ Gv[k].T + (policy_v.Gbar[k] @ mk + policy_v.g[k])
        else:
            v = np.broadcast_to(policy_v.mean_fn(k, mk), (n_paths, sys.n_v))
        Euk, Evk = u.mean(axis=0), v.mean(axis=0)
        drift = (X @ A1[k].T + (A1b[k] @ mk) + u @ B1[k].T + (B1b[k] @ Euk)
                 + v @ C1[k].T + (C1b[k] @ Evk) + bv[k])
        diff = (X @ A2[k].T + (A2b[k] @ mk) + u @ B2[k].T + (B2b[k] @ Euk)
                + v @ C2[k].T + (C2b[k] @ Evk) + sg[k])
        X = X + grid.dt * drift + (sq * noise[k])[:, None] * diff
        out[k + 1] = X
    mhat[K] = X.mean(axis=0)

    node_mean = out.mean(axis=1)
    node_var = out.var(axis=1)
    w = trapezoid_weights(grid)
    Q = sys.Q.values
    qx = np.einsum("kqn,kpn->kpq", Q, out)
    qs = np.einsum("kpq,kpq->kp", qx, qx)
    zeros = np.zeros(n_paths)
    return Ensemble(
        grid=grid, n_paths=n_paths, seed=seed, gamma=sys.gamma,
        mean=mhat, u_mean=np.zeros((K + 1, sys.n_u)), v_mean=np.zeros((K + 1, sys.n_v)),
        node_mean=node_mean, node_var=node_var,
        node_u_sq=np.zeros(K + 1), node_v_sq=np.zeros(K + 1), node_qx_sq=qs.mean(axis=1),
        int_u_sq=zeros, int_v_sq=zeros, int_qx_sq=w @ qs,
        sup_x_sq=(out ** 2).sum(axis=2).max(axis=0),
        paths=out if store_paths else None,
    )


# --- Nash verification -----------------------------------------------------------


def _knot_trajectory(grid: TimeGrid, dim: int, gen: np.random.Generator,
                     knots: int = 9) -> np.ndarray:
    """Random piecewise-linear perturbation profile on the grid."""
    kv = gen.standard_normal((knots, dim))
    xs = np.linspace(0.0, 1.0, knots)
    t = np.linspace(0.0, 1.0, grid.K + 1)
    out = np.empty((grid.K + 1, dim))
    for d in range(dim):
        out[:, d] = np.interp(t, xs, kv[:, d])
    return out


@dataclass
class NashPerturbation:
    channel: str
    eps: float
    delta_j: float
    se: float

    @property
    def ok(self) -> bool:
        return self.delta_j >= -3.0 * self.se


@dataclass
class NashReport:
    j1_base: float
    j1_base_se: float
    j2_base: float
    j2_base_se: float
    perturbations: list

    @property
    def passed(self) -> bool:
        return all(p.ok for p in self.perturbations)

    def worst(self, channel: str):
        cand = [p for p in self.perturbations if p.channel == channel]
        return min(cand, key=lambda p: p.delta_j - (-3.0 * p.se)) if cand else None


_EPS_CYCLE = (0.1, -0.1, 0.5, -0.5)


def verify_nash(sys: MFSystem, sol, law: InitialLaw, n_perturb: int = 100,
                n_paths: int = 10000, seed: int = 20240, workers: int = 1) -> NashReport:
    """Empirical check of the two equilibrium inequalities.

    For the disturbance side, v is replaced by the frozen equilibrium
    disturbance plus a scaled deterministic perturbation while u keeps its
    feedback law re-evaluated along the perturbed trajectory; symmetric check
    for the control side. Common random numbers pair perturbed and baseline
    runs; a perturbation passes when its paired cost difference is above
    -3 standard errors.
    """
    pu = AffinePolicy(sol.U, sol.Ubar, sol.U0)
    pv = AffinePolicy(sol.V, sol.Vbar, sol.V0)
    bank = NoiseBank(sys, law, n_paths, seed, cache=True)
    base = simulate(sys, pu, pv, law, n_paths, seed, workers=workers,
                    store_controls=("u", "v"), bank=bank)
    gamma = sys.gamma
    j1b = base.j1_paths(gamma)
    j2b = base.j2_paths()
    ustar, vstar = base.stored["u"], base.stored["v"]
    Eu_star, Ev_star = base.u_mean, base.v_mean

    n_v_side = (n_perturb + 1) // 2
    n_u_side = n_perturb - n_v_side
    perturbations = []
    for j in range(n_v_side):
        gen = np.random.Generator(np.random.Philox(key=np.array([seed % 2 ** 64, 7_000_000 + j],
                                                                dtype=np.uint64)))
        eps = _EPS_CYCLE[j % len(_EPS_CYCLE)]
        dv = _knot_trajectory(sys.grid, sys.n_v, gen)
        pvj = PathPolicy(vstar + eps * dv[:, None, :], mean=Ev_star + eps * dv)
        pert = simulate(sys, pu, pvj, law, n_paths, seed, workers=workers, bank=bank,
                        light=True)
        d = pert.j1_paths(gamma) - j1b
        perturbations.append(NashPerturbation(
            "v", eps, float(d.mean()), float(d.std(ddof=1) / np.sqrt(n_paths))))
    for j in range(n_u_side):
        gen = np.random.Generator(np.random.Philox(key=np.array([seed % 2 ** 64, 8_000_000 + j],
                                                                dtype=np.uint64)))
        eps = _EPS_CYCLE[j % len(_EPS_CYCLE)]
        du = _knot_trajectory(sys.grid, sys.n_u, gen)
        puj = PathPolicy(ustar + eps * du[:, None, :], mean=Eu_star + eps * du)
        pert = simulate(sys, puj, pv, law, n_paths, seed, workers=workers, bank=bank,
                        light=True)
        d = pert.j2_paths() - j2b
        perturbations.append(NashPerturbation(
            "u", eps, float(d.mean()), float(d.std(ddof=1) / np.sqrt(n_paths))))

    e1, s1 = evaluate_cost(base, "j1")
    e2, s2 = evaluate_cost(base, "j2")
    return NashReport(j1_base=e1, j1_base_se=s1, j2_base=e2, j2_base_se=s2,
                      perturbations=perturbations)


def estimate_gain_ratio(sys: MFSystem, U, Ubar, n_probe: int = 20, n_paths: int = 4000,
                        seed: int = 20240, workers: int = 1):
    """Monte Carlo lower bound on the closed-loop disturbance-to-output gain.

    Probes the zero-initial, zero-affine closed-loop system with random
    deterministic disturbances and returns the largest output/input norm
    ratio with its standard error.
    """
    zero_vec = MatrixTrajectory.constant(sys.grid, np.zeros(sys.n))
    sys0 = replace(sys, b=zero_vec, sigma=zero_vec)
    law0 = InitialLaw.point_mass(np.zeros(sys.n))
    pu = AffinePolicy(U, Ubar)
    w = trapezoid_weights(sys.grid)
    Uv = U.values if isinstance(U, MatrixTrajectory) else np.asarray(U)
    Ubv = Ubar.values if isinstance(Ubar, MatrixTrajectory) else np.asarray(Ubar)
    best = (0.0, 0.0)
    for j in range(n_probe):
        gen = np.random.Generator(np.random.Philox(key=np.array([seed % 2 ** 64, 9_000_000 + j],
                                                                dtype=np.uint64)))
        dv = _knot_trajectory(sys.grid, sys.n_v, gen)
        vnorm_sq = float(w @ (dv ** 2).sum(axis=1))
        if vnorm_sq <= 0.0:
            continue
        m, _, _ = _euler_mean(sys0, pu, OpenLoopPolicy(dv), law0)
        gain_out = FormSpec("zu", A=Uv, a=np.einsum("kdn,kn->kd", Ubv, m))
        ens = simulate(sys0, pu, OpenLoopPolicy(dv), law0, n_paths, seed, workers=workers,
                       extra_forms=(gain_out,))
        z_sq = ens.int_qx_sq + ens.extras["zu"]
        ratio = float(np.sqrt(max(z_sq.mean(), 0.0) / vnorm_sq))
        se_z = float(z_sq.std(ddof=1) / np.sqrt(n_paths))
        se_ratio = se_z / (2.0 * max(ratio, 1e-12) * vnorm_sq)
        if ratio > best[0]:
            best = (ratio, se_ratio)
    return best


# --- completion-of-squares identity checks ---------------------------------------


@dataclass
class IdentityCheck:
    lhs: float
    rhs: float
    se: float

    @property
    def ok(self) -> bool:
        return abs(self.lhs - self.rhs) <= 3.0 * self.se


def _solve_nodes(Mk, rk):
    return np.stack([np.linalg.solve(Mk[k], rk[k]) for k in range(Mk.shape[0])])


def brl_completion_check(sys: MFSystem, sol, law: InitialLaw, policy_v,
                         n_paths: int = 10000, seed: int = 20240,
                         workers: int = 1) -> IdentityCheck:
    """Pathwise completion-of-squares identity for the disturbance-suppression
    cost under an affine disturbance policy (zero control input).

    Forms the per-path statistic (cost - deviation residual integral) whose
    expectation must equal the quadratic constant plus the deterministic mean
    residual and affine integrals.
    """
    grid = sys.grid
    ker = sol.kernels
    Gv = policy_v.gain_nodes()
    if Gv is None:
        Gv = np.zeros((grid.K + 1, sys.n_v, sys.n))
    lam_inv_phiT = -sol.F  # Lambda^{-1} Phi^T at the nodes
    A_dev = Gv + lam_inv_phiT
    lam_inv_phi = _solve_nodes(ker.Lambda, ker.phi)
    pu = ZeroPolicy(grid, sys.n_u)
    m, _, Ev = _euler_mean(sys, pu, policy_v, law)
    # residual = A_dev (x - m) + Lambda^{-1} phi
    a_dev = -np.einsum("kdn,kn->kd", A_dev, m) + lam_inv_phi
    dev_form = FormSpec("dev_resid", A=A_dev, a=a_dev, W=ker.Lambda)
    ens = simulate(sys, pu, policy_v, law, n_paths, seed, workers=workers,
                   extra_forms=(dev_form,))

    w = trapezoid_weights(grid)
    mean_resid = (Ev + np.einsum("kdn,kn->kd", -sol.Fbar, m)
                  + _solve_nodes(ker.LambdaBar, ker.phiBar))
    mean_int = float(w @ np.einsum("kd,kde,ke->k", mean_resid, ker.LambdaBar, mean_resid))
    P = sol.P.values
    sg, b = sys.sigma.values, sys.b.values
    Psig = np.einsum("kij,kj->ki", P, sg)
    aff = (np.einsum("ki,ki->k", Psig, sg)
           + 2.0 * np.einsum("ki,ki->k", sol.etaBar.values, b)
           - np.einsum("kv,kv->k", ker.phi, lam_inv_phi)
           - np.einsum("kv,kv->k", ker.phiBar, _solve_nodes(ker.LambdaBar, ker.phiBar)))
    aff_int = float(w @ aff)
    quad = float(np.trace(sol.P.values[0] @ law.cov)
                 + (sol.Pi.values[0] @ law.mean + 2.0 * sol.etaBar.values[0]) @ law.mean)

    d = ens.j1_paths(sol.gamma) - ens.extras["dev_resid"]
    lhs = float(d.mean())
    se = float(d.std(ddof=1) / np.sqrt(n_paths))
    rhs = quad + mean_int + aff_int
    return IdentityCheck(lhs=lhs, rhs=rhs, se=se)


def closedloop_completion_check(sys: MFSystem, sol, law: InitialLaw, policy_v,
                                n_paths: int = 10000, seed: int = 20240,
                                workers: int = 1) -> IdentityCheck:
    """Pathwise completion-of-squares identity for the disturbance cost of the
    closed-loop equilibrium, under the synthesized control feedback and an
    arbitrary affine disturbance policy."""
    grid = sys.grid
    til = sys.tilde()
    pu = AffinePolicy(sol.U, sol.Ubar, sol.U0)
    Gv = policy_v.gain_nodes()
    if Gv is None:
        Gv = np.zeros((grid.K + 1, sys.n_v, sys.n))
    m, _, Ev = _euler_mean(sys, pu, policy_v, law)

    V = sol.V.values
    Vt = sol.V.values + sol.Vbar.values
    A_dev = Gv - V
    a_dev = -np.einsum("kdn,kn->kd", A_dev, m)
    dev_form = FormSpec("dev_resid", A=A_dev, a=a_dev, W=sol.kernels.Lambda)
    ens = simulate(sys, pu, policy_v, law, n_paths, seed, workers=workers,
                   extra_forms=(dev_form,))

    w = trapezoid_weights(grid)
    V0 = sol.V0.values
    mean_resid = Ev - np.einsum("kdn,kn->kd", Vt, m) - V0
    mean_int = float(w @ np.einsum("kd,kde,ke->k",
                                   mean_resid, sol.kernels.LambdaBar, mean_resid))

    P1 = sol.P1.values
    sg, b = sys.sigma.values, sys.b.values
    Bt1, Bt2 = til.B1.values, til.B2.values
    U0 = sol.U0.values
    sig_eff = sg + np.einsum("kij,kj->ki", Bt2, U0)
    b_eff = b + np.einsum("kij,kj->ki", Bt1, U0)
    XiBar = (np.einsum("kiv,kij,kj->kv", til.C2.values, P1, sig_eff)
             + np.einsum("kiv,ki->kv", til.C1.values, sol.etaBar1.values))
    aff = (np.einsum("kij,kj,ki->k", P1, sig_eff, sig_eff)
           + 2.0 * np.einsum("ki,ki->k", sol.etaBar1.values, b_eff)
           - np.einsum("kv,kv->k", XiBar, _solve_nodes(sol.kernels.LambdaBar, XiBar)))
    aff_int = float(w @ aff)
    quad = float(np.trace(P1[0] @ law.cov)
                 + law.mean @ sol.Pi1.values[0] @ law.mean
                 + 2.0 * sol.etaBar1.values[0] @ law.mean)

    d = ens.j1_paths(sol.gamma) - ens.extras["dev_resid"]
    lhs = float(d.mean())
    se = float(d.std(ddof=1) / np.sqrt(n_paths))
    rhs = quad + mean_int + aff_int
    return IdentityCheck(lhs=lhs, rhs=rhs, se=se)
