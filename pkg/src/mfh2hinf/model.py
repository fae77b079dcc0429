"""Problem data model, admissibility validation, derived tilde matrices, and
problem-file ingestion.

A problem file is a single JSON document; constant matrices may be given once
and are broadcast to all nodes. Numbers are written back with Python's
shortest round-trip ``repr`` so a canonical file survives load/save byte for
byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import MatrixTrajectory, TimeGrid


class ParseError(RuntimeError):
    """Problem file is not well-formed JSON."""


class SchemaError(RuntimeError):
    """Problem file is missing a field, carries an unknown field, or a field value is inadmissible."""


class DimensionError(RuntimeError):
    """Problem file shapes are inconsistent with the declared dimensions."""


@dataclass(frozen=True)
class SolverSettings:
    riccati_steps: int = 2000
    bisect_tol: float = 1e-4
    delta_margin: float = 1e-8
    mc_paths: int = 10000
    seed: int = 20240
    gain_fixpoint_tol: float = 1e-9


_MATRIX_FIELDS = ("A1", "A1bar", "A2", "A2bar", "B1", "B1bar", "B2", "B2bar",
                  "C1", "C1bar", "C2", "C2bar", "Q", "N1")


@dataclass(frozen=True)
class MFSystem:
    """Coefficient trajectories, output weights, affine terms and the
    attenuation level of a mean-field linear stochastic plant."""

    n: int
    n_u: int
    n_v: int
    grid: TimeGrid
    A1: MatrixTrajectory
    A1bar: MatrixTrajectory
    A2: MatrixTrajectory
    A2bar: MatrixTrajectory
    B1: MatrixTrajectory
    B1bar: MatrixTrajectory
    B2: MatrixTrajectory
    B2bar: MatrixTrajectory
    C1: MatrixTrajectory
    C1bar: MatrixTrajectory
    C2: MatrixTrajectory
    C2bar: MatrixTrajectory
    Q: MatrixTrajectory
    N1: MatrixTrajectory
    b: MatrixTrajectory
    sigma: MatrixTrajectory
    gamma: float

    @property
    def n_q(self) -> int:
        return self.Q.item_shape[0]

    def trajectories(self) -> dict[str, MatrixTrajectory]:
        out = {name: getattr(self, name) for name in _MATRIX_FIELDS}
        out["b"] = self.b
        out["sigma"] = self.sigma
        return out

    def q_gram(self) -> np.ndarray:
        """Q(s)^T Q(s) at every node, shape (K+1, n, n)."""
        Q = self.Q.values
        return np.einsum("kqi,kqj->kij", Q, Q)

    def resampled(self, K: int) -> "MFSystem":
        grid = TimeGrid(self.grid.t0, self.grid.T, K)
        kw = {name: getattr(self, name).resampled(grid) for name in _MATRIX_FIELDS}
        kw["b"] = self.b.resampled(grid)
        kw["sigma"] = self.sigma.resampled(grid)
        return replace(self, grid=grid, **kw)

    def tilde(self) -> "TildeSystem":
        return tilde(self)


@dataclass(frozen=True)
class TildeSystem:
    """Entrywise sums of each coefficient with its mean-field companion."""

    A1: MatrixTrajectory
    A2: MatrixTrajectory
    B1: MatrixTrajectory
    B2: MatrixTrajectory
    C1: MatrixTrajectory
    C2: MatrixTrajectory


def tilde(sys: MFSystem) -> TildeSystem:
    def add(a: MatrixTrajectory, bar: MatrixTrajectory) -> MatrixTrajectory:
        return MatrixTrajectory(sys.grid, a.values + bar.values)

    return TildeSystem(
        A1=add(sys.A1, sys.A1bar), A2=add(sys.A2, sys.A2bar),
        B1=add(sys.B1, sys.B1bar), B2=add(sys.B2, sys.B2bar),
        C1=add(sys.C1, sys.C1bar), C2=add(sys.C2, sys.C2bar),
    )


@dataclass(frozen=True)
class InitialLaw:
    """Initial-state distribution: a deterministic point, a Gaussian, or an
    empirical sample list."""

    kind: str
    n: int
    point: np.ndarray | None = None
    mean_: np.ndarray | None = None
    cov_: np.ndarray | None = None
    samples: np.ndarray | None = None

    @classmethod
    def point_mass(cls, x) -> "InitialLaw":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(kind="point", n=x.shape[0], point=x)

    @classmethod
    def gaussian(cls, mean, cov) -> "InitialLaw":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        law = cls(kind="gaussian", n=mean.shape[0], mean_=mean, cov_=cov)
        law.validate()
        return law

    @classmethod
    def empirical(cls, samples) -> "InitialLaw":
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        law = cls(kind="empirical", n=samples.shape[1], samples=samples)
        law.validate()
        return law

    def validate(self) -> None:
        if self.kind == "gaussian":
            cov = self.cov_
            if cov.shape != (self.n, self.n):
                raise DimensionError(f"covariance shape {cov.shape} does not match n={self.n}")
            if np.linalg.norm(cov - cov.T) > 1e-12 * (1.0 + np.linalg.norm(cov)):
                raise SchemaError("covariance must be symmetric")
            if np.linalg.eigvalsh(0.5 * (cov + cov.T))[0] < -1e-12:
                raise SchemaError("covariance must be positive semidefinite")
        elif self.kind == "empirical":
            if self.samples.shape[0] == 0:
                raise SchemaError("empirical sample list must be nonempty")
        elif self.kind != "point":
            raise SchemaError(f"unknown initial law kind {self.kind!r}")

    @property
    def mean(self) -> np.ndarray:
        if self.kind == "point":
            return self.point
        if self.kind == "gaussian":
            return self.mean_
        return self.samples.mean(axis=0)

    @property
    def cov(self) -> np.ndarray:
        if self.kind == "point":
            return np.zeros((self.n, self.n))
        if self.kind == "gaussian":
            return 0.5 * (self.cov_ + self.cov_.T)
        d = self.samples - self.mean
        return d.T @ d / self.samples.shape[0]

    def cov_factor(self) -> np.ndarray:
        """PSD square root L with L L^T = cov (eigenvalue based, rank safe)."""
        w, V = np.linalg.eigh(self.cov)
        return V * np.sqrt(np.clip(w, 0.0, None))

    def draw_batch(self, gen: np.random.Generator, count: int, first_index: int) -> np.ndarray:
        """Initial states for paths first_index..first_index+count-1, consuming
        the stream only for the Gaussian kind."""
        if self.kind == "point":
            return np.tile(self.point, (count, 1))
        if self.kind == "gaussian":
            z = gen.standard_normal((count, self.n))
            return self.mean_ + z @ self.cov_factor().T
        idx = (first_index + np.arange(count)) % self.samples.shape[0]
        return self.samples[idx].copy()


@dataclass
class Violation:
    field: str
    node: int | None
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = dataclasses.field(default_factory=list)
    notes: list[str] = dataclasses.field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, field: str, node: int | None, message: str) -> None:
        self.violations.append(Violation(field, node, message))


_DETERMINISTIC_AFFINE_NOTE = (
    "affine terms are stored as deterministic trajectories; stochastic drift/diffusion "
    "offsets are outside the synthesis scope of this toolkit"
)


def validate_system(sys: MFSystem) -> ValidationReport:
    """Check admissibility: shape consistency, bounded (finite) entries,
    orthonormal control weight, positive attenuation level."""
    rep = ValidationReport(notes=[_DETERMINISTIC_AFFINE_NOTE])
    n, n_u, n_v = sys.n, sys.n_u, sys.n_v
    expected = {
        "A1": (n, n), "A1bar": (n, n), "A2": (n, n), "A2bar": (n, n),
        "B1": (n, n_u), "B1bar": (n, n_u), "B2": (n, n_u), "B2bar": (n, n_u),
        "C1": (n, n_v), "C1bar": (n, n_v), "C2": (n, n_v), "C2bar": (n, n_v),
        "N1": (n_u, n_u), "b": (n,), "sigma": (n,),
    }
    trajs = sys.trajectories()
    for name, shape in expected.items():
        traj = trajs[name]
        if traj.item_shape != shape:
            rep.add(name, None, f"shape {traj.item_shape} does not match expected {shape}")
    if sys.Q.item_shape[1:] != (n,):
        rep.add("Q", None, f"shape {sys.Q.item_shape} must have {n} columns")
    for name, traj in trajs.items():
        bad = np.nonzero(~np.isfinite(traj.values).reshape(len(traj), -1).all(axis=1))[0]
        for k in bad:
            rep.add(name, int(k), "non-finite entry")
    if sys.N1.item_shape == (n_u, n_u):
        N1 = sys.N1.values
        gram = np.einsum("kij,kil->kjl", N1, N1)
        dev = np.abs(gram - np.eye(n_u)).reshape(len(sys.N1), -1).max(axis=1)
        for k in np.nonzero(dev > 1e-10)[0]:
            rep.add("N1", int(k), "N1^T N1 != I")
    if not sys.gamma > 0.0:
        rep.add("gamma", None, "gamma must be positive")
    if not np.isfinite(sys.gamma):
        rep.add("gamma", None, "gamma must be finite")
    return rep


# --- problem file ingestion -------------------------------------------------

_TOP_KEYS = {"dims", "horizon", "matrices", "affine", "gamma", "initial_law", "solver"}
_DIM_KEYS = {"n", "n_u", "n_v"}
_HORIZON_KEYS = {"t0", "T", "steps"}
_AFFINE_KEYS = {"b", "sigma"}
_SOLVER_KEYS = {"riccati_steps", "bisect_tol", "delta_margin", "mc_paths", "seed",
                "gain_fixpoint_tol"}


def _require_keys(obj: dict, keys: set, where: str) -> None:
    missing = keys - obj.keys()
    extra = obj.keys() - keys
    if missing:
        raise SchemaError(f"{where}: missing field(s) {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where}: unknown field(s) {sorted(extra)}")


def _as_trajectory(name: str, raw, grid: TimeGrid, item_shape: tuple) -> MatrixTrajectory:
    arr = np.asarray(raw, dtype=float)
    if arr.shape == item_shape:
        return MatrixTrajectory.constant(grid, arr)
    if arr.shape == (grid.K + 1,) + item_shape:
        return MatrixTrajectory(grid, arr)
    raise DimensionError(
        f"{name}: shape {arr.shape} matches neither {item_shape} nor a per-node list "
        f"of length {grid.K + 1}"
    )


def load_problem(path) -> tuple[MFSystem, InitialLaw, SolverSettings]:
    """Parse a problem file into a validated system, initial law and settings."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object")
    _require_keys(doc, _TOP_KEYS, "top level")
    _require_keys(doc["dims"], _DIM_KEYS, "dims")
    _require_keys(doc["horizon"], _HORIZON_KEYS, "horizon")
    _require_keys(doc["affine"], _AFFINE_KEYS, "affine")
    _require_keys(doc["solver"], _SOLVER_KEYS, "solver")

    n = int(doc["dims"]["n"])
    n_u = int(doc["dims"]["n_u"])
    n_v = int(doc["dims"]["n_v"])
    hor = doc["horizon"]
    grid = TimeGrid(float(hor["t0"]), float(hor["T"]), int(hor["steps"]))

    mats = doc["matrices"]
    _require_keys(mats, set(_MATRIX_FIELDS), "matrices")
    shapes = {
        "A1": (n, n), "A1bar": (n, n), "A2": (n, n), "A2bar": (n, n),
        "B1": (n, n_u), "B1bar": (n, n_u), "B2": (n, n_u), "B2bar": (n, n_u),
        "C1": (n, n_v), "C1bar": (n, n_v), "C2": (n, n_v), "C2bar": (n, n_v),
        "N1": (n_u, n_u),
    }
    kw = {}
    for name in _MATRIX_FIELDS:
        if name == "Q":
            arr = np.asarray(mats["Q"], dtype=float)
            n_q = arr.shape[0] if arr.ndim == 2 else arr.shape[1]
            kw["Q"] = _as_trajectory("Q", arr, grid, (n_q, n))
        else:
            kw[name] = _as_trajectory(name, mats[name], grid, shapes[name])
    b = _as_trajectory("b", doc["affine"]["b"], grid, (n,))
    sigma = _as_trajectory("sigma", doc["affine"]["sigma"], grid, (n,))

    sys = MFSystem(n=n, n_u=n_u, n_v=n_v, grid=grid, gamma=float(doc["gamma"]),
                   b=b, sigma=sigma, **kw)

    law_doc = doc["initial_law"]
    if "kind" not in law_doc:
        raise SchemaError("initial_law: missing field 'kind'")
    kind = law_doc["kind"]
    if kind == "point":
        _require_keys(law_doc, {"kind", "point"}, "initial_law")
        law = InitialLaw.point_mass(law_doc["point"])
    elif kind == "gaussian":
        _require_keys(law_doc, {"kind", "mean", "cov"}, "initial_law")
        law = InitialLaw.gaussian(law_doc["mean"], law_doc["cov"])
    elif kind == "empirical":
        _require_keys(law_doc, {"kind", "samples"}, "initial_law")
        law = InitialLaw.empirical(law_doc["samples"])
    else:
        raise SchemaError(f"initial_law: unknown kind {kind!r}")
    if law.n != n:
        raise DimensionError(f"initial_law dimension {law.n} does not match n={n}")

    settings = SolverSettings(
        riccati_steps=int(doc["solver"]["riccati_steps"]),
        bisect_tol=float(doc["solver"]["bisect_tol"]),
        delta_margin=float(doc["solver"]["delta_margin"]),
        mc_paths=int(doc["solver"]["mc_paths"]),
        seed=int(doc["solver"]["seed"]),
        gain_fixpoint_tol=float(doc["solver"]["gain_fixpoint_tol"]),
    )
    return sys, law, settings


def _traj_to_json(traj: MatrixTrajectory):
    if traj.is_constant():
        return traj.values[0].tolist()
    return traj.values.tolist()


def problem_document(sys: MFSystem, law: InitialLaw, settings: SolverSettings) -> dict:
    mats = {name: _traj_to_json(getattr(sys, name)) for name in _MATRIX_FIELDS}
    if law.kind == "point":
        law_doc = {"kind": "point", "point": law.point.tolist()}
    elif law.kind == "gaussian":
        law_doc = {"kind": "gaussian", "mean": law.mean_.tolist(), "cov": law.cov_.tolist()}
    else:
        law_doc = {"kind": "empirical", "samples": law.samples.tolist()}
    return {
        "dims": {"n": sys.n, "n_u": sys.n_u, "n_v": sys.n_v},
        "horizon": {"t0": sys.grid.t0, "T": sys.grid.T, "steps": sys.grid.K},
        "matrices": mats,
        "affine": {"b": _traj_to_json(sys.b), "sigma": _traj_to_json(sys.sigma)},
        "gamma": sys.gamma,
        "initial_law": law_doc,
        "solver": dataclasses.asdict(settings),
    }


def save_problem(path, sys: MFSystem, law: InitialLaw, settings: SolverSettings) -> None:
    """Write the canonical form: sorted keys, two-space indent, shortest
    round-trip float representation."""
    doc = problem_document(sys, law, settings)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
