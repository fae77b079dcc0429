"""Canonical desk-scale problems used by the test-suite and the docs.

The JSON files shipped under ``problems/`` are the canonical form written by
:func:`mfh2hinf.model.save_problem`; the builders here construct the same
objects programmatically.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .model import InitialLaw, MFSystem, SolverSettings, load_problem
from .numerics import MatrixTrajectory, TimeGrid

_DEFAULT_SETTINGS = SolverSettings()


def problem_path(name: str) -> Path:
    """Filesystem path of a shipped problem file (``sys-a``, ``zero``, ``nomf``, ``sys-b``)."""
    fname = name.replace("-", "_") + ".json"
    return Path(resources.files("mfh2hinf").joinpath("problems", fname))


def load_fixture(name: str):
    return load_problem(problem_path(name))


def _const_system(n, n_u, n_v, grid, gamma, **consts) -> MFSystem:
    def traj(key, shape):
        return MatrixTrajectory.constant(grid, np.broadcast_to(np.asarray(consts[key], float), shape))

    return MFSystem(
        n=n, n_u=n_u, n_v=n_v, grid=grid, gamma=gamma,
        A1=traj("A1", (n, n)), A1bar=traj("A1bar", (n, n)),
        A2=traj("A2", (n, n)), A2bar=traj("A2bar", (n, n)),
        B1=traj("B1", (n, n_u)), B1bar=traj("B1bar", (n, n_u)),
        B2=traj("B2", (n, n_u)), B2bar=traj("B2bar", (n, n_u)),
        C1=traj("C1", (n, n_v)), C1bar=traj("C1bar", (n, n_v)),
        C2=traj("C2", (n, n_v)), C2bar=traj("C2bar", (n, n_v)),
        Q=traj("Q", consts["Q"].shape if hasattr(consts["Q"], "shape") else (n, n)),
        N1=traj("N1", (n_u, n_u)),
        b=traj("b", (n,)), sigma=traj("sigma", (n,)),
    )


def sys_a(steps: int = 2000):
    """Scalar mean-field plant with both drift and diffusion mean coupling."""
    grid = TimeGrid(0.0, 1.0, steps)
    sys = _const_system(
        1, 1, 1, grid, gamma=2.0,
        A1=-1.0, A1bar=0.2, A2=0.3, A2bar=0.0,
        B1=1.0, B1bar=0.0, B2=0.2, B2bar=0.0,
        C1=0.5, C1bar=0.0, C2=0.1, C2bar=0.0,
        Q=np.array([[1.0]]), N1=1.0, b=0.1, sigma=0.05,
    )
    law = InitialLaw.gaussian([0.5], [[0.04]])
    return sys, law, _DEFAULT_SETTINGS


def zero(steps: int = 2000):
    """Everything off: zero coefficients, zero weight, zero affine terms."""
    grid = TimeGrid(0.0, 1.0, steps)
    sys = _const_system(
        1, 1, 1, grid, gamma=1.0,
        A1=0.0, A1bar=0.0, A2=0.0, A2bar=0.0,
        B1=0.0, B1bar=0.0, B2=0.0, B2bar=0.0,
        C1=0.0, C1bar=0.0, C2=0.0, C2bar=0.0,
        Q=np.array([[0.0]]), N1=1.0, b=0.0, sigma=0.0,
    )
    law = InitialLaw.point_mass([0.0])
    return sys, law, _DEFAULT_SETTINGS


def nomf(steps: int = 2000):
    """SYS-A with every mean-field (bar) coefficient removed."""
    sys, law, settings = sys_a(steps)
    z = MatrixTrajectory.constant(sys.grid, np.zeros((1, 1)))
    from dataclasses import replace

    sys = replace(sys, A1bar=z, A2bar=z, B1bar=z, B2bar=z, C1bar=z, C2bar=z)
    return sys, law, settings


def sys_b(steps: int = 2000):
    """Planar plant (n=2) with bounded constants drawn once and committed."""
    grid = TimeGrid(0.0, 1.0, steps)
    sys = _const_system(
        2, 1, 1, grid, gamma=2.0,
        A1=np.array([[-0.6, 0.3], [-0.2, -0.9]]),
        A1bar=np.array([[0.1, 0.0], [0.05, -0.1]]),
        A2=np.array([[0.2, -0.1], [0.1, 0.15]]),
        A2bar=np.array([[0.05, 0.0], [0.0, -0.05]]),
        B1=np.array([[0.8], [0.3]]), B1bar=np.array([[0.1], [0.0]]),
        B2=np.array([[0.2], [0.1]]), B2bar=np.array([[0.0], [0.05]]),
        C1=np.array([[0.4], [-0.2]]), C1bar=np.array([[0.05], [0.1]]),
        C2=np.array([[0.15], [0.05]]), C2bar=np.array([[0.0], [0.02]]),
        Q=np.array([[1.0, 0.0], [0.0, 0.7]]), N1=1.0,
        b=np.array([0.05, -0.04]), sigma=np.array([0.03, 0.02]),
    )
    law = InitialLaw.gaussian([0.4, -0.3], [[0.04, 0.01], [0.01, 0.03]])
    return sys, law, _DEFAULT_SETTINGS


BUILDERS = {"sys-a": sys_a, "zero": zero, "nomf": nomf, "sys-b": sys_b}
