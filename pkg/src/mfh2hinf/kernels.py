"""Hot-loop backend for Euler path stepping.

The serial-in-time recursion is the only part of the Monte Carlo engine that
cannot be vectorized across steps, so it is implemented twice: a compiled
Cython kernel and a pure-numpy fallback, selected at import. Everything
around it (noise generation, reductions) is identical for both backends.
"""

from __future__ import annotations

import numpy as np

try:
    from . import _mckernel  # type: ignore[attr-defined]

    _HAVE_EXT = True
except ImportError:
    _mckernel = None
    _HAVE_EXT = False

_FORCED: str | None = None


def available_backends() -> tuple[str, ...]:
    return ("cython", "numpy") if _HAVE_EXT else ("numpy",)


def backend_name() -> str:
    if _FORCED is not None:
        return _FORCED
    return "cython" if _HAVE_EXT else "numpy"


def force_backend(name: str | None) -> None:
    """Pin the backend (or None to restore auto-selection); used by the
    benchmark and the parity tests."""
    global _FORCED
    if name is not None and name not in available_backends():
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    _FORCED = name


def step_paths_numpy(F1, F2, f1, f2, E1, E2, X0, noise, dt, out):
    """X_{k+1} = X_k + dt (F1[k] X_k + f1[k] + E1[k]) + sqrt(dt) eps_k (F2[k] X_k + f2[k] + E2[k])."""
    K = noise.shape[0]
    sq = np.sqrt(dt)
    X = np.array(X0, dtype=float)
    out[0] = X
    for k in range(K):
        drift = X @ F1[k].T + f1[k]
        diff = X @ F2[k].T + f2[k]
        if E1 is not None:
            drift = drift + E1[k]
            diff = diff + E2[k]
        X = X + dt * drift + (sq * noise[k])[:, None] * diff
        out[k + 1] = X
    return out


def step_paths(F1, F2, f1, f2, E1, E2, X0, noise, dt, out):
    """Run the path recursion with the active backend.

    Shapes: F1, F2 (K, n, n); f1, f2 (K, n); E1, E2 (K, P, n) or None;
    X0 (P, n); noise (K, P); out (K+1, P, n), filled in place.
    """
    if backend_name() == "numpy":
        return step_paths_numpy(F1, F2, f1, f2, E1, E2, X0, noise, dt, out)
    dummy = np.zeros((1, 1, 1))
    has_extra = E1 is not None
    _mckernel.step_paths(
        np.ascontiguousarray(F1), np.ascontiguousarray(F2),
        np.ascontiguousarray(f1), np.ascontiguousarray(f2),
        np.ascontiguousarray(E1) if has_extra else dummy,
        np.ascontiguousarray(E2) if has_extra else dummy,
        int(has_extra),
        np.ascontiguousarray(X0), np.ascontiguousarray(noise),
        float(dt), out,
    )
    return out


def has_fused() -> bool:
    return backend_name() == "cython"


_D3 = np.zeros((1, 1, 1))


def fused_paths(F1, F2, f1, f2, upath, vpath, B1, B2, C1, C2,
                Gu, uoff, Gv, voff, Qm, X0, noise, dt, tw,
                want_x, xout, int_u, int_v, int_qx,
                want_stats, node_sum, node_sumsq, sup_sq,
                node_u_sq, node_v_sq, node_qx_sq) -> None:
    """Stepping plus in-loop cost accumulation (compiled backend only).

    Per-path trapezoid integrals of |u|^2, |v|^2, |Q x|^2 and optional node
    statistics are accumulated while stepping; the full path array is written
    only when ``want_x``.
    """
    _mckernel.fused_paths(
        np.ascontiguousarray(F1), np.ascontiguousarray(F2),
        np.ascontiguousarray(f1), np.ascontiguousarray(f2),
        int(upath is not None), np.ascontiguousarray(upath) if upath is not None else _D3,
        int(vpath is not None), np.ascontiguousarray(vpath) if vpath is not None else _D3,
        np.ascontiguousarray(B1), np.ascontiguousarray(B2),
        np.ascontiguousarray(C1), np.ascontiguousarray(C2),
        np.ascontiguousarray(Gu), np.ascontiguousarray(uoff),
        np.ascontiguousarray(Gv), np.ascontiguousarray(voff),
        np.ascontiguousarray(Qm),
        np.ascontiguousarray(X0), np.ascontiguousarray(noise),
        float(dt), np.ascontiguousarray(tw),
        int(want_x), xout, int_u, int_v, int_qx,
        int(want_stats), node_sum, node_sumsq, sup_sq,
        node_u_sq, node_v_sq, node_qx_sq,
    )
