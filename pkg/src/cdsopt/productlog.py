"""Product-log function on the positive half line and related identities.

The product log PL is the functional inverse of y -> y*exp(y) restricted to
y >= 0.  It is the nonlinearity through which the optimal default hedge
enters every Hamiltonian in this package, so it is implemented here from
scratch (Halley iteration) together with an overflow-safe variant that takes
the argument in log space.  All functions accept scalars or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PlResult",
    "pl",
    "pl_of_log",
    "pl_derivative",
    "pl_quad_bound_gap",
]

_MAX_ITER = 50
_TOL = 1e-14
# exp() overflows just above 709; switch to the asymptotic branch before that
_LOG_SWITCH = 700.0


def _halley(w, z):
    """Halley refinement of w*exp(w) = z, vectorized. w, z are float arrays."""
    for _ in range(_MAX_ITER):
        ew = np.exp(w)
        f = w * ew - z
        wp1 = w + 1.0
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        dw = f / denom
        w = w - dw
        if np.all(np.abs(dw) <= _TOL * (1.0 + np.abs(w))):
            break
    return w


def pl(z):
    """Principal-branch product log for z > 0: the w >= 0 with w*exp(w) = z.

    Raises ValueError for z <= 0 (the negative branch is never needed here).
    """
    z_arr = np.asarray(z, dtype=float)
    if np.any(~(z_arr > 0.0)):
        raise ValueError("pl requires z > 0")
    # initial guess: log1p for small z, asymptotic log z - log log z otherwise
    small = z_arr <= np.e
    logz = np.log(np.where(small, 1.0, z_arr))
    w0 = np.where(small, np.log1p(z_arr), logz - np.log(np.where(small, 1.0, logz)))
    w = _halley(np.atleast_1d(w0).astype(float), np.atleast_1d(z_arr).astype(float))
    w = np.maximum(w, 0.0)
    if np.isscalar(z) or np.ndim(z) == 0:
        return float(w[0])
    return w.reshape(z_arr.shape)


def pl_of_log(log_z):
    """PL(exp(log_z)) without forming exp(log_z) when it would overflow.

    For log_z <= 700 this evaluates pl(exp(log_z)) directly.  Beyond that the
    solution of w + log(w) = log_z is found by Newton from the asymptotic
    seed w = log_z - log(log_z); convergence to machine precision takes a
    handful of steps.
    """
    s_arr = np.asarray(log_z, dtype=float)
    s = np.atleast_1d(s_arr).astype(float)
    out = np.empty_like(s)
    lo = s <= _LOG_SWITCH
    if np.any(lo):
        out[lo] = np.atleast_1d(pl(np.exp(s[lo])))
    if np.any(~lo):
        sl = s[~lo]
        w = sl - np.log(sl)
        for _ in range(8):
            # f(w) = w + log w - s, f'(w) = 1 + 1/w
            dw = (w + np.log(w) - sl) * w / (w + 1.0)
            w = w - dw
            if np.all(np.abs(dw) <= _TOL * np.abs(w)):
                break
        out[~lo] = w
    if np.isscalar(log_z) or np.ndim(log_z) == 0:
        return float(out[0])
    return out.reshape(s_arr.shape)


def pl_derivative(z):
    """d/dz PL(z) = PL(z) / (z * (1 + PL(z))) for z > 0."""
    z_arr = np.asarray(z, dtype=float)
    if np.any(~(z_arr > 0.0)):
        raise ValueError("pl_derivative requires z > 0")
    w = pl(z_arr)
    out = w / (z_arr * (1.0 + w))
    if np.isscalar(z) or np.ndim(z) == 0:
        return float(out)
    return out


def pl_quad_bound_gap(K, z):
    """Slack 2K + z^2 - PL(K e^z)^2 - 2 PL(K e^z); nonnegative, zero iff K = z.

    The product log is evaluated through log space so that large z do not
    overflow.
    """
    K_arr = np.asarray(K, dtype=float)
    z_arr = np.asarray(z, dtype=float)
    if np.any(~(K_arr > 0.0)):
        raise ValueError("pl_quad_bound_gap requires K > 0")
    w = pl_of_log(np.log(K_arr) + z_arr)
    out = 2.0 * K_arr + z_arr**2 - np.asarray(w) ** 2 - 2.0 * np.asarray(w)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class PlResult:
    """Product-log evaluation with convergence diagnostics."""

    value: float
    iterations: int
    residual: float


def pl_result(z: float) -> PlResult:
    """Like :func:`pl` for a scalar, but reporting iterations and residual."""
    if not z > 0.0:
        raise ValueError("pl requires z > 0")
    if z <= np.e:
        w = np.log1p(z)
    else:
        logz = np.log(z)
        w = logz - np.log(logz)
    it = 0
    for it in range(1, _MAX_ITER + 1):
        ew = np.exp(w)
        f = w * ew - z
        wp1 = w + 1.0
        dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= dw
        if abs(dw) <= _TOL * (1.0 + abs(w)):
            break
    w = max(w, 0.0)
    return PlResult(value=float(w), iterations=it, residual=abs(w * np.exp(w) - z))
