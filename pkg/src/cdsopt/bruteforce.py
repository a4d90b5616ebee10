"""Numerical maximization of the raw Hamiltonian; verification use only.

These optimizers never touch the closed-form policy algebra: the inner
equity maximization runs a safeguarded Newton iteration on the gradient of
H, and the outer CDS search is a bounded scalar minimization (the partial
maximum over theta is concave in delta) polished by a few finite-difference
Newton steps.  They exist to confirm the closed forms, not to be fast.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize_scalar

from .hamiltonian import HamiltonianInputs, hamiltonian_value

__all__ = ["best_theta", "best_policy", "best_equity_only"]

_DELTA_BOUNDS = (-50.0, 50.0)


def _theta_newton(inp: HamiltonianInputs, delta, theta0=None, tol=1e-13, max_iter=80):
    """Maximize H over theta for frozen delta by Newton with step halving."""
    k = inp.k
    theta = np.zeros(k) if theta0 is None else np.asarray(theta0, float).copy()
    Sigma_e, Upsilon_e, ell = inp.Sigma_e, inp.Upsilon_e, inp.ell_e
    if delta is None:
        mu_eff = inp.mu_e - inp.alpha * Upsilon_e @ inp.p
        cross = 0.0
        jump_base = inp.g - inp.psi
    else:
        mu_eff = inp.mu_e - inp.alpha * Upsilon_e @ inp.p
        cross = inp.alpha * float(delta) * (Upsilon_e @ inp.sigma_r)
        jump_base = inp.g - inp.psi - float(delta)

    def grad_hess(th):
        expo = inp.alpha * (jump_base + th @ ell)
        pen = inp.gamma * np.exp(min(expo, 700.0))
        grad = mu_eff - cross - inp.alpha * Sigma_e @ th - pen * ell
        hess = -inp.alpha * Sigma_e - inp.alpha * pen * np.outer(ell, ell)
        return grad, hess

    val = hamiltonian_value(inp, theta, delta)
    for _ in range(max_iter):
        grad, hess = grad_hess(theta)
        if np.max(np.abs(grad)) < tol * max(1.0, np.max(np.abs(mu_eff))):
            break
        step = np.linalg.solve(hess, -grad)
        scale = 1.0
        for _ in range(60):
            cand = theta + scale * step
            cand_val = hamiltonian_value(inp, cand, delta)
            if cand_val >= val - 1e-18:
                theta, val = cand, cand_val
                break
            scale *= 0.5
        else:
            break
    return theta, val


def best_theta(inp: HamiltonianInputs, delta):
    """argmax over theta of H((theta, delta), g, p) for frozen delta."""
    theta, _ = _theta_newton(inp, delta)
    return theta


def best_equity_only(inp: HamiltonianInputs):
    """(theta, value) maximizing the equity-only Hamiltonian."""
    return _theta_newton(inp, None)


def best_policy(inp: HamiltonianInputs, delta_bounds=_DELTA_BOUNDS):
    """(theta, delta, value) jointly maximizing H over equities and the CDS.

    Outer bounded scalar minimization of -max_theta H, then a short
    finite-difference Newton polish of the delta first-order condition.
    """

    def profile(delta):
        _, val = _theta_newton(inp, delta)
        return val

    res = minimize_scalar(
        lambda d: -profile(d), bounds=delta_bounds, method="bounded",
        options={"xatol": 1e-10, "maxiter": 400},
    )
    delta = float(res.x)

    h = 1e-6 * max(1.0, abs(delta))
    for _ in range(8):
        f_plus = profile(delta + h)
        f_minus = profile(delta - h)
        f_mid = profile(delta)
        d1 = (f_plus - f_minus) / (2.0 * h)
        d2 = (f_plus - 2.0 * f_mid + f_minus) / h**2
        if d2 >= -1e-300:
            break
        step = -d1 / d2
        if not np.isfinite(step) or abs(step) > 1.0:
            break
        delta += step
        if abs(step) < 1e-12 * max(1.0, abs(delta)):
            break

    theta, val = _theta_newton(inp, delta)
    return theta, delta, val
