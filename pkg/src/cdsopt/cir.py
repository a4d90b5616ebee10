"""Affine survival transforms for the CIR factor.

For dX = kappa (theta - X) dt + xi sqrt(X) dW and an affine intensity
c0 + c1 * X, the conditional Laplace functional

    D(u, y) = E[ exp(-int_0^u (c0 + c1 X_s) ds) | X_0 = y ]

is exponential-affine, D(u, y) = A(u) exp(-B(u) y).  The pair (A, B) is
obtained here by integrating the scalar Riccati system

    B' = c1 - kappa B - 0.5 xi^2 B^2,     B(0) = 0,
    (log A)' = -c0 - kappa theta B,       A(0) = 1,

with a classic fourth-order explicit scheme and tabulating on a dense grid
with monotone cubic interpolation between nodes.  The textbook hyperbolic
closed form is kept as an independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from .model import MeasureChangeError, ModelError, ModelSpec, NumericalError

__all__ = [
    "CirParams",
    "AffineTransform",
    "ptilde_params",
    "build_transform",
    "survival_transform",
    "closed_form_transform",
    "cir_mean",
]

_DEFAULT_STEP = 1e-3
_DEFAULT_NODES = 2001


@dataclass(frozen=True)
class CirParams:
    """CIR parameters plus the affine intensity evaluated under one measure."""

    kappa: float
    theta: float
    xi: float
    intensity_slope: float
    intensity_level: float = 0.0

    def __post_init__(self):
        if self.kappa <= 0.0:
            raise ModelError("kappa must be positive")
        if 2.0 * self.kappa * self.theta < self.xi**2 - 1e-15:
            raise ModelError("Feller condition 2*kappa*theta >= xi^2 violated")

    def intensity(self, y):
        return self.intensity_level + self.intensity_slope * np.asarray(y, float)


def ptilde_params(spec: ModelSpec) -> CirParams:
    """CIR parameters of the factor under the spot pricing measure.

    Only defined for the affine family; raises MeasureChangeError when the
    implied mean reversion is nonpositive (the factor would explode).
    """
    fam = spec.cir
    if fam is None:
        raise ModelError("ptilde_params needs a spec from the affine CIR family")
    kappa_t, theta_t = fam.ptilde_kappa_theta()
    if kappa_t <= 0.0:
        raise MeasureChangeError(f"kappa_tilde = {kappa_t:.6f} <= 0")
    return CirParams(
        kappa=kappa_t, theta=theta_t, xi=fam.xi,
        intensity_slope=fam.gamma_tilde1, intensity_level=fam.gamma_tilde0,
    )


@dataclass(frozen=True)
class AffineTransform:
    """Tabulated (A(u), B(u)) with A(0) = 1, B(0) = 0 on u in [0, u_max]."""

    params: CirParams
    u_nodes: np.ndarray
    A_values: np.ndarray
    B_values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "_A_interp", PchipInterpolator(self.u_nodes, self.A_values))
        object.__setattr__(self, "_B_interp", PchipInterpolator(self.u_nodes, self.B_values))

    @property
    def u_max(self) -> float:
        return float(self.u_nodes[-1])

    def A(self, u):
        return self._A_interp(u)

    def B(self, u):
        return self._B_interp(u)

    def values(self, u):
        return self.A(u), self.B(u)

    def survival(self, u, y):
        """D(u, y) = A(u) exp(-B(u) y); broadcasts over u and y."""
        u = np.asarray(u, float)
        y = np.asarray(y, float)
        out = self.A(u) * np.exp(-self.B(u) * y)
        return float(out) if out.ndim == 0 else out

    def riccati_residuals(self, n_probe: int = 512):
        """Sup-norm defects of the tabulated pair in the defining ODE system.

        Derivatives are taken from the interpolants at probe points strictly
        inside the tabulation range.
        """
        p = self.params
        u = np.linspace(self.u_nodes[0], self.u_nodes[-1], n_probe + 2)[1:-1]
        dB = self._B_interp.derivative()(u)
        B = self.B(u)
        res_B = np.max(np.abs(dB - (p.intensity_slope - p.kappa * B - 0.5 * p.xi**2 * B**2)))
        dA = self._A_interp.derivative()(u)
        A = self.A(u)
        res_A = np.max(np.abs(dA / A + p.intensity_level + p.kappa * p.theta * B))
        return float(res_B), float(res_A)


def build_transform(params: CirParams, u_max: float,
                    step: float = _DEFAULT_STEP,
                    n_nodes: Optional[int] = None) -> AffineTransform:
    """Integrate the Riccati system on [0, u_max] and tabulate the results."""
    if u_max <= 0.0:
        raise ModelError("u_max must be positive")
    if n_nodes is None:
        n_nodes = max(_DEFAULT_NODES, int(np.ceil(u_max / step)) + 1)
    u = np.linspace(0.0, u_max, n_nodes)
    h = u[1] - u[0]
    kap, th, xi = params.kappa, params.theta, params.xi
    c0, c1 = params.intensity_level, params.intensity_slope

    def rhs(state):
        B, logA = state
        return np.array([c1 - kap * B - 0.5 * xi**2 * B**2, -c0 - kap * th * B])

    B = np.empty(n_nodes)
    logA = np.empty(n_nodes)
    state = np.array([0.0, 0.0])
    B[0], logA[0] = state
    for i in range(1, n_nodes):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * h * k1)
        k3 = rhs(state + 0.5 * h * k2)
        k4 = rhs(state + h * k3)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(state)):
            raise NumericalError(f"Riccati step failed at u = {u[i]:.6f} (step {i})")
        B[i], logA[i] = state
    return AffineTransform(params=params, u_nodes=u, A_values=np.exp(logA), B_values=B)


def survival_transform(params: CirParams, u, *, u_max: Optional[float] = None,
                       step: float = _DEFAULT_STEP):
    """(A(u), B(u)) at a single horizon or an array of horizons."""
    top = float(np.max(u)) if u_max is None else u_max
    transform = build_transform(params, max(top, step), step=step)
    A, B = transform.values(u)
    if np.ndim(u) == 0:
        return float(A), float(B)
    return A, B


def closed_form_transform(params: CirParams, u):
    """Hyperbolic closed form for (A, B); cross-check path only.

    Valid for a pure-slope intensity (c1 >= 0); a constant intensity level is
    folded in as an extra exp(-c0 u) factor on A.
    """
    kap, th, xi = params.kappa, params.theta, params.xi
    lam = params.intensity_slope
    u = np.asarray(u, float)
    if lam == 0.0:
        A = np.exp(-params.intensity_level * u)
        B = np.zeros_like(u)
        return A, B
    h = np.sqrt(kap**2 + 2.0 * lam * xi**2)
    em1 = np.expm1(h * u)
    denom = (h + kap) * em1 + 2.0 * h
    B = 2.0 * lam * em1 / denom
    A = (2.0 * h * np.exp(0.5 * (h + kap) * u) / denom) ** (2.0 * kap * th / xi**2)
    A = A * np.exp(-params.intensity_level * u)
    return A, B


def cir_mean(params: CirParams, t: float, x: float, u: float) -> float:
    """E[X_u | X_t = x] = x e^{-kappa (u-t)} + theta (1 - e^{-kappa (u-t)}).

    Always bounded by max(x, theta).
    """
    if u < t:
        raise ModelError("cir_mean needs u >= t")
    decay = np.exp(-params.kappa * (u - t))
    mean = x * decay + params.theta * (1.0 - decay)
    assert mean <= max(x, params.theta) + 1e-12 * max(1.0, abs(x))
    return float(mean)
