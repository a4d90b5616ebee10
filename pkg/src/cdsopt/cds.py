"""Rolling-CDS curve: protection value, annuity, fair spread, and volatility.

Under the spot pricing measure the protection leg and annuity are

    u(s, y) = 1 - E~[exp(-int_s^Tmat gamma~ dr) | X_s = y]
    v(s, y) = E~[int_s^Tmat exp(-int_s^r gamma~ ) dr | X_s = y]

and the per-dollar rolling CDS wealth process has volatility loading

    sigma_r(s, y) = u(s, y) * d/dy log(u(s, y) / v(s, y)).

In the affine CIR family both legs come from the survival transform
D(u, y) = A(u) exp(-B(u) y):  u = 1 - D(Tmat - s, y) and v is a time
integral of D, evaluated by composite Simpson quadrature.  sigma_r is then
available in closed form; a finite-difference fallback covers the generic
definition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cir import AffineTransform, build_transform, ptilde_params
from .model import GridSpec, ModelError, ModelSpec, NumericalError

__all__ = [
    "CdsCurve",
    "build_curve",
    "sigma_r",
    "sigma_r_finite_difference",
    "rolling_cds_coefficients",
    "pde_residuals",
]

_SIMPSON_INTERVALS = 512


def _simpson_weights(n_intervals: int, h: float) -> np.ndarray:
    """Composite Simpson weights on n_intervals (even) uniform subintervals."""
    if n_intervals % 2:
        raise ValueError("Simpson rule needs an even interval count")
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


@dataclass
class CdsCurve:
    """Protection/annuity/spread/volatility of the rolling CDS on [0, Tmat]."""

    spec: ModelSpec
    transform: AffineTransform
    maturity: float
    _tables: dict = field(default_factory=dict, repr=False)

    # -- core evaluations ---------------------------------------------------

    def _quadrature(self, s: float, y: np.ndarray):
        """Simpson quadrature of D and B*D over remaining life [0, Tmat - s].

        Returns (annuity, d/dy annuity) evaluated at each y (annuity
        derivative is -integral of B*D).
        """
        u_life = self.maturity - s
        if u_life < 0:
            raise ModelError(f"curve evaluated past maturity (s = {s})")
        if u_life == 0.0:
            z = np.zeros_like(y)
            return z, z
        w_nodes = np.linspace(0.0, u_life, _SIMPSON_INTERVALS + 1)
        wts = _simpson_weights(_SIMPSON_INTERVALS, w_nodes[1] - w_nodes[0])
        A = np.asarray(self.transform.A(w_nodes))
        B = np.asarray(self.transform.B(w_nodes))
        D = A[:, None] * np.exp(-np.outer(B, y))          # (nw, ny)
        annuity = wts @ D
        d_annuity = -(wts * B) @ D
        if np.any(~np.isfinite(annuity)):
            raise NumericalError(f"annuity quadrature failed at s = {s}")
        return annuity, d_annuity

    def u_tilde(self, s: float, y):
        """Protection value, in [0, 1)."""
        y = np.asarray(y, float)
        u_life = self.maturity - s
        out = 1.0 - np.asarray(self.transform.survival(u_life, y))
        return float(out) if out.ndim == 0 else out

    def v_tilde(self, s: float, y):
        """Annuity (value of a unit premium stream until default or maturity)."""
        y1 = np.atleast_1d(np.asarray(y, float))
        annuity, _ = self._quadrature(s, y1)
        return float(annuity[0]) if np.ndim(y) == 0 else annuity

    def spread(self, s: float, y):
        """Fair spread u/v; positive before maturity."""
        y1 = np.atleast_1d(np.asarray(y, float))
        annuity, _ = self._quadrature(s, y1)
        if np.any(annuity <= 0.0):
            raise ModelError(f"degenerate annuity at s = {s}")
        out = np.atleast_1d(self.u_tilde(s, y1)) / annuity
        return float(out[0]) if np.ndim(y) == 0 else out

    def sigma_r(self, s: float, y):
        """Volatility loading u * d/dy log(u/v), closed form in the affine family.

        With D = D(Tmat - s, y) and B = B(Tmat - s):
            du/dy = B * D,   dv/dy = -int B(w) D(w, y) dw,
            sigma_r = B * D + u * (int B D / int D).
        """
        y1 = np.atleast_1d(np.asarray(y, float))
        u_life = self.maturity - s
        B_here = float(self.transform.B(u_life))
        D_here = np.asarray(self.transform.survival(u_life, y1))
        if B_here == 0.0 and self.transform.params.intensity_slope == 0.0:
            out = np.zeros_like(y1)  # state-independent intensity: flat legs
            return float(out[0]) if np.ndim(y) == 0 else out
        annuity, d_annuity = self._quadrature(s, y1)
        if np.any(annuity <= 0.0):
            raise ModelError(f"degenerate annuity at s = {s}")
        u_val = 1.0 - D_here
        out = B_here * D_here + u_val * (-d_annuity / annuity)
        return float(out[0]) if np.ndim(y) == 0 else out

    def sigma_r_table(self, t_nodes: np.ndarray, x_nodes: np.ndarray) -> np.ndarray:
        """(nt, nx) table of sigma_r, cached per node-array pair."""
        key = (t_nodes.tobytes(), x_nodes.tobytes())
        tab = self._tables.get(key)
        if tab is None:
            tab = np.vstack([self.sigma_r(float(s), x_nodes) for s in t_nodes])
            self._tables[key] = tab
        return tab

    def regime(self, grid: GridSpec, zero_tol: float = 1e-12) -> str:
        """Classify |sigma_r| on the grid as "zero" or "positive".

        Mixed curves (vanishing somewhere but not everywhere) are rejected:
        the solvable cases require one uniform regime.
        """
        tab = self.sigma_r_table(grid.t_nodes, grid.x_nodes)
        mags = np.abs(tab)
        if np.all(mags <= zero_tol):
            return "zero"
        if np.all(mags > zero_tol):
            return "positive"
        raise ModelError(
            "sigma_r changes regime on the grid "
            f"(min {mags.min():.3e}, max {mags.max():.3e}); mixed curves are not supported"
        )

    # -- export -------------------------------------------------------------

    def to_csv(self, path, s_nodes, y_nodes) -> None:
        """Dump the curve on a grid; columns s, y, u_tilde, v_tilde, spread, sigma_r."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["s", "y", "u_tilde", "v_tilde", "spread", "sigma_r"])
            for s in np.asarray(s_nodes, float):
                y = np.asarray(y_nodes, float)
                u_vals = np.atleast_1d(self.u_tilde(s, y))
                annuity, d_annuity = self._quadrature(s, y)
                sig = np.atleast_1d(self.sigma_r(s, y))
                for j, yj in enumerate(y):
                    spr = u_vals[j] / annuity[j] if annuity[j] > 0 else np.nan
                    writer.writerow([
                        f"{s:.12g}", f"{yj:.12g}", f"{u_vals[j]:.12g}",
                        f"{annuity[j]:.12g}", f"{spr:.12g}", f"{sig[j]:.12g}",
                    ])


def build_curve(spec: ModelSpec, transform: Optional[AffineTransform] = None) -> CdsCurve:
    """Build the rolling-CDS curve for an affine-family spec."""
    if spec.cir is None:
        raise ModelError("build_curve needs a spec from the affine CIR family")
    if transform is None:
        transform = build_transform(ptilde_params(spec), spec.cds_maturity)
    if transform.u_max < spec.cds_maturity - 1e-12:
        raise ModelError("transform tabulation does not reach the CDS maturity")
    return CdsCurve(spec=spec, transform=transform, maturity=spec.cds_maturity)


def sigma_r(curve: CdsCurve, s: float, y):
    """Module-level alias of :meth:`CdsCurve.sigma_r`."""
    return curve.sigma_r(s, y)


def sigma_r_finite_difference(curve: CdsCurve, s: float, y, h: Optional[float] = None):
    """Generic sigma_r = u * d/dy log(u/v) by central differences of the legs."""
    y = np.asarray(y, float)
    if h is None:
        h = 1e-5 * np.maximum(1.0, np.abs(y))
    up, dn = y + h, y - h
    log_ratio_up = np.log(curve.u_tilde(s, up) / curve.v_tilde(s, up))
    log_ratio_dn = np.log(curve.u_tilde(s, dn) / curve.v_tilde(s, dn))
    out = curve.u_tilde(s, y) * (log_ratio_up - log_ratio_dn) / (2.0 * h)
    return float(out) if np.ndim(out) == 0 else out


def rolling_cds_coefficients(spec: ModelSpec, curve: CdsCurve, s: float, y: float):
    """Pre-default drift, volatility vector, and default jump of the CDS asset.

    drift  = sigma_r' a nu_tilde - gamma_tilde
    vol    = a' sigma_r
    jump   = +1  (the combined loss vector carries the matching -1 entry)
    """
    if s > spec.horizon:
        raise ModelError("coefficients requested past the investment horizon")
    d = spec.dim_factors
    s_r = np.asarray(curve.sigma_r(s, y), float).reshape(d)
    a = np.atleast_2d(np.asarray(spec.diffusion(s, y), float))
    nu_t = np.asarray(spec.risk_premia(s, y), float).reshape(d)
    gam_t = float(spec.intensity_ptilde(s, y))
    drift = float(s_r @ (a @ nu_t)) - gam_t
    vol = a.T @ s_r
    return drift, vol, 1.0


def pde_residuals(curve: CdsCurve, s_nodes, y_nodes):
    """Discrete defects of the legs in their pricing PDEs under the measure change.

    On interior nodes (central differences in s and y):
        protection: 0 = u_s + L~ u - gamma~ (u - 1)
        annuity:    0 = v_s + L~ v - gamma~ v + 1
    where L~ = 0.5 xi^2 y d_yy + kappa~ (theta~ - y) d_y.  The annuity's unit
    source enters with a plus sign, as dictated by its definition as the
    expected discounted premium stream (a running payoff of one).  Returns
    the two sup-norms.
    """
    p = curve.transform.params
    s = np.asarray(s_nodes, float)
    y = np.asarray(y_nodes, float)
    U = np.vstack([np.atleast_1d(curve.u_tilde(si, y)) for si in s])
    V = np.vstack([curve._quadrature(si, y)[0] for si in s])
    ds = s[1] - s[0]
    dy = y[1] - y[0]
    gam_t = p.intensity(y)[None, 1:-1]

    def defects(F, inhom):
        F_s = (F[2:, 1:-1] - F[:-2, 1:-1]) / (2.0 * ds)
        F_y = (F[1:-1, 2:] - F[1:-1, :-2]) / (2.0 * dy)
        F_yy = (F[1:-1, 2:] - 2.0 * F[1:-1, 1:-1] + F[1:-1, :-2]) / dy**2
        yy = y[None, 1:-1]
        gen = 0.5 * p.xi**2 * yy * F_yy + p.kappa * (p.theta - yy) * F_y
        return F_s + gen - gam_t * F[1:-1, 1:-1] - inhom

    res_u = defects(U, -gam_t)           # u_s + Lu - gamma(u - 1) = 0
    res_v = defects(V, -np.ones(1))      # v_s + Lv - gamma v + 1 = 0
    return float(np.max(np.abs(res_u))), float(np.max(np.abs(res_v)))
