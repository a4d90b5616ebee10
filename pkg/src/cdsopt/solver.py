"""Finite-difference solvers for the certainty-equivalent PDEs (d = 1).

All four value problems share one backward theta-scheme engine: a
Crank-Nicolson step in time, second-order central space differences with
first-order upwinding of the advection term wherever the cell Peclet number
exceeds 2, and a per-step Newton iteration on the (possibly nonlinear)
source.  The four problem flavors differ only in the linear drift and the
source term:

  complete       0 = G_t + (1/2 A d_xx + b~ d_x) G + gt (psi - G) + Q_c / alpha
  incomplete     0 = G_t + (1/2 A d_xx + b- d_x) G + gt (psi - G) + Q_c / alpha
                     - (alpha/2) A (1 - rho'rho) G_x^2 + R_H(sigma_r, G, G_x)
  no-CDS         0 = G_t + (1/2 A d_xx + b d_x) G - (alpha/2) A G_x^2
                     + gamma / alpha + H_equity(G, G_x)
  localized      0 = G_t + (1/2 A d_xx + b d_x) G - (alpha/2) A G_x^2
                     + chi (gamma / alpha + H_mode(G, G_x)),  G(T) = chi phi

Truncation boundaries: the localized problem uses zero Dirichlet data (the
mollifier chi vanishes there); the experiment solvers default to a
second-derivative-zero extrapolation closure, whose error enters through
A * G_xx and is negligible at a small x_min for square-root diffusions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from . import hamiltonian as ham
from .model import GridSpec, ModelError, ModelSpec, NumericalError

__all__ = [
    "Mollifier",
    "ValueSurface",
    "PolicySurface",
    "solve_linear_complete",
    "solve_semilinear_incomplete",
    "solve_localized",
    "solve_nocds_benchmark",
    "extract_policies",
]

_PECLET_SWITCH = 2.0
_NEWTON_TOL = 1e-10
_NEWTON_MAX_ITER = 30
_MAX_HALVINGS = 6
_FD_STEP = 1e-7


def _smoothstep(u):
    """Quintic smoothstep: C^2 transition from 0 to 1 on [0, 1]."""
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u**2)


@dataclass(frozen=True)
class Mollifier:
    """Cutoff equal to 1 on an inner interval, 0 outside an outer interval."""

    outer_lo: float
    outer_hi: float
    inner_lo: float
    inner_hi: float

    def __post_init__(self):
        if not (self.outer_lo < self.inner_lo < self.inner_hi < self.outer_hi):
            raise ModelError("mollifier intervals must nest strictly")

    @classmethod
    def for_domain_index(cls, n: int) -> "Mollifier":
        """Transition annuli of the nested family: 1 on (1/(n-1), n-1), 0 outside (1/n, n)."""
        if n < 2:
            raise ModelError("nested domains need n >= 2")
        return cls(outer_lo=1.0 / n, outer_hi=float(n),
                   inner_lo=1.0 / (n - 1), inner_hi=float(n - 1))

    @classmethod
    def for_interval(cls, x_min: float, x_max: float, fraction: float = 0.1) -> "Mollifier":
        width = fraction * (x_max - x_min)
        return cls(outer_lo=x_min, outer_hi=x_max,
                   inner_lo=x_min + width, inner_hi=x_max - width)

    def __call__(self, x):
        x = np.asarray(x, float)
        up = _smoothstep((x - self.outer_lo) / (self.inner_lo - self.outer_lo))
        down = _smoothstep((self.outer_hi - x) / (self.outer_hi - self.inner_hi))
        return np.minimum(up, down)


@dataclass
class ValueSurface:
    """Certainty-equivalent surface with gradient and scheme metadata."""

    t_nodes: np.ndarray
    x_nodes: np.ndarray
    values: np.ndarray            # (nt + 1, nx)
    gradient: np.ndarray          # (nt + 1, nx), central differences of values
    mode: str                     # complete | incomplete | nocds | localized-*
    scheme: dict = field(default_factory=dict)
    max_interior_residual: float = np.nan
    chi: Optional[np.ndarray] = None
    regime: Optional[str] = None
    sigma_r_curve: object = None

    def value_at(self, t: float, x) -> np.ndarray:
        return _bilinear(self.t_nodes, self.x_nodes, self.values, t, x)

    def gradient_at(self, t: float, x) -> np.ndarray:
        return _bilinear(self.t_nodes, self.x_nodes, self.gradient, t, x)

    def to_csv(self, path, policies: Optional["PolicySurface"] = None) -> None:
        header = ["t", "x", "G", "dGdx"]
        k = 0
        if policies is not None:
            k = policies.theta.shape[2]
            header += [f"theta_hat_{i + 1}" for i in range(k)]
            if policies.delta is not None:
                header += ["delta_hat"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i, t in enumerate(self.t_nodes):
                for j, x in enumerate(self.x_nodes):
                    row = [f"{t:.12g}", f"{x:.12g}",
                           f"{self.values[i, j]:.12g}", f"{self.gradient[i, j]:.12g}"]
                    if policies is not None:
                        row += [f"{policies.theta[i, j, kk]:.12g}" for kk in range(k)]
                        if policies.delta is not None:
                            row += [f"{policies.delta[i, j]:.12g}"]
                    writer.writerow(row)


@dataclass
class PolicySurface:
    """Optimal equity weights (and CDS weight when present) on the grid."""

    t_nodes: np.ndarray
    x_nodes: np.ndarray
    theta: np.ndarray                      # (nt + 1, nx, k)
    delta: Optional[np.ndarray] = None     # (nt + 1, nx)
    mode: str = ""


def _bilinear(t_nodes, x_nodes, table, t, x):
    t = float(t)
    x_arr = np.atleast_1d(np.asarray(x, float))
    i = np.searchsorted(t_nodes, t) - 1
    i = int(np.clip(i, 0, len(t_nodes) - 2))
    wt = (t - t_nodes[i]) / (t_nodes[i + 1] - t_nodes[i])
    wt = np.clip(wt, 0.0, 1.0)
    row = (1.0 - wt) * table[i] + wt * table[i + 1]
    out = np.interp(x_arr, x_nodes, row)
    return float(out[0]) if np.ndim(x) == 0 else out


def _gradient_central(values: np.ndarray, dx: float) -> np.ndarray:
    grad = np.empty_like(values)
    grad[:, 1:-1] = (values[:, 2:] - values[:, :-2]) / (2.0 * dx)
    grad[:, 0] = (values[:, 1] - values[:, 0]) / dx
    grad[:, -1] = (values[:, -1] - values[:, -2]) / dx
    return grad


class _Stepper:
    """Backward theta-scheme with per-step Newton on the source term."""

    def __init__(self, spec: ModelSpec, grid: GridSpec, drift_key: str,
                 source_fn: Callable, boundary: str, curve=None,
                 theta_weight: float = 0.5, newton_tol: float = _NEWTON_TOL):
        self.spec = spec
        self.grid = grid
        self.x = grid.x_nodes
        self.dx = grid.dx
        self.drift_key = drift_key       # "b" | "b_tilde" | "b_bar"
        self.source_fn = source_fn       # (table, g, p) -> array
        self.boundary = boundary         # "extrapolate" | "dirichlet0"
        self.curve = curve
        self.w = theta_weight
        self.newton_tol = newton_tol
        self.newton_counts: list[int] = []
        self.halvings = 0
        self._table_cache: dict[float, ham.CoefficientTable] = {}
        if boundary not in ("extrapolate", "dirichlet0"):
            raise ModelError(f"unknown boundary treatment {boundary!r}")

    # -- coefficient plumbing -------------------------------------------

    def table(self, t: float) -> ham.CoefficientTable:
        tab = self._table_cache.get(t)
        if tab is None:
            tab = ham.build_table(self.spec, t, self.x, curve=self.curve)
            if len(self._table_cache) > 4:
                self._table_cache.clear()
            self._table_cache[t] = tab
        return tab

    def _drift(self, tab: ham.CoefficientTable) -> np.ndarray:
        return getattr(tab, self.drift_key) if self.drift_key != "b" else tab.b

    # -- discrete operators ----------------------------------------------

    def _pad(self, u_int: np.ndarray) -> np.ndarray:
        """Full grid values from interior unknowns via the boundary closure."""
        full = np.empty(len(self.x))
        full[1:-1] = u_int
        if self.boundary == "dirichlet0":
            full[0] = 0.0
            full[-1] = 0.0
        else:
            full[0] = 2.0 * full[1] - full[2]
            full[-1] = 2.0 * full[-2] - full[-3]
        return full

    def _spatial(self, tab: ham.CoefficientTable, full: np.ndarray) -> np.ndarray:
        """N(t, G) at interior nodes: (1/2) A G_xx + c G_x + S(t, x, G, G_x)."""
        dx = self.dx
        u = full
        g_xx = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / dx**2
        g_x_c = (u[2:] - u[:-2]) / (2.0 * dx)
        A = tab.A[1:-1]
        c = self._drift(tab)[1:-1]
        pe = np.abs(c) * dx / np.maximum(A, 1e-300)
        up = pe > _PECLET_SWITCH
        g_x_up = np.where(c >= 0.0, (u[2:] - u[1:-1]) / dx, (u[1:-1] - u[:-2]) / dx)
        adv = c * np.where(up, g_x_up, g_x_c)
        src = self.source_fn(tab, u[1:-1], g_x_c)
        return 0.5 * A * g_xx + adv + src

    def _jacobian(self, tab: ham.CoefficientTable, full: np.ndarray):
        """Banded Jacobian of the interior spatial operator (sub, diag, sup)."""
        dx = self.dx
        n = len(self.x) - 2
        A = tab.A[1:-1]
        c = self._drift(tab)[1:-1]
        diff = 0.5 * A / dx**2
        pe = np.abs(c) * dx / np.maximum(A, 1e-300)
        up = pe > _PECLET_SWITCH
        # advection stencil coefficients
        adv_sub = np.where(up, np.where(c >= 0, 0.0, -c / dx), -c / (2.0 * dx))
        adv_diag = np.where(up, np.where(c >= 0, -c / dx, c / dx), 0.0)
        adv_sup = np.where(up, np.where(c >= 0, c / dx, 0.0), c / (2.0 * dx))

        g = full[1:-1]
        p = (full[2:] - full[:-2]) / (2.0 * dx)
        base = self.source_fn(tab, g, p)
        hg = _FD_STEP * np.maximum(1.0, np.abs(g))
        hp = _FD_STEP * np.maximum(1.0, np.abs(p))
        s_g = (self.source_fn(tab, g + hg, p) - base) / hg
        s_p = (self.source_fn(tab, g, p + hp) - base) / hp

        sub = diff + adv_sub - s_p / (2.0 * dx)
        diag = -2.0 * diff + adv_diag + s_g
        sup = diff + adv_sup + s_p / (2.0 * dx)
        return sub, diag, sup

    def _step(self, u_next_full: np.ndarray, t_now: float, t_next: float,
              depth: int = 0) -> np.ndarray:
        """One implicit step from the slice at t_next back to t_now."""
        dt = t_next - t_now
        tab_next = self.table(t_next)
        tab_now = self.table(t_now)
        expl = self._spatial(tab_next, u_next_full)
        u_int = u_next_full[1:-1].copy()
        scale = max(1.0, float(np.max(np.abs(u_next_full))))
        converged = False
        for it in range(1, _NEWTON_MAX_ITER + 1):
            full = self._pad(u_int)
            resid = (u_next_full[1:-1] - u_int) / dt + self.w * self._spatial(tab_now, full) \
                + (1.0 - self.w) * expl
            sub, diag, sup = self._jacobian(tab_now, full)
            sub, diag, sup = self.w * sub, self.w * diag - 1.0 / dt, self.w * sup
            if self.boundary == "extrapolate":
                # fold the boundary closure into the edge rows
                diag[0] += 2.0 * sub[0]
                sup[0] -= sub[0]
                sub[0] = 0.0
                diag[-1] += 2.0 * sup[-1]
                sub[-1] -= sup[-1]
                sup[-1] = 0.0
            band = np.zeros((3, len(u_int)))
            band[0, 1:] = sup[:-1]
            band[1, :] = diag
            band[2, :-1] = sub[1:]
            try:
                delta = solve_banded((1, 1), band, -resid)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"banded solve failed at t = {t_now:.6f}") from exc
            u_int = u_int + delta
            if not np.all(np.isfinite(u_int)):
                break
            if np.max(np.abs(delta)) <= self.newton_tol * scale:
                converged = True
                self.newton_counts.append(it)
                break
        if not converged:
            if depth >= _MAX_HALVINGS:
                raise NumericalError(
                    f"Newton failed at t = {t_now:.6f} after {_MAX_HALVINGS} halvings "
                    f"(last correction {np.max(np.abs(delta)):.3e})"
                )
            self.halvings += 1
            t_mid = 0.5 * (t_now + t_next)
            u_mid = self._step(u_next_full, t_mid, t_next, depth + 1)
            return self._step(u_mid, t_now, t_mid, depth + 1)
        return self._pad(u_int)

    def run(self, terminal_full: np.ndarray) -> np.ndarray:
        t = self.grid.t_nodes
        nt = len(t) - 1
        out = np.empty((nt + 1, len(self.x)))
        out[nt] = terminal_full
        cur = terminal_full
        for m in range(nt - 1, -1, -1):
            cur = self._step(cur, float(t[m]), float(t[m + 1]))
            out[m] = cur
        return out

    def interior_residual(self, values: np.ndarray) -> float:
        """Central-difference defect of the stored surface in the PDE."""
        t = self.grid.t_nodes
        worst = 0.0
        for m in range(1, len(t) - 1):
            tab = self.table(float(t[m]))
            g_t = (values[m + 1] - values[m - 1])[1:-1] / (t[m + 1] - t[m - 1])
            worst = max(worst, float(np.max(np.abs(g_t + self._spatial(tab, values[m])))))
        return worst


def _finish(stepper: _Stepper, values: np.ndarray, mode: str, *,
            chi=None, regime=None, curve=None, boundary: str) -> ValueSurface:
    grad = _gradient_central(values, stepper.dx)
    counts = stepper.newton_counts
    surface = ValueSurface(
        t_nodes=stepper.grid.t_nodes, x_nodes=stepper.grid.x_nodes,
        values=values, gradient=grad, mode=mode,
        scheme={
            "theta_weight": stepper.w,
            "boundary": boundary,
            "newton_iterations_max": int(max(counts)) if counts else 0,
            "newton_iterations_mean": float(np.mean(counts)) if counts else 0.0,
            "time_step_halvings": stepper.halvings,
        },
        chi=chi, regime=regime, sigma_r_curve=curve,
    )
    surface.max_interior_residual = stepper.interior_residual(values)
    surface.scheme["max_interior_residual"] = surface.max_interior_residual
    return surface


def _terminal(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    return np.asarray(spec.claim(x), float).reshape(len(x))


def solve_linear_complete(spec: ModelSpec, grid: GridSpec, curve=None,
                          boundary: str = "extrapolate",
                          theta_weight: float = 0.5) -> ValueSurface:
    """Complete-market value surface from the linear parabolic equation."""
    if spec.mode != "complete":
        raise ModelError("solve_linear_complete needs a complete-mode spec")

    def source(tab, g, p):
        sl = slice(1, -1) if len(g) == len(tab.x) - 2 else slice(None)
        return tab.gamma_tilde[sl] * (tab.psi[sl] - g) + tab.qc[sl] / tab.alpha

    stepper = _Stepper(spec, grid, "b_bar", source, boundary, curve=curve,
                       theta_weight=theta_weight)
    values = stepper.run(_terminal(spec, grid.x_nodes))
    return _finish(stepper, values, "complete", curve=curve, boundary=boundary)


def solve_semilinear_incomplete(spec: ModelSpec, grid: GridSpec, curve,
                                boundary: str = "extrapolate",
                                theta_weight: float = 0.5,
                                newton_tol: float = _NEWTON_TOL) -> ValueSurface:
    """Incomplete-market value surface (quadratic gradient + residual source)."""
    if spec.mode != "incomplete":
        raise ModelError("solve_semilinear_incomplete needs an incomplete-mode spec")
    spec.validate_at(0.0, float(grid.x_nodes[len(grid.x_nodes) // 2]))
    regime = curve.regime(grid) if curve is not None else "zero"

    def source(tab, g, p):
        sl = slice(1, -1) if len(g) == len(tab.x) - 2 else slice(None)
        quad = -0.5 * tab.alpha * tab.A[sl] * (1.0 - tab.rho_sq[sl]) * p**2
        lin = tab.gamma_tilde[sl] * (tab.psi[sl] - g) + tab.qc[sl] / tab.alpha
        if regime == "zero":
            return lin + quad
        resid = _sliced_residual(tab, g, p, sl, regime)
        return lin + quad + resid

    stepper = _Stepper(spec, grid, "b_bar", source, boundary, curve=curve,
                       theta_weight=theta_weight, newton_tol=newton_tol)
    values = stepper.run(_terminal(spec, grid.x_nodes))
    return _finish(stepper, values, "incomplete", regime=regime, curve=curve,
                   boundary=boundary)


def _sliced_residual(tab, g, p, sl, regime):
    sub = _slice_table(tab, sl)
    return ham.residual_h_array(sub, g, p, regime)


def _slice_table(tab: ham.CoefficientTable, sl) -> ham.CoefficientTable:
    if sl == slice(None):
        return tab
    kw = {}
    for name in ("x", "a", "A", "b", "gamma", "gamma_tilde", "psi", "nu_tilde",
                 "sigma_r", "qc", "k3", "l_mu", "l_ups", "m_ups", "mu_mu",
                 "ups_ups", "a_nu", "rho_sq", "sol_mu", "sol_ell", "sol_ups"):
        kw[name] = getattr(tab, name)[sl]
    return ham.CoefficientTable(t=tab.t, alpha=tab.alpha, **kw)


def solve_nocds_benchmark(spec: ModelSpec, grid: GridSpec,
                          boundary: str = "extrapolate",
                          theta_weight: float = 0.5) -> ValueSurface:
    """Equity-only benchmark surface (no CDS market available)."""

    def source(tab, g, p):
        sl = slice(1, -1) if len(g) == len(tab.x) - 2 else slice(None)
        sub = _slice_table(tab, sl)
        return (
            -0.5 * sub.alpha * sub.A * p**2
            + sub.gamma / sub.alpha
            + ham.reduced_nocds_array(sub, g, p)
        )

    stepper = _Stepper(spec, grid, "b", source, boundary,
                       theta_weight=theta_weight)
    values = stepper.run(_terminal(spec, grid.x_nodes))
    return _finish(stepper, values, "nocds", boundary=boundary)


def solve_localized(spec: ModelSpec, grid: Optional[GridSpec] = None,
                    n: Optional[int] = None, curve=None,
                    dt: float = 5e-3, dx: float = 5e-3,
                    theta_weight: float = 0.5,
                    mollifier: Optional[Mollifier] = None) -> ValueSurface:
    """Localized value surface on a nested domain with mollified sources.

    Either pass a grid whose ``domain_index`` is set, or the index ``n``
    itself (the grid is then built on (1/n, n) with spacings close to
    (dt, dx)).  The source is chi * (gamma / alpha + H(g, p)) with zero
    Dirichlet data and terminal chi * phi, the quadratic gradient term
    staying outside the cutoff.  Passing an explicit ``mollifier`` overrides
    the nested-family default (used by the disabled-cutoff cross-check).
    """
    if grid is None:
        if n is None:
            raise ModelError("solve_localized needs a grid or a domain index")
        grid = GridSpec.nested(n, spec.horizon, dt, dx)
    if mollifier is not None:
        chi = mollifier(grid.x_nodes)
    else:
        if grid.domain_index is None and n is None:
            raise ModelError("localized grids must carry their domain index")
        n_idx = grid.domain_index if grid.domain_index is not None else n
        if n_idx < 2:
            raise ModelError("localization needs n >= 2")
        chi = Mollifier.for_domain_index(n_idx)(grid.x_nodes)
    regime = curve.regime(grid) if curve is not None else None

    if spec.mode == "complete":
        reduced = ham.reduced_complete_array
        mode = "localized-complete"
    else:
        if curve is None:
            raise ModelError("localized incomplete solves need the CDS curve")
        reduced = lambda tab, g, p: ham.reduced_incomplete_array(tab, g, p, regime)
        mode = "localized-incomplete"

    def source(tab, g, p):
        sl = slice(1, -1) if len(g) == len(tab.x) - 2 else slice(None)
        sub = _slice_table(tab, sl)
        return (
            -0.5 * sub.alpha * sub.A * p**2
            + chi[sl] * (sub.gamma / sub.alpha + reduced(sub, g, p))
        )

    stepper = _Stepper(spec, grid, "b", source, "dirichlet0", curve=curve,
                       theta_weight=theta_weight)
    terminal = chi * _terminal(spec, grid.x_nodes)
    values = stepper.run(terminal)
    return _finish(stepper, values, mode, chi=chi, regime=regime, curve=curve,
                   boundary="dirichlet0")


def extract_policies(surface: ValueSurface, spec: ModelSpec, curve=None) -> PolicySurface:
    """Optimal positions at every grid node from (G, grad G)."""
    curve = curve if curve is not None else surface.sigma_r_curve
    t_nodes, x_nodes = surface.t_nodes, surface.x_nodes
    nt, nx = surface.values.shape
    k = spec.dim_equities
    theta = np.empty((nt, nx, k))
    delta: Optional[np.ndarray] = np.empty((nt, nx))
    base_mode = surface.mode.replace("localized-", "")
    regime = surface.regime
    if base_mode == "incomplete" and regime is None:
        if curve is None:
            raise ModelError("incomplete policies need the CDS curve")
        regime = curve.regime(GridSpec(t_nodes, x_nodes))
    for i, t in enumerate(t_nodes):
        tab = ham.build_table(spec, float(t), x_nodes, curve=curve)
        g = surface.values[i]
        p = surface.gradient[i]
        if base_mode == "complete":
            th, dl = ham.policies_complete_array(tab, g, p)
        elif base_mode == "incomplete":
            th, dl = ham.policies_incomplete_array(tab, g, p, regime)
        elif base_mode == "nocds":
            th, dl = ham.policy_nocds_array(tab, g, p), None
        else:
            raise ModelError(f"no policy extraction for mode {surface.mode!r}")
        theta[i] = th
        if dl is None:
            delta = None
        else:
            delta[i] = dl
    return PolicySurface(t_nodes=t_nodes, x_nodes=x_nodes, theta=theta,
                         delta=delta, mode=surface.mode)
