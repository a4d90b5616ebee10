"""Post-default certainty equivalent via the affine ansatz.

After default the investor keeps trading the surviving (first) equity in a
default-free market.  For the affine CIR family the certainty equivalent of
that residual problem is affine in the state, psi(s, y) = psi_g(s) +
psi_h(s) y, where the slope solves a scalar Riccati equation backward from
zero terminal data and the intercept integrates kappa * theta times the
slope.  The derivation substitutes the ansatz into the equity-only
no-default value equation; it is accepted only through agreement with a
direct numerical solve of that same PDE (see the tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from .model import ModelError, ModelSpec, NumericalError, make_cir_single_incomplete

__all__ = ["PsiAffine", "build_psi", "riccati_coefficients", "surviving_asset_spec"]

_BLOWUP_LIMIT = 1e8


@dataclass(frozen=True)
class PsiAffine:
    """Tabulated affine value psi(s, y) = psi_g(s) + psi_h(s) * y on [0, T]."""

    s_nodes: np.ndarray
    psi_g: np.ndarray
    psi_h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "_g", PchipInterpolator(self.s_nodes, self.psi_g))
        object.__setattr__(self, "_h", PchipInterpolator(self.s_nodes, self.psi_h))

    def intercept(self, s):
        return self._g(s)

    def slope(self, s):
        return self._h(s)

    def __call__(self, s, y):
        s = np.asarray(s, float)
        y = np.asarray(y, float)
        out = self._g(s) + self._h(s) * y
        return float(out) if out.ndim == 0 else out

    def as_callable(self):
        """Coefficient-style callable psi(t, x) for ModelSpec.post_default."""
        def psi(t, x):
            return self(t, x)
        return psi


def riccati_coefficients(spec: ModelSpec) -> tuple[float, float, float]:
    """(c2, c1, c0) of the slope equation psi_h' = c2 psi_h^2 + c1 psi_h + c0.

    Substituting psi = psi_g(s) + psi_h(s) y into the no-default equity-only
    value PDE for a single surviving asset with mu_1 = y m, Sigma_11 = y q,
    Upsilon_1 = xi y u (all linear in the state) and collecting the y terms:

      c2 = (alpha/2) xi^2 (1 - u^2 / q)
      c1 = kappa + xi m u / q
      c0 = -m^2 / (2 alpha q)
    """
    fam = spec.cir
    if fam is None or fam.k != 1:
        raise ModelError("the affine ansatz needs a single-asset CIR spec")
    m = float((fam.sigma @ fam.nu)[0])       # mu_1(t, y) = m * y
    q = float(fam.sigma[0, 0] ** 2)          # Sigma_11(t, y) = q * y
    u = float(fam.sigma[0, 0] * fam.rho[0, 0])  # Upsilon_1 = xi * u * y
    alpha, xi = spec.alpha, fam.xi
    c2 = 0.5 * alpha * xi**2 * (1.0 - u**2 / q)
    c1 = fam.kappa + xi * m * u / q
    c0 = -(m**2) / (2.0 * alpha * q)
    return c2, c1, c0


def build_psi(single_asset_spec: ModelSpec, step: float = 1e-3) -> PsiAffine:
    """Integrate the (psi_g, psi_h) system backward from zero terminal data.

    A Riccati blow-up before time zero raises with the blow-up time: the
    post-default investment problem has no finite value over that horizon.
    """
    spec = single_asset_spec
    c2, c1, c0 = riccati_coefficients(spec)
    T = spec.horizon
    n = max(3, int(np.ceil(T / step)) + 1)
    s = np.linspace(0.0, T, n)
    h = s[1] - s[0]
    psi_h = np.empty(n)
    psi_g = np.empty(n)
    psi_h[-1] = 0.0
    psi_g[-1] = 0.0
    kap_th = spec.cir.kappa * spec.cir.theta

    def rhs(state):
        ph, _ = state
        return np.array([c2 * ph**2 + c1 * ph + c0, -kap_th * ph])

    state = np.array([0.0, 0.0])
    for i in range(n - 2, -1, -1):
        # integrating backward: ds = -h
        k1 = rhs(state)
        k2 = rhs(state - 0.5 * h * k1)
        k3 = rhs(state - 0.5 * h * k2)
        k4 = rhs(state - h * k3)
        state = state - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(state)) or abs(state[0]) > _BLOWUP_LIMIT:
            raise NumericalError(
                f"post-default value blows up near s = {s[i]:.4f}; horizon too long"
            )
        psi_h[i], psi_g[i] = state
    return PsiAffine(s_nodes=s, psi_g=psi_g, psi_h=psi_h)


def surviving_asset_spec(incomplete_spec: ModelSpec, gamma1: float = 0.0) -> ModelSpec:
    """Single-asset spec for the market left after the default.

    Keeps the first (non-defaulting) equity, with its scalar volatility
    sqrt(Sigma_11) and effective correlation Upsilon_1 / (vol * a).  The
    default intensity of this residual market is zero; a small positive
    ``gamma1`` can be passed for limit experiments.  Intensities that feed
    validation only are floored at a tiny positive slope.
    """
    fam = incomplete_spec.cir
    if fam is None or fam.k < 2:
        raise ModelError("surviving_asset_spec needs the two-asset family")
    sig_row = fam.sigma[0, :]
    vol = float(np.sqrt(sig_row @ sig_row))
    m_load = float((fam.sigma @ fam.nu)[0])            # drift loading of asset 1
    ups_load = float(sig_row @ fam.rho[:, 0])          # correlation times vol
    rho_eff = ups_load / vol
    slope = gamma1 if gamma1 > 0 else 1e-12
    return make_cir_single_incomplete(
        kappa=fam.kappa, theta=fam.theta, xi=fam.xi,
        nu=m_load / vol, sigma=vol, rho=rho_eff, loss=1.0,
        gamma1=slope, gamma_tilde1=slope,
        risk_aversion=incomplete_spec.risk_aversion,
        horizon=incomplete_spec.horizon,
        cds_maturity=incomplete_spec.cds_maturity,
    )
