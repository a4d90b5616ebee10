"""Market specification, coefficient evaluation, and derived scalar fields.

A :class:`ModelSpec` bundles every coefficient function of the market (factor
drift/diffusion, equity drift/vol/correlation, fractional losses, default
intensities under the physical and spot pricing measures, risk premia, claim
and post-default payoff) together with the scalar parameters (risk aversion,
horizon, CDS maturity).  Coefficients are callables ``f(t, x)`` where ``x``
may be a scalar or an array with leading sample dimensions; the affine CIR
family used in all shipped experiments is provided through constructors that
build broadcasting-aware callables and record the family parameters for the
closed-form fast paths downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ModelError",
    "CoefficientError",
    "MeasureChangeError",
    "NumericalError",
    "ConfigError",
    "CirFamily",
    "ModelSpec",
    "GridSpec",
    "psd_sqrt",
    "rho_bar",
    "eval_covariances",
    "v_c",
    "q_complete",
    "q_incomplete",
    "entropy_rate",
]


class ModelError(Exception):
    """A model specification violates a structural assumption."""


class CoefficientError(ModelError):
    """A coefficient is degenerate or invalid at a specific grid point."""


class MeasureChangeError(ModelError):
    """The spot-pricing measure change is inadmissible (e.g. kappa_tilde <= 0)."""


class NumericalError(Exception):
    """A numerical scheme failed to converge; carries diagnostics."""


class ConfigError(Exception):
    """A configuration file failed validation; message names the field path."""


def psd_sqrt(mat: np.ndarray, clip: float = 1e-12) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below ``-clip`` raise; values in ``[-clip, 0)`` are clamped
    to zero, since the inputs are only guaranteed positive semi-definite.
    """
    mat = np.asarray(mat, dtype=float)
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if np.any(vals < -clip):
        raise ModelError(f"matrix is not PSD (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def rho_bar(rho: np.ndarray) -> np.ndarray:
    """Idiosyncratic loading sqrt(I_k - rho rho') for a k x d correlation."""
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    k = rho.shape[0]
    return psd_sqrt(np.eye(k) - rho @ rho.T)


def entropy_rate(ratio):
    """The map z -> z - 1 - log(z), nonnegative on (0, inf), zero iff z = 1."""
    ratio = np.asarray(ratio, dtype=float)
    if np.any(~(ratio > 0.0)):
        raise ValueError("entropy_rate requires a positive ratio")
    out = ratio - 1.0 - np.log(ratio)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CirFamily:
    """Affine-in-state CIR family backing both shipped experiments.

    Factor: dX = kappa (theta - X) dt + xi sqrt(X) dW on (0, inf).
    Equity: mu_e(t, y) = y * sigma @ nu, sigma_e(t, y) = sqrt(y) * sigma,
    constant correlation rows, constant fractional loss vector.
    Intensities are affine, gamma(t, y) = g0 + g1 y (same shape under the
    pricing measure).
    """

    kappa: float
    theta: float
    xi: float
    nu: np.ndarray            # (k,) market-price-of-risk style drift loadings
    sigma: np.ndarray         # (k, k) constant vol matrix
    rho: np.ndarray           # (k, 1) constant correlation with the factor
    loss: np.ndarray          # (k,) constant fractional loss vector
    gamma0: float
    gamma1: float
    gamma_tilde0: float
    gamma_tilde1: float

    def __post_init__(self):
        object.__setattr__(self, "nu", np.atleast_1d(np.asarray(self.nu, float)))
        object.__setattr__(self, "sigma", np.atleast_2d(np.asarray(self.sigma, float)))
        object.__setattr__(self, "rho", np.asarray(self.rho, float).reshape(len(self.nu), 1))
        object.__setattr__(self, "loss", np.atleast_1d(np.asarray(self.loss, float)))
        if self.kappa <= 0 or self.theta <= 0 or self.xi <= 0:
            raise ModelError("CIR parameters must be positive")
        if 2.0 * self.kappa * self.theta < self.xi**2 - 1e-15:
            raise ModelError(
                f"Feller condition violated: 2*{self.kappa}*{self.theta} < {self.xi}**2"
            )

    @property
    def k(self) -> int:
        return len(self.nu)

    def nu_tilde_slope(self) -> float:
        """Loading c in nu_tilde(t, y) = c * sqrt(y) implied by the pricing measure.

        Complete (rho = 1): sigma_e^{-1}(mu_e - gamma_tilde * ell).  Incomplete:
        the minimal-measure projection rho' sigma_e^{-1}(mu_e - gamma_tilde * ell).
        Requires the state-constant part of gamma_tilde to vanish (it does in
        both shipped experiments); the constant part is folded into the level
        shift of the pricing-measure drift instead (see ptilde_drift_*).
        """
        sol = np.linalg.solve(self.sigma, self.gamma_tilde1 * self.loss)
        core = self.nu - sol
        return float(self.rho[:, 0] @ core)

    def ptilde_kappa_theta(self) -> tuple[float, float]:
        """Mean reversion and level of X under the spot pricing measure.

        Derived from dX = (b - a*nu_tilde) dt + a dW~ for the affine family;
        the constant intensity part gamma_tilde0 shifts the level term.
        """
        sol0 = np.linalg.solve(self.sigma, self.gamma_tilde0 * self.loss)
        shift0 = float(self.rho[:, 0] @ sol0)
        kappa_tilde = self.kappa + self.xi * self.nu_tilde_slope()
        if kappa_tilde <= 0.0:
            raise MeasureChangeError(
                f"kappa under the pricing measure is {kappa_tilde:.6f} <= 0"
            )
        level = self.kappa * self.theta + self.xi * shift0
        return kappa_tilde, level / kappa_tilde


def _affine_callables(fam: CirFamily):
    """Broadcasting coefficient callables for a CirFamily."""
    k = fam.k
    sig = fam.sigma
    mu_load = sig @ fam.nu  # (k,)

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return (fam.kappa * (fam.theta - x))[..., None]

    def diffusion(t, x):
        x = np.asarray(x, dtype=float)
        return (fam.xi * np.sqrt(x))[..., None, None]

    def equity_drift(t, x):
        x = np.asarray(x, dtype=float)
        return x[..., None] * mu_load

    def equity_vol(t, x):
        x = np.asarray(x, dtype=float)
        return np.sqrt(x)[..., None, None] * sig

    def correlation(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(fam.rho, x.shape + (k, 1)).copy()

    def loss(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(fam.loss, x.shape + (k,)).copy()

    def gamma(t, x):
        x = np.asarray(x, dtype=float)
        out = fam.gamma0 + fam.gamma1 * x
        return float(out) if out.ndim == 0 else out

    def gamma_tilde(t, x):
        x = np.asarray(x, dtype=float)
        out = fam.gamma_tilde0 + fam.gamma_tilde1 * x
        return float(out) if out.ndim == 0 else out

    slope = fam.nu_tilde_slope()
    sol0 = np.linalg.solve(sig, fam.gamma_tilde0 * fam.loss)
    shift0 = float(fam.rho[:, 0] @ sol0)

    def risk_premia(t, x):
        x = np.asarray(x, dtype=float)
        vals = slope * np.sqrt(x)
        if fam.gamma_tilde0 != 0.0:
            vals = vals + shift0 / np.sqrt(x)
        return vals[..., None]

    return {
        "drift": drift,
        "diffusion": diffusion,
        "equity_drift": equity_drift,
        "equity_vol": equity_vol,
        "correlation": correlation,
        "loss": loss,
        "intensity_p": gamma,
        "intensity_ptilde": gamma_tilde,
        "risk_premia": risk_premia,
    }


@dataclass
class ModelSpec:
    """One market instance: all coefficient functions plus scalar parameters."""

    dim_factors: int
    dim_equities: int
    drift: Callable                 # b(t, x) -> (d,)
    diffusion: Callable             # a(t, x) -> (d, d), symmetric PD
    equity_drift: Callable          # mu_e(t, x) -> (k,)
    equity_vol: Callable            # sigma_e(t, x) -> (k, k), invertible
    correlation: Callable           # rho(t, x) -> (k, d)
    loss: Callable                  # ell_e(t, x) -> (k,), components in [0, 1]
    intensity_p: Callable           # gamma(t, x) > 0
    intensity_ptilde: Callable      # gamma_tilde(t, x) > 0
    risk_premia: Callable           # nu_tilde(t, x) -> (d,)
    claim: Callable                 # phi(x)
    post_default: Callable          # psi(t, x) >= 0, psi(T, .) = 0
    risk_aversion: float
    horizon: float
    cds_maturity: float
    mode: str = "complete"          # "complete" | "incomplete"
    epsilon_rho: float = 1e-6       # incompleteness margin for (1-eps)I - rho rho'
    cir: Optional[CirFamily] = None

    def __post_init__(self):
        if self.mode not in ("complete", "incomplete"):
            raise ModelError(f"unknown mode {self.mode!r}")
        if self.risk_aversion <= 0:
            raise ModelError("risk aversion must be positive")
        if not (self.cds_maturity > self.horizon > 0):
            raise ModelError("need cds_maturity > horizon > 0")
        if self.mode == "complete" and self.dim_equities != self.dim_factors:
            raise ModelError("complete mode requires k = d")

    @property
    def alpha(self) -> float:
        return self.risk_aversion

    def with_claim(self, claim: Callable) -> "ModelSpec":
        return replace(self, claim=claim)

    def with_constant_claim(self, q: float) -> "ModelSpec":
        q = float(q)

        def phi(x):
            x = np.asarray(x, dtype=float)
            out = np.full_like(x, q)
            return float(out) if out.ndim == 0 else out

        return replace(self, claim=phi)

    def with_post_default(self, psi: Callable) -> "ModelSpec":
        return replace(self, post_default=psi)

    def covariance_A(self, t, x):
        """A = a a' evaluated pointwise."""
        a = np.asarray(self.diffusion(t, x), dtype=float)
        return a @ a.swapaxes(-1, -2)

    def validate_at(self, t: float, x: float) -> None:
        """Check the pointwise structural invariants at one (t, x)."""
        rho = np.atleast_2d(np.asarray(self.correlation(t, x), float))
        k = self.dim_equities
        eig = np.linalg.eigvalsh(np.eye(k) - rho @ rho.T)
        if eig.min() < -1e-12:
            raise ModelError(f"I - rho rho' not PSD at (t={t}, x={x})")
        if self.mode == "incomplete":
            eig2 = np.linalg.eigvalsh((1.0 - self.epsilon_rho) * np.eye(k) - rho @ rho.T)
            if eig2.min() < -1e-12:
                raise ModelError(
                    f"(1-eps)I - rho rho' not PSD at (t={t}, x={x}); "
                    "the market is not strictly incomplete"
                )
        if self.mode == "complete":
            if not np.allclose(rho, np.eye(self.dim_factors), atol=1e-12):
                raise ModelError("complete mode requires rho = I")
        ell = np.atleast_1d(np.asarray(self.loss(t, x), float))
        if not (ell @ ell > 0.0):
            raise ModelError(f"loss vector vanishes at (t={t}, x={x})")
        if np.any(ell < -1e-12) or np.any(ell > 1.0 + 1e-12):
            raise ModelError(f"loss components outside [0, 1] at (t={t}, x={x})")
        gam = float(self.intensity_p(t, x))
        gam_t = float(self.intensity_ptilde(t, x))
        if gam <= 0.0 or gam_t <= 0.0:
            raise ModelError(f"intensities must be positive at (t={t}, x={x})")
        psi = float(self.post_default(t, x))
        if psi < -1e-12:
            raise ModelError(f"post-default value negative at (t={t}, x={x})")


def _zero_fn(t, x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    return float(out) if out.ndim == 0 else out


def _zero_claim(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    return float(out) if out.ndim == 0 else out


def _spec_from_family(fam: CirFamily, *, mode: str, risk_aversion: float,
                      horizon: float, cds_maturity: float,
                      claim_level: float = 0.0, epsilon_rho: float = 1e-6) -> ModelSpec:
    calls = _affine_callables(fam)
    spec = ModelSpec(
        dim_factors=1, dim_equities=fam.k,
        claim=_zero_claim, post_default=_zero_fn,
        risk_aversion=risk_aversion, horizon=horizon, cds_maturity=cds_maturity,
        mode=mode, epsilon_rho=epsilon_rho, cir=fam, **calls,
    )
    if claim_level != 0.0:
        spec = spec.with_constant_claim(claim_level)
    return spec


def make_cir_complete(
    *,
    kappa: float,
    theta: float,
    xi: float,
    nu: float,
    sigma: float,
    loss: float,
    gamma1: float,
    gamma_tilde1: float,
    gamma0: float = 0.0,
    gamma_tilde0: float = 0.0,
    risk_aversion: float,
    horizon: float,
    cds_maturity: float,
    claim_level: float = 0.0,
) -> ModelSpec:
    """Single-asset complete-market CIR spec (rho = 1, psi = 0)."""
    fam = CirFamily(
        kappa=kappa, theta=theta, xi=xi,
        nu=np.array([nu]), sigma=np.array([[sigma]]), rho=np.array([[1.0]]),
        loss=np.array([loss]),
        gamma0=gamma0, gamma1=gamma1,
        gamma_tilde0=gamma_tilde0, gamma_tilde1=gamma_tilde1,
    )
    return _spec_from_family(
        fam, mode="complete", risk_aversion=risk_aversion, horizon=horizon,
        cds_maturity=cds_maturity, claim_level=claim_level,
    )


def make_cir_single_incomplete(
    *,
    kappa: float,
    theta: float,
    xi: float,
    nu: float,
    sigma: float,
    rho: float,
    loss: float,
    gamma1: float,
    gamma_tilde1: float,
    gamma0: float = 0.0,
    gamma_tilde0: float = 0.0,
    risk_aversion: float,
    horizon: float,
    cds_maturity: float,
    claim_level: float = 0.0,
    epsilon_rho: float = 1e-6,
) -> ModelSpec:
    """Single equity imperfectly correlated with the factor (|rho| < 1)."""
    fam = CirFamily(
        kappa=kappa, theta=theta, xi=xi,
        nu=np.array([nu]), sigma=np.array([[sigma]]), rho=np.array([[rho]]),
        loss=np.array([loss]),
        gamma0=gamma0, gamma1=gamma1,
        gamma_tilde0=gamma_tilde0, gamma_tilde1=gamma_tilde1,
    )
    return _spec_from_family(
        fam, mode="incomplete", risk_aversion=risk_aversion, horizon=horizon,
        cds_maturity=cds_maturity, claim_level=claim_level, epsilon_rho=epsilon_rho,
    )


def make_cir_incomplete(
    *,
    kappa: float,
    theta: float,
    xi: float,
    nu: np.ndarray,
    covariance: np.ndarray,
    rho: np.ndarray,
    loss: float,
    gamma1: float,
    gamma_tilde1: float,
    gamma0: float = 0.0,
    gamma_tilde0: float = 0.0,
    risk_aversion: float,
    horizon: float,
    cds_maturity: float,
    claim_level: float = 0.0,
    epsilon_rho: float = 1e-6,
) -> ModelSpec:
    """Two-asset incomplete-market CIR spec; only the last asset defaults."""
    cov = np.atleast_2d(np.asarray(covariance, float))
    k = cov.shape[0]
    sigma = psd_sqrt(cov)
    loss_vec = np.zeros(k)
    loss_vec[-1] = loss
    fam = CirFamily(
        kappa=kappa, theta=theta, xi=xi,
        nu=np.asarray(nu, float), sigma=sigma,
        rho=np.asarray(rho, float).reshape(k, 1),
        loss=loss_vec,
        gamma0=gamma0, gamma1=gamma1,
        gamma_tilde0=gamma_tilde0, gamma_tilde1=gamma_tilde1,
    )
    return _spec_from_family(
        fam, mode="incomplete", risk_aversion=risk_aversion, horizon=horizon,
        cds_maturity=cds_maturity, claim_level=claim_level, epsilon_rho=epsilon_rho,
    )


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid on [0, T] x [x_min, x_max] (d = 1).

    ``domain_index`` marks grids built from the nested-domain family
    (1/n, n) used by the localized solver.
    """

    t_nodes: np.ndarray
    x_nodes: np.ndarray
    domain_index: Optional[int] = None

    def __post_init__(self):
        t = np.asarray(self.t_nodes, dtype=float)
        x = np.asarray(self.x_nodes, dtype=float)
        object.__setattr__(self, "t_nodes", t)
        object.__setattr__(self, "x_nodes", x)
        if t.ndim != 1 or x.ndim != 1 or len(t) < 2 or len(x) < 3:
            raise ModelError("grid needs >= 2 time nodes and >= 3 space nodes")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(x) <= 0):
            raise ModelError("grid nodes must be strictly increasing")
        if x[0] <= 0.0:
            raise ModelError("x-domain must sit strictly inside (0, inf)")

    @classmethod
    def uniform(cls, horizon: float, nt: int, x_min: float, x_max: float, nx: int,
                domain_index: Optional[int] = None) -> "GridSpec":
        return cls(
            t_nodes=np.linspace(0.0, horizon, nt + 1),
            x_nodes=np.linspace(x_min, x_max, nx),
            domain_index=domain_index,
        )

    @classmethod
    def nested(cls, n: int, horizon: float, dt: float, dx: float) -> "GridSpec":
        """Grid on the nested domain (1/n, n) with spacing close to (dt, dx)."""
        if n < 2:
            raise ModelError("nested domains need n >= 2")
        nt = max(2, round(horizon / dt))
        span = n - 1.0 / n
        nx = max(3, round(span / dx) + 1)
        return cls.uniform(horizon, nt, 1.0 / n, float(n), nx, domain_index=n)

    @property
    def dt(self) -> float:
        return float(self.t_nodes[1] - self.t_nodes[0])

    @property
    def dx(self) -> float:
        return float(self.x_nodes[1] - self.x_nodes[0])


# ---------------------------------------------------------------------------
# derived scalar fields
# ---------------------------------------------------------------------------

def eval_covariances(spec: ModelSpec, t: float, x: float, sigma_r: np.ndarray):
    """Instantaneous covariances of the combined equity/CDS market.

    Returns (Sigma_e, Upsilon_e, Sigma, Upsilon):
      Sigma_e = sigma_e sigma_e'            (k x k, equity block)
      Upsilon_e = sigma_e rho a'            (k x d, equity-factor block)
      Sigma = [[Sigma_e, Upsilon_e s_r], [s_r' Upsilon_e', s_r' A s_r]]
      Upsilon = [[Upsilon_e], [s_r' A]]
    The CDS volatility loading ``sigma_r`` must be supplied by the curve.
    """
    k, d = spec.dim_equities, spec.dim_factors
    sig_e = np.atleast_2d(np.asarray(spec.equity_vol(t, x), float))
    if abs(np.linalg.det(sig_e)) < 1e-300:
        raise CoefficientError(f"equity vol singular at (t={t}, x={x})")
    rho = np.asarray(spec.correlation(t, x), float).reshape(k, d)
    a = np.atleast_2d(np.asarray(spec.diffusion(t, x), float))
    s_r = np.asarray(sigma_r, float).reshape(d)
    A = a @ a.T
    Sigma_e = sig_e @ sig_e.T
    Upsilon_e = sig_e @ rho @ a.T
    top_right = (Upsilon_e @ s_r).reshape(k, 1)
    corner = float(s_r @ A @ s_r)
    Sigma = np.block([[Sigma_e, top_right], [top_right.T, np.array([[corner]])]])
    Upsilon = np.vstack([Upsilon_e, (s_r @ A).reshape(1, d)])
    return Sigma_e, Upsilon_e, Sigma, Upsilon


def v_c(spec: ModelSpec, t: float, x: float, sigma_r: np.ndarray) -> float:
    """Completeness determinant 1 + sigma_r' a sigma_e^{-1} ell_e.

    Nonzero values mean the rolling CDS is not redundant relative to the
    equity, making the combined market complete in complete mode.
    """
    if spec.dim_equities != spec.dim_factors:
        raise ModelError("v_c is defined in complete mode (k = d)")
    sig_e = np.atleast_2d(np.asarray(spec.equity_vol(t, x), float))
    a = np.atleast_2d(np.asarray(spec.diffusion(t, x), float))
    ell = np.atleast_1d(np.asarray(spec.loss(t, x), float))
    s_r = np.asarray(sigma_r, float).reshape(spec.dim_factors)
    try:
        sol = np.linalg.solve(sig_e, ell)
    except np.linalg.LinAlgError as exc:
        raise CoefficientError(f"equity vol singular at (t={t}, x={x})") from exc
    return float(1.0 + s_r @ (a @ sol))


def q_complete(spec: ModelSpec, t: float, x: float) -> float:
    """Entropy rate of the pricing measure relative to the physical one (complete).

    0.5 |sigma_e^{-1}(mu_e - gamma_tilde ell_e)|^2
    + gamma_tilde * (gamma/gamma_tilde - log(gamma/gamma_tilde) - 1).
    """
    sig_e = np.atleast_2d(np.asarray(spec.equity_vol(t, x), float))
    mu_e = np.atleast_1d(np.asarray(spec.equity_drift(t, x), float))
    ell = np.atleast_1d(np.asarray(spec.loss(t, x), float))
    gam = float(spec.intensity_p(t, x))
    gam_t = float(spec.intensity_ptilde(t, x))
    if gam <= 0 or gam_t <= 0:
        raise ModelError(f"intensities must be positive at (t={t}, x={x})")
    mpr = np.linalg.solve(sig_e, mu_e - gam_t * ell)
    return float(0.5 * mpr @ mpr + gam_t * entropy_rate(gam / gam_t))


def q_incomplete(spec: ModelSpec, t: float, x: float) -> float:
    """Entropy rate of the pricing measure in the strictly incomplete market.

    0.5 |nu_tilde|^2
    + 0.5 |rho_bar^{-1}(sigma_e^{-1}(mu_e - gamma_tilde ell_e) - rho nu_tilde)|^2
    + gamma_tilde * (gamma/gamma_tilde - log(gamma/gamma_tilde) - 1).
    """
    k, d = spec.dim_equities, spec.dim_factors
    sig_e = np.atleast_2d(np.asarray(spec.equity_vol(t, x), float))
    mu_e = np.atleast_1d(np.asarray(spec.equity_drift(t, x), float))
    ell = np.atleast_1d(np.asarray(spec.loss(t, x), float))
    rho = np.asarray(spec.correlation(t, x), float).reshape(k, d)
    nu_t = np.asarray(spec.risk_premia(t, x), float).reshape(d)
    gam = float(spec.intensity_p(t, x))
    gam_t = float(spec.intensity_ptilde(t, x))
    rb = rho_bar(rho)
    eig = np.linalg.eigvalsh(rb)
    if eig.min() <= 1e-10:
        raise ModelError(f"I - rho rho' is singular at (t={t}, x={x})")
    mpr = np.linalg.solve(sig_e, mu_e - gam_t * ell)
    resid = np.linalg.solve(rb, mpr - rho @ nu_t)
    return float(0.5 * nu_t @ nu_t + 0.5 * resid @ resid + gam_t * entropy_rate(gam / gam_t))
