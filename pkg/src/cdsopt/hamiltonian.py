"""Hamiltonians, optimal equity/CDS policies, and their residual functions.

The investor's pre-default Hamiltonian over a combined position pi =
(theta, delta) in equities and the rolling CDS is

    H(pi, g, p) = pi'(mu - alpha Upsilon p) - (alpha/2) pi' Sigma pi
                  - (gamma/alpha) exp(alpha (g + pi' ell - psi)).

Maximizing over theta for fixed delta and then over delta reduces H to
closed form through six scalar coefficients (k1..k6 below) and the product
log.  Three reduced forms are implemented: the complete-market one (linear
PDE source), the strictly incomplete one with its residual terms, and the
equity-only benchmark without the CDS.  All product-log arguments are
carried in log space end to end, so large certainty-equivalent values do not
overflow.

Pointwise operations work for any (k, d); the *_array functions are the
d = 1 vectorized fast path used by the PDE solver and are cross-checked
against the pointwise route in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .model import CoefficientError, ModelError, ModelSpec, eval_covariances, q_complete
from .productlog import pl_of_log

__all__ = [
    "HamiltonianInputs",
    "KCoefficients",
    "k_coefficients",
    "theta_given_delta",
    "reduced_hamiltonian_complete",
    "reduced_hamiltonian_incomplete",
    "general_policy",
    "decomposition_gap",
    "hamiltonian_value",
    "hamiltonian_dg",
    "inputs_at",
    "CoefficientTable",
    "build_table",
]

_K1_TOL = 1e-14
_SIGMA_R_ZERO_TOL = 1e-12


@dataclass
class HamiltonianInputs:
    """Everything needed to evaluate H and its reductions at one (t, x)."""

    g: float
    p: np.ndarray            # (d,) candidate gradient
    mu_e: np.ndarray         # (k,)
    sigma_e: np.ndarray      # (k, k)
    rho: np.ndarray          # (k, d)
    a: np.ndarray            # (d, d)
    ell_e: np.ndarray        # (k,)
    gamma: float
    gamma_tilde: float
    psi: float
    sigma_r: np.ndarray      # (d,)
    nu_tilde: np.ndarray     # (d,)
    alpha: float

    def __post_init__(self):
        self.p = np.atleast_1d(np.asarray(self.p, float))
        self.mu_e = np.atleast_1d(np.asarray(self.mu_e, float))
        self.sigma_e = np.atleast_2d(np.asarray(self.sigma_e, float))
        self.ell_e = np.atleast_1d(np.asarray(self.ell_e, float))
        self.a = np.atleast_2d(np.asarray(self.a, float))
        k, d = self.mu_e.shape[0], self.p.shape[0]
        self.rho = np.asarray(self.rho, float).reshape(k, d)
        self.sigma_r = np.atleast_1d(np.asarray(self.sigma_r, float)).reshape(d)
        self.nu_tilde = np.atleast_1d(np.asarray(self.nu_tilde, float)).reshape(d)
        if self.gamma <= 0 or self.gamma_tilde <= 0:
            raise ModelError("Hamiltonian needs positive intensities")

    @property
    def k(self) -> int:
        return self.mu_e.shape[0]

    @property
    def d(self) -> int:
        return self.p.shape[0]

    @cached_property
    def Sigma_e(self) -> np.ndarray:
        return self.sigma_e @ self.sigma_e.T

    @cached_property
    def Upsilon_e(self) -> np.ndarray:
        return self.sigma_e @ self.rho @ self.a.T

    @cached_property
    def A(self) -> np.ndarray:
        return self.a @ self.a.T

    @cached_property
    def _solves(self):
        """Sigma_e^{-1} applied to [mu_e | ell_e | Upsilon_e]."""
        rhs = np.column_stack([self.mu_e, self.ell_e, self.Upsilon_e])
        try:
            sol = np.linalg.solve(self.Sigma_e, rhs)
        except np.linalg.LinAlgError as exc:
            raise CoefficientError("equity covariance singular") from exc
        return sol[:, 0], sol[:, 1], sol[:, 2:]

    # combined-market blocks (equity + CDS) ---------------------------------

    @cached_property
    def mu(self) -> np.ndarray:
        cds_drift = float(self.sigma_r @ (self.a @ self.nu_tilde)) - self.gamma_tilde
        return np.append(self.mu_e, cds_drift)

    @cached_property
    def ell(self) -> np.ndarray:
        return np.append(self.ell_e, -1.0)

    @cached_property
    def Sigma(self) -> np.ndarray:
        top_right = (self.Upsilon_e @ self.sigma_r).reshape(self.k, 1)
        corner = float(self.sigma_r @ self.A @ self.sigma_r)
        return np.block([[self.Sigma_e, top_right],
                         [top_right.T, np.array([[corner]])]])

    @cached_property
    def Upsilon(self) -> np.ndarray:
        return np.vstack([self.Upsilon_e, (self.sigma_r @ self.A).reshape(1, self.d)])


def inputs_at(spec: ModelSpec, t: float, x: float, g: float, p,
              sigma_r=None, curve=None) -> HamiltonianInputs:
    """Assemble HamiltonianInputs from a spec (and a curve for sigma_r)."""
    if sigma_r is None:
        if curve is not None:
            sigma_r = np.atleast_1d(curve.sigma_r(t, x))
        else:
            sigma_r = np.zeros(spec.dim_factors)
    return HamiltonianInputs(
        g=float(g), p=p,
        mu_e=spec.equity_drift(t, x),
        sigma_e=spec.equity_vol(t, x),
        rho=spec.correlation(t, x),
        a=spec.diffusion(t, x),
        ell_e=spec.loss(t, x),
        gamma=float(spec.intensity_p(t, x)),
        gamma_tilde=float(spec.intensity_ptilde(t, x)),
        psi=float(spec.post_default(t, x)),
        sigma_r=sigma_r,
        nu_tilde=spec.risk_premia(t, x),
        alpha=spec.alpha,
    )


@dataclass(frozen=True)
class KCoefficients:
    """The six scalars reducing the delta-optimization to one dimension.

    k4 is only ever needed through its logarithm (it can overflow for large
    certainty equivalents), so log_k4 is what gets stored; k6 is defined when
    k1 > 0.
    """

    k1: float
    k2: float
    k3: float
    log_k4: float
    k5: float
    k6: Optional[float]

    @property
    def k4(self) -> float:
        return float(np.exp(self.log_k4))


def k_coefficients(inp: HamiltonianInputs) -> KCoefficients:
    """Evaluate k1..k6 at the point described by ``inp``.

    k1 = s' (A - Upsilon_e' Sigma_e^{-1} Upsilon_e) s          (s = sigma_r)
    k2 = -gamma_tilde + s'(a nu_tilde - Upsilon_e' Sigma_e^{-1} mu_e
                           - alpha (A - Upsilon_e' Sigma_e^{-1} Upsilon_e) p)
    k3 = ell' Sigma_e^{-1} ell
    log k4 = log(k3 gamma) + alpha (g - psi) + ell' Sigma_e^{-1}(mu_e - alpha Upsilon_e p)
    k5 = 1 + s' Upsilon_e' Sigma_e^{-1} ell
    k6 = (k1 k3 + k5^2) / k1
    """
    sol_mu, sol_ell, sol_ups = inp._solves
    s = inp.sigma_r
    K1_bar = inp.A - inp.Upsilon_e.T @ sol_ups
    k1 = float(s @ K1_bar @ s)
    if k1 < 0:  # PSD up to rounding
        if k1 < -1e-10:
            raise ModelError(f"negative Schur complement k1 = {k1:.3e}")
        k1 = 0.0
    K2_bar = inp.a @ inp.nu_tilde - inp.Upsilon_e.T @ sol_mu - inp.alpha * (K1_bar @ inp.p)
    k2 = float(-inp.gamma_tilde + s @ K2_bar)
    k3 = float(inp.ell_e @ sol_ell)
    if k3 <= 0:
        raise ModelError("ell' Sigma_e^{-1} ell must be positive")
    log_k4 = float(
        np.log(k3 * inp.gamma)
        + inp.alpha * (inp.g - inp.psi)
        + inp.ell_e @ (sol_mu - inp.alpha * sol_ups @ inp.p)
    )
    k5 = float(1.0 + s @ (inp.Upsilon_e.T @ sol_ell))
    k6 = (k1 * k3 + k5**2) / k1 if k1 > _K1_TOL else None
    return KCoefficients(k1=k1, k2=k2, k3=k3, log_k4=log_k4, k5=k5, k6=k6)


def theta_given_delta(inp: HamiltonianInputs, delta: float) -> np.ndarray:
    """Optimal equity position for a frozen CDS position delta."""
    coeff = k_coefficients(inp)
    sol_mu, sol_ell, sol_ups = inp._solves
    w = pl_of_log(coeff.log_k4 - inp.alpha * coeff.k5 * delta)
    return (
        sol_mu / inp.alpha
        - sol_ups @ inp.p
        - (w / (inp.alpha * coeff.k3)) * sol_ell
        - delta * (sol_ups @ inp.sigma_r)
    )


def _base_hamiltonian(inp: HamiltonianInputs) -> float:
    """Shared part of the reduced incomplete Hamiltonian (residual excluded).

    (Q_c - gamma)/alpha + gamma_tilde (psi - g)
    + (alpha/2) p' Upsilon_e' Sigma_e^{-1} Upsilon_e p
    - p' Upsilon_e' Sigma_e^{-1} (mu_e - gamma_tilde ell_e)
    """
    sol_mu, sol_ell, sol_ups = inp._solves
    M = inp.Upsilon_e.T @ sol_ups
    m = inp.Upsilon_e.T @ (sol_mu - inp.gamma_tilde * sol_ell)
    qc = 0.5 * float(
        (inp.mu_e - inp.gamma_tilde * inp.ell_e)
        @ (sol_mu - inp.gamma_tilde * sol_ell)
    ) + inp.gamma_tilde * (
        inp.gamma / inp.gamma_tilde - np.log(inp.gamma / inp.gamma_tilde) - 1.0
    )
    return float(
        (qc - inp.gamma) / inp.alpha
        + inp.gamma_tilde * (inp.psi - inp.g)
        + 0.5 * inp.alpha * inp.p @ M @ inp.p
        - inp.p @ m
    )


def _delta_zero_form(inp: HamiltonianInputs, coeff: KCoefficients) -> float:
    """delta that solves the first-order condition when sigma_r vanishes."""
    return (
        -coeff.k3 * inp.gamma_tilde
        + coeff.log_k4
        - np.log(inp.gamma_tilde * coeff.k3)
    ) / inp.alpha


def reduced_hamiltonian_complete(inp: HamiltonianInputs):
    """Reduced Hamiltonian and optimal (theta, delta) under completeness.

    Requires the completeness determinant k5 = 1 + sigma_r' a sigma_e^{-1} ell
    to be nonzero.  Returns (H_c, theta_hat, delta_hat).
    """
    coeff = k_coefficients(inp)
    if abs(coeff.k5) < 1e-12:
        raise ModelError("completeness determinant vanishes (CDS redundant)")
    sol_mu, sol_ell, sol_ups = inp._solves
    delta = (
        -coeff.k3 * inp.gamma_tilde
        + coeff.log_k4
        - np.log(inp.gamma_tilde * coeff.k3)
    ) / (inp.alpha * coeff.k5)
    # at the optimum the product-log term equals gamma_tilde * k3 exactly
    theta = (
        (sol_mu - inp.gamma_tilde * sol_ell) / inp.alpha
        - sol_ups @ inp.p
        - delta * (sol_ups @ inp.sigma_r)
    )
    value = float(
        (q_complete_from_inputs(inp) - inp.gamma) / inp.alpha
        + inp.gamma_tilde * (inp.psi - inp.g)
        + 0.5 * inp.alpha * inp.p @ inp.A @ inp.p
        - inp.p @ (inp.a @ np.linalg.solve(inp.sigma_e, inp.mu_e - inp.gamma_tilde * inp.ell_e))
    )
    return value, theta, float(delta)


def q_complete_from_inputs(inp: HamiltonianInputs) -> float:
    mpr = np.linalg.solve(inp.sigma_e, inp.mu_e - inp.gamma_tilde * inp.ell_e)
    return float(
        0.5 * mpr @ mpr
        + inp.gamma_tilde * (inp.gamma / inp.gamma_tilde
                             - np.log(inp.gamma / inp.gamma_tilde) - 1.0)
    )


def reduced_hamiltonian_incomplete(inp: HamiltonianInputs):
    """Reduced Hamiltonian, policies, and residuals in the incomplete market.

    Returns (H_i, theta_hat, delta_hat, R_H, R_delta).  The sigma_r regime
    decides the branch: a vanishing loading gives zero residuals; otherwise
    the one-dimensional concave delta problem is solved through the product
    log with the k6 combination.  Data satisfying the complete-market
    structure (zero Schur complement k1 with a consistent k2) falls back to
    the complete-form optimizer, where both residuals vanish.
    """
    coeff = k_coefficients(inp)
    sol_mu, sol_ell, sol_ups = inp._solves
    alpha = inp.alpha
    base = _base_hamiltonian(inp)
    zero_sigma = float(np.linalg.norm(inp.sigma_r)) <= _SIGMA_R_ZERO_TOL

    if zero_sigma:
        delta = _delta_zero_form(inp, coeff)
        w_opt = inp.gamma_tilde * coeff.k3
        r_h = 0.0
        r_delta = 0.0
    elif coeff.k1 > _K1_TOL:
        log_big = coeff.log_k4 + np.log(coeff.k6 / coeff.k3) - coeff.k5 * coeff.k2 / coeff.k1
        W = pl_of_log(log_big)
        delta = coeff.k2 / (alpha * coeff.k1) + coeff.k5 * W / (alpha * coeff.k1 * coeff.k6)
        w_opt = W * coeff.k3 / coeff.k6
        log_term = coeff.log_k4 - np.log(inp.gamma_tilde * coeff.k3)
        r_h = float(
            -inp.gamma_tilde**2 * coeff.k3 / (2.0 * alpha)
            + inp.gamma_tilde / alpha
            + inp.gamma_tilde / alpha * log_term
            + coeff.k2**2 / (2.0 * alpha * coeff.k1)
            - (W**2 + 2.0 * W) / (2.0 * alpha * coeff.k6)
        )
        r_delta = float(delta - _delta_zero_form(inp, coeff))
    else:
        # zero Schur complement with a live CDS loading: only solvable when
        # the drift structure matches the complete market (k2 = -gt * k5)
        if not (coeff.k5 > 0.0 and coeff.k2 < 0.0):
            raise ModelError(
                "degenerate Schur complement: k1 = 0 with unbounded delta objective"
            )
        w_opt = -coeff.k2 * coeff.k3 / coeff.k5
        delta = (coeff.log_k4 - np.log(w_opt) - w_opt) / (alpha * coeff.k5)
        log_term = coeff.log_k4 - np.log(inp.gamma_tilde * coeff.k3)
        r_h = float(
            coeff.k2 * delta
            - (w_opt**2 + 2.0 * w_opt) / (2.0 * alpha * coeff.k3)
            + inp.gamma_tilde / alpha
            + inp.gamma_tilde / alpha * log_term
            - inp.gamma_tilde**2 * coeff.k3 / (2.0 * alpha)
        )
        r_delta = float(delta - _delta_zero_form(inp, coeff))

    theta = (
        sol_mu / alpha
        - sol_ups @ inp.p
        - (w_opt / (alpha * coeff.k3)) * sol_ell
        - delta * (sol_ups @ inp.sigma_r)
    )
    return float(base + r_h), theta, float(delta), float(r_h), float(r_delta)


def general_policy(inp: HamiltonianInputs):
    """Optimal combined position and reduced Hamiltonian when Sigma is invertible.

    pi_hat = (1/alpha) Sigma^{-1} (mu - alpha Upsilon p - (w / ell'Sigma^{-1}ell) ell)
    with w the product log of gamma ell'Sigma^{-1}ell exp(alpha(g - psi)
    + ell'Sigma^{-1}(mu - alpha Upsilon p)).  Also used with equity-only
    blocks as the no-CDS benchmark.
    """
    Sigma, Upsilon, mu, ell = inp.Sigma, inp.Upsilon, inp.mu, inp.ell
    try:
        chol = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise ModelError("Sigma is not positive definite; use the k-coefficient route") from exc

    def solve(v):
        z = np.linalg.solve(chol, v)
        return np.linalg.solve(chol.T, z)

    excess = mu - inp.alpha * Upsilon @ inp.p
    sol_excess = solve(excess)
    sol_ell = solve(ell)
    lSl = float(ell @ sol_ell)
    log_arg = float(np.log(inp.gamma * lSl) + inp.alpha * (inp.g - inp.psi) + ell @ sol_excess)
    w = pl_of_log(log_arg)
    pi = (sol_excess - (w / lSl) * sol_ell) / inp.alpha
    value = float(excess @ sol_excess / (2.0 * inp.alpha) - (w**2 + 2.0 * w) / (2.0 * inp.alpha * lSl))
    return pi, value


def equity_only(inp: HamiltonianInputs) -> HamiltonianInputs:
    """Restriction of the inputs to the equity market (no CDS position)."""
    out = HamiltonianInputs(
        g=inp.g, p=inp.p, mu_e=inp.mu_e, sigma_e=inp.sigma_e, rho=inp.rho,
        a=inp.a, ell_e=inp.ell_e, gamma=inp.gamma, gamma_tilde=inp.gamma_tilde,
        psi=inp.psi, sigma_r=np.zeros(inp.d), nu_tilde=inp.nu_tilde, alpha=inp.alpha,
    )
    # with sigma_r = 0 the combined blocks would be singular; the equity-only
    # market reuses the combined-block API with the pure equity matrices
    out.__dict__["mu"] = inp.mu_e
    out.__dict__["ell"] = inp.ell_e
    out.__dict__["Sigma"] = inp.Sigma_e
    out.__dict__["Upsilon"] = inp.Upsilon_e
    return out


def hamiltonian_value(inp: HamiltonianInputs, theta, delta=None) -> float:
    """Direct evaluation of H(pi, g, p); the target of the brute-force oracle.

    With ``delta=None`` the equity-only Hamiltonian is evaluated.  The
    exponential is clipped at exp(700) so distant trial points stay finite
    (and hugely negative), preserving concavity for the optimizers.
    """
    theta = np.atleast_1d(np.asarray(theta, float))
    if delta is None:
        pi = theta
        mu, Sigma, Upsilon, ell = inp.mu_e, inp.Sigma_e, inp.Upsilon_e, inp.ell_e
    else:
        pi = np.append(theta, float(delta))
        mu, Sigma, Upsilon, ell = inp.mu, inp.Sigma, inp.Upsilon, inp.ell
    expo = inp.alpha * (inp.g + pi @ ell - inp.psi)
    penalty = (inp.gamma / inp.alpha) * np.exp(min(expo, 700.0))
    return float(
        pi @ (mu - inp.alpha * Upsilon @ inp.p)
        - 0.5 * inp.alpha * pi @ Sigma @ pi
        - penalty
    )


def hamiltonian_dg(inp: HamiltonianInputs, theta, delta=None) -> float:
    """Envelope derivative of the reduced Hamiltonian in g.

    At the optimal position the only g-dependence left is the default
    penalty, so dH/dg = -gamma exp(alpha(g + pi' ell - psi)).
    """
    theta = np.atleast_1d(np.asarray(theta, float))
    if delta is None:
        pi, ell = theta, inp.ell_e
    else:
        pi, ell = np.append(theta, float(delta)), inp.ell
    log_term = np.log(inp.gamma) + inp.alpha * (inp.g + pi @ ell - inp.psi)
    return float(-np.exp(min(log_term, 700.0)))


def decomposition_gap(theta, delta, g, psi, alpha, ell_e, gamma, credit_intensity) -> float:
    """Violation of the CDS position decomposition.

    delta = ell' theta + (g - psi) + (1/alpha) log(gamma / credit_intensity),
    where the credit intensity is gamma_tilde in the complete market and the
    dual-optimal default intensity PL(g, p) / ell'Sigma^{-1}ell in general.
    """
    theta = np.atleast_1d(np.asarray(theta, float))
    ell_e = np.atleast_1d(np.asarray(ell_e, float))
    rhs = float(ell_e @ theta) + (g - psi) + np.log(gamma / credit_intensity) / alpha
    return abs(float(delta) - rhs)


# ---------------------------------------------------------------------------
# vectorized d = 1 fast path (shared by the PDE solvers and policy extraction)
# ---------------------------------------------------------------------------

@dataclass
class CoefficientTable:
    """Per-node coefficient contractions at one time level (d = 1)."""

    t: float
    x: np.ndarray
    alpha: float
    a: np.ndarray            # scalar diffusion a(t, x)
    A: np.ndarray            # a^2
    b: np.ndarray            # physical drift
    gamma: np.ndarray
    gamma_tilde: np.ndarray
    psi: np.ndarray
    nu_tilde: np.ndarray
    sigma_r: np.ndarray
    qc: np.ndarray           # complete-market entropy rate
    k3: np.ndarray           # ell'Sigma_e^{-1}ell
    l_mu: np.ndarray         # ell'Sigma_e^{-1}mu_e
    l_ups: np.ndarray        # ell'Sigma_e^{-1}Upsilon_e
    m_ups: np.ndarray        # mu_e'Sigma_e^{-1}Upsilon_e
    mu_mu: np.ndarray        # mu_e'Sigma_e^{-1}mu_e
    ups_ups: np.ndarray      # Upsilon_e'Sigma_e^{-1}Upsilon_e
    a_nu: np.ndarray         # a * nu_tilde
    rho_sq: np.ndarray       # rho' rho (scalar per node)
    sol_mu: np.ndarray       # (n, k) Sigma_e^{-1} mu_e
    sol_ell: np.ndarray      # (n, k)
    sol_ups: np.ndarray      # (n, k)

    @property
    def b_tilde(self) -> np.ndarray:
        """Pricing-measure drift b - a nu_tilde (complete-market generator)."""
        return self.b - self.a * self.nu_tilde

    @property
    def b_bar(self) -> np.ndarray:
        """Drift of the incomplete-market linear generator:
        b - a rho' sigma_e^{-1}(mu_e - gamma_tilde ell_e) = b - (m_ups - gt*l_ups)."""
        return self.b - (self.m_ups - self.gamma_tilde * self.l_ups)


def build_table(spec: ModelSpec, t: float, x_nodes: np.ndarray,
                curve=None) -> CoefficientTable:
    """Evaluate and contract all coefficients on the x-grid at time t."""
    if spec.dim_factors != 1:
        raise ModelError("the vectorized path is implemented for d = 1")
    x = np.asarray(x_nodes, float)
    n = x.shape[0]
    k = spec.dim_equities
    sig_e = np.asarray(spec.equity_vol(t, x), float).reshape(n, k, k)
    mu_e = np.asarray(spec.equity_drift(t, x), float).reshape(n, k)
    ell = np.asarray(spec.loss(t, x), float).reshape(n, k)
    rho = np.asarray(spec.correlation(t, x), float).reshape(n, k, 1)
    a = np.asarray(spec.diffusion(t, x), float).reshape(n)
    b = np.asarray(spec.drift(t, x), float).reshape(n)
    gam = np.asarray(spec.intensity_p(t, x), float).reshape(n)
    gam_t = np.asarray(spec.intensity_ptilde(t, x), float).reshape(n)
    psi = np.asarray(spec.post_default(t, x), float).reshape(n)
    nu_t = np.asarray(spec.risk_premia(t, x), float).reshape(n)
    if curve is not None:
        s_r = np.asarray(curve.sigma_r(t, x), float).reshape(n)
    else:
        s_r = np.zeros(n)

    Sigma_e = np.einsum("nij,nkj->nik", sig_e, sig_e)
    ups = np.einsum("nij,njd->nid", sig_e, rho)[:, :, 0] * a[:, None]  # (n, k)
    rhs = np.stack([mu_e, ell, ups], axis=-1)                           # (n, k, 3)
    try:
        sol = np.linalg.solve(Sigma_e, rhs)
    except np.linalg.LinAlgError as exc:
        raise CoefficientError(f"equity covariance singular on the grid at t = {t}") from exc
    sol_mu, sol_ell, sol_ups = sol[:, :, 0], sol[:, :, 1], sol[:, :, 2]

    k3 = np.einsum("nk,nk->n", ell, sol_ell)
    l_mu = np.einsum("nk,nk->n", ell, sol_mu)
    l_ups = np.einsum("nk,nk->n", ell, sol_ups)
    m_ups = np.einsum("nk,nk->n", mu_e, sol_ups)
    mu_mu = np.einsum("nk,nk->n", mu_e, sol_mu)
    ups_ups = np.einsum("nk,nk->n", ups, sol_ups)
    rho_sq = np.einsum("nkd,nkd->n", rho, rho)

    # entropy term guarded so gamma = gamma_tilde = 0 limits stay finite
    live = (gam > 0.0) & (gam_t > 0.0)
    ratio = np.where(live, gam / np.where(gam_t > 0, gam_t, 1.0), 1.0)
    qc = 0.5 * (mu_mu - 2.0 * gam_t * l_mu + gam_t**2 * k3) + gam_t * (
        ratio - 1.0 - np.log(ratio)
    )
    return CoefficientTable(
        t=t, x=x, alpha=spec.alpha, a=a, A=a * a, b=b, gamma=gam,
        gamma_tilde=gam_t, psi=psi, nu_tilde=nu_t, sigma_r=s_r, qc=qc,
        k3=k3, l_mu=l_mu, l_ups=l_ups, m_ups=m_ups, mu_mu=mu_mu,
        ups_ups=ups_ups, a_nu=a * nu_t, rho_sq=rho_sq,
        sol_mu=sol_mu, sol_ell=sol_ell, sol_ups=sol_ups,
    )


def _log_k4_array(c: CoefficientTable, g, p):
    return np.log(c.k3 * c.gamma) + c.alpha * (g - c.psi) + c.l_mu - c.alpha * c.l_ups * p


def reduced_complete_array(c: CoefficientTable, g, p):
    """H_c on arrays: (Q_c - gamma)/alpha + gt (psi - g) + (alpha/2) A p^2 - p a nu."""
    m_tilde = c.m_ups - c.gamma_tilde * c.l_ups
    return (
        (c.qc - c.gamma) / c.alpha
        + c.gamma_tilde * (c.psi - g)
        + 0.5 * c.alpha * c.A * p**2
        - p * m_tilde
    )


def residual_h_array(c: CoefficientTable, g, p, regime: str):
    """R_H on arrays for the established sigma_r regime."""
    if regime == "zero":
        return np.zeros_like(np.asarray(g, float))
    k1_bar = c.A - c.ups_ups
    k1 = c.sigma_r**2 * k1_bar
    if np.any(k1 <= _K1_TOL):
        raise ModelError("vanishing Schur complement inside the positive sigma_r regime")
    k2 = -c.gamma_tilde + c.sigma_r * (c.a_nu - c.m_ups - c.alpha * k1_bar * p)
    k5 = 1.0 + c.sigma_r * c.l_ups
    k6 = c.k3 + k5**2 / k1
    log_k4 = _log_k4_array(c, g, p)
    W = pl_of_log(log_k4 + np.log(k6 / c.k3) - k5 * k2 / k1)
    log_term = log_k4 - np.log(c.gamma_tilde * c.k3)
    return (
        -c.gamma_tilde**2 * c.k3 / (2.0 * c.alpha)
        + c.gamma_tilde / c.alpha * (1.0 + log_term)
        + k2**2 / (2.0 * c.alpha * k1)
        - (W**2 + 2.0 * W) / (2.0 * c.alpha * k6)
    )


def reduced_incomplete_array(c: CoefficientTable, g, p, regime: str):
    """H_i on arrays: base + R_H."""
    base = (
        (c.qc - c.gamma) / c.alpha
        + c.gamma_tilde * (c.psi - g)
        + 0.5 * c.alpha * c.ups_ups * p**2
        - p * (c.m_ups - c.gamma_tilde * c.l_ups)
    )
    return base + residual_h_array(c, g, p, regime)


def reduced_nocds_array(c: CoefficientTable, g, p):
    """Equity-only reduced Hamiltonian on arrays; gamma = 0 nodes drop the
    default penalty entirely."""
    quad = (c.mu_mu - 2.0 * c.alpha * c.m_ups * p + c.alpha**2 * c.ups_ups * p**2) / (
        2.0 * c.alpha
    )
    live = c.gamma > 0.0
    w = np.zeros_like(c.gamma)
    if np.any(live):
        logk4 = (
            np.log(c.k3[live] * c.gamma[live])
            + c.alpha * (np.asarray(g, float)[live] - c.psi[live])
            + c.l_mu[live]
            - c.alpha * c.l_ups[live] * np.asarray(p, float)[live]
        )
        w[live] = pl_of_log(logk4)
    return quad - (w**2 + 2.0 * w) / (2.0 * c.alpha * c.k3)


def policies_complete_array(c: CoefficientTable, g, p):
    """(theta, delta) arrays in complete mode; theta is (n, k)."""
    v_comp = 1.0 + c.sigma_r * c.l_ups
    delta = (
        c.l_mu - c.gamma_tilde * c.k3 - c.alpha * c.l_ups * p
        + np.log(c.gamma / c.gamma_tilde) + c.alpha * (g - c.psi)
    ) / (c.alpha * v_comp)
    theta = (
        (c.sol_mu - c.gamma_tilde[:, None] * c.sol_ell) / c.alpha
        - c.sol_ups * (p + delta * c.sigma_r)[:, None]
    )
    return theta, delta


def policies_incomplete_array(c: CoefficientTable, g, p, regime: str):
    """(theta, delta) arrays in incomplete mode for the given regime."""
    log_k4 = _log_k4_array(c, g, p)
    if regime == "zero":
        delta = (-c.gamma_tilde * c.k3 + log_k4 - np.log(c.gamma_tilde * c.k3)) / c.alpha
        w_opt = c.gamma_tilde * c.k3
        sig_term = 0.0
    else:
        k1_bar = c.A - c.ups_ups
        k1 = c.sigma_r**2 * k1_bar
        if np.any(k1 <= _K1_TOL):
            raise ModelError("vanishing Schur complement inside the positive sigma_r regime")
        k2 = -c.gamma_tilde + c.sigma_r * (c.a_nu - c.m_ups - c.alpha * k1_bar * p)
        k5 = 1.0 + c.sigma_r * c.l_ups
        k6 = c.k3 + k5**2 / k1
        W = pl_of_log(log_k4 + np.log(k6 / c.k3) - k5 * k2 / k1)
        delta = k2 / (c.alpha * k1) + k5 * W / (c.alpha * k1 * k6)
        w_opt = W * c.k3 / k6
        sig_term = delta * c.sigma_r
    theta = (
        c.sol_mu / c.alpha
        - c.sol_ups * (p + sig_term)[:, None]
        - (w_opt / (c.alpha * c.k3))[:, None] * c.sol_ell
    )
    return theta, delta


def policy_nocds_array(c: CoefficientTable, g, p):
    """Equity-only optimal position on arrays (n, k)."""
    live = c.gamma > 0.0
    w = np.zeros_like(c.gamma)
    if np.any(live):
        logk4 = _log_k4_array(c, g, p)[live]
        w[live] = pl_of_log(logk4)
    return (
        c.sol_mu / c.alpha
        - c.sol_ups * np.asarray(p, float)[:, None]
        - (w / (c.alpha * c.k3))[:, None] * c.sol_ell
    )
