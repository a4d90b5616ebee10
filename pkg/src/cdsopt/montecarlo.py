"""Path-simulation estimators: the independent oracle for the PDE solvers.

Everything here is deliberately decoupled from the finite-difference code:
factor paths are simulated by Euler full truncation (or exact noncentral
chi-square sampling for pure-factor functionals), defaults come from the
canonical hazard construction against independent exponential draws, and
expectations are reported with standard errors.  Randomness uses numpy's
counter-based Philox streams keyed by the seed; antithetic variates are the
only variance-reduction device.  The big estimators stream over time steps,
keeping memory at O(paths) regardless of the step count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .cir import CirParams, ptilde_params
from .model import ModelError, ModelSpec, q_complete, rho_bar
from .solver import PolicySurface, ValueSurface

__all__ = [
    "SimConfig",
    "McEstimate",
    "simulate_factor",
    "sample_default",
    "feynman_kac_G",
    "simulate_wealth",
    "dual_density_check",
    "expected_utility",
    "measure_consistency_gap",
]


@dataclass(frozen=True)
class SimConfig:
    """Simulation knobs: path count, step, seed, scheme and measure tags."""

    n_paths: int = 100_000
    dt: float = 1e-3
    seed: int = 7
    scheme: str = "euler"        # "euler" (full truncation) | "exact"
    measure: str = "P"           # "P" | "Ptilde"
    antithetic: bool = True

    def __post_init__(self):
        if self.n_paths < 1:
            raise ModelError("need at least one path")
        if self.dt <= 0:
            raise ModelError("time step must be positive")
        if self.scheme not in ("euler", "exact"):
            raise ModelError(f"unknown scheme {self.scheme!r}")
        if self.measure not in ("P", "Ptilde"):
            raise ModelError(f"unknown measure {self.measure!r}")

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed + (stream << 32)))


@dataclass(frozen=True)
class McEstimate:
    """Sample mean with its standard error."""

    mean: float
    stderr: float
    n_paths: int

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("standard error cannot be negative")

    def within(self, target: float, n_se: float = 3.0, floor: float = 0.0) -> bool:
        tol = max(n_se * self.stderr, floor)
        return abs(self.mean - target) <= tol


def _estimate(samples: np.ndarray) -> McEstimate:
    n = samples.shape[0]
    mean = float(np.add.reduce(samples) / n)  # pairwise summation
    stderr = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return McEstimate(mean=mean, stderr=stderr, n_paths=n)


def _pair_means(values: np.ndarray, antithetic: bool) -> np.ndarray:
    """Collapse antithetic pairs (first half vs mirrored half) to pair means."""
    if not antithetic or values.shape[0] < 2:
        return values
    half = values.shape[0] // 2
    return 0.5 * (values[:half] + values[half:2 * half])


class _NormalStream:
    """Per-step standard normals with optional antithetic mirroring."""

    def __init__(self, rng, n_paths: int, antithetic: bool, width: int = 1):
        self.rng = rng
        self.n = n_paths
        self.antithetic = antithetic
        self.width = width

    def draw(self) -> np.ndarray:
        shape = (self.n, self.width)
        if self.antithetic:
            half = (self.n + 1) // 2
            z = self.rng.standard_normal((half, self.width))
            out = np.vstack([z, -z])[: self.n]
        else:
            out = self.rng.standard_normal(shape)
        return out if self.width > 1 else out[:, 0]


def _factor_params(spec: ModelSpec, measure: str) -> CirParams:
    fam = spec.cir
    if fam is None:
        raise ModelError("simulation needs a spec from the affine CIR family")
    if measure == "P":
        return CirParams(kappa=fam.kappa, theta=fam.theta, xi=fam.xi,
                         intensity_slope=fam.gamma1, intensity_level=fam.gamma0)
    return ptilde_params(spec)


def _steps(config: SimConfig, t: float, T: float):
    if not T > t:
        raise ModelError("horizon must exceed the start time")
    n_steps = max(1, int(round((T - t) / config.dt)))
    dt = (T - t) / n_steps
    return n_steps, dt


def simulate_factor(spec: ModelSpec, config: SimConfig, t: float, x: float,
                    horizon: Optional[float] = None, rng=None):
    """Simulate the factor from (t, x); returns (times, paths) with the full
    ensemble in memory (paths is (n_paths, n_steps + 1); size accordingly).

    Euler full truncation clamps negative excursions to zero inside the
    drift and diffusion arguments; the exact scheme samples the CIR
    transition from the noncentral chi-square.
    """
    params = _factor_params(spec, config.measure)
    T = spec.horizon if horizon is None else horizon
    n_steps, dt = _steps(config, t, T)
    times = t + dt * np.arange(n_steps + 1)
    if rng is None:
        rng = config.rng()
    paths = np.empty((config.n_paths, n_steps + 1))
    paths[:, 0] = x
    kap, th, xi = params.kappa, params.theta, params.xi
    if config.scheme == "euler":
        stream = _NormalStream(rng, config.n_paths, config.antithetic)
        sq = np.sqrt(dt)
        cur = paths[:, 0].copy()
        for m in range(n_steps):
            pos = np.maximum(cur, 0.0)
            cur = cur + kap * (th - pos) * dt + xi * np.sqrt(pos) * sq * stream.draw()
            paths[:, m + 1] = cur
    else:
        if xi <= 0:
            raise ModelError("exact CIR sampling needs xi > 0")
        decay = np.exp(-kap * dt)
        c = xi**2 * (1.0 - decay) / (4.0 * kap)
        df = 4.0 * kap * th / xi**2
        cur = paths[:, 0].copy()
        for m in range(n_steps):
            nc = cur * decay / c
            cur = c * rng.noncentral_chisquare(df, np.maximum(nc, 0.0))
            paths[:, m + 1] = cur
    return times, paths


def sample_default(spec: ModelSpec, times: np.ndarray, paths: np.ndarray,
                   rng) -> np.ndarray:
    """Default times from the canonical hazard construction.

    The cumulative hazard of gamma(s, X_s) along each path (trapezoid rule)
    is compared against an independent standard exponential draw; paths
    whose hazard never reaches the draw get tau = +inf, with linear
    interpolation of the crossing time inside the step.
    """
    gam = np.asarray(spec.intensity_p(times[None, :], paths), float)
    if gam.shape != paths.shape:  # scalar-only callables
        gam = np.vectorize(spec.intensity_p)(np.broadcast_to(times, paths.shape), paths)
    dt = np.diff(times)
    cum = np.concatenate(
        [np.zeros((paths.shape[0], 1)),
         np.cumsum(0.5 * (gam[:, 1:] + gam[:, :-1]) * dt[None, :], axis=1)],
        axis=1,
    )
    draws = rng.exponential(size=paths.shape[0])
    idx = np.argmax(cum >= draws[:, None], axis=1)
    hit = cum[:, -1] >= draws
    tau = np.full(paths.shape[0], np.inf)
    rows = np.where(hit)[0]
    lo = cum[rows, idx[rows] - 1]
    hi = cum[rows, idx[rows]]
    frac = np.where(hi > lo, (draws[rows] - lo) / np.maximum(hi - lo, 1e-300), 0.0)
    step = times[idx[rows]] - times[idx[rows] - 1]
    tau[rows] = times[idx[rows] - 1] + frac * step
    return tau


def feynman_kac_G(spec: ModelSpec, config: SimConfig, t: float, x: float) -> McEstimate:
    """Monte Carlo estimate of the complete-market certainty equivalent.

    G(t, x) = E~[ e^{-int gamma~} phi(X_T)
                  + int_t^T e^{-int gamma~} (Q_c / alpha + gamma~ psi) dv ],
    simulated under the pricing measure, streaming over time with trapezoid
    discounting and integration.
    """
    cfg = replace(config, measure="Ptilde")
    params = _factor_params(spec, "Ptilde")
    n_steps, dt = _steps(cfg, t, spec.horizon)
    rng = cfg.rng()
    stream = _NormalStream(rng, cfg.n_paths, cfg.antithetic)
    sq = np.sqrt(dt)
    qc_const = _qc_slope(spec)

    cur = np.full(cfg.n_paths, float(x))
    cum_haz = np.zeros(cfg.n_paths)
    integral = np.zeros(cfg.n_paths)
    pos = np.maximum(cur, 0.0)
    gam_prev = np.asarray(spec.intensity_ptilde(t, pos), float)
    f_prev = np.exp(-cum_haz) * (
        qc_const * pos / spec.alpha
        + gam_prev * np.asarray(spec.post_default(t, pos), float)
    )
    for m in range(n_steps):
        s_next = t + (m + 1) * dt
        pos = np.maximum(cur, 0.0)
        cur = cur + params.kappa * (params.theta - pos) * dt \
            + params.xi * np.sqrt(pos) * sq * stream.draw()
        pos_next = np.maximum(cur, 0.0)
        gam_next = np.asarray(spec.intensity_ptilde(s_next, pos_next), float)
        cum_haz += 0.5 * (gam_prev + gam_next) * dt
        disc = np.exp(-cum_haz)
        f_next = disc * (
            qc_const * pos_next / spec.alpha
            + gam_next * np.asarray(spec.post_default(s_next, pos_next), float)
        )
        integral += 0.5 * (f_prev + f_next) * dt
        gam_prev, f_prev = gam_next, f_next
    payoff = np.exp(-cum_haz) * np.asarray(spec.claim(pos_next), float) + integral
    return _estimate(_pair_means(payoff, cfg.antithetic))


def _qc_slope(spec: ModelSpec) -> float:
    """Slope of the affine entropy rate Q_c(t, y) = slope * y."""
    fam = spec.cir
    if fam is None or fam.gamma0 != 0.0 or fam.gamma_tilde0 != 0.0:
        raise ModelError("the streaming estimator needs the pure-slope affine family")
    return q_complete(spec, 0.0, 1.0)


def _time_resample(src_t: np.ndarray, table: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Linear time-interpolation of a (nt, nx) table onto new time nodes."""
    out = np.empty((len(times), table.shape[1]))
    for j in range(table.shape[1]):
        out[:, j] = np.interp(times, src_t, table[:, j])
    return out


def _resample_policies(policies: PolicySurface, times: np.ndarray):
    """Policies re-tabulated on the simulation time grid (linear in t)."""
    k = policies.theta.shape[2]
    th = np.stack(
        [_time_resample(policies.t_nodes, policies.theta[:, :, kk], times)
         for kk in range(k)], axis=-1,
    )
    if policies.delta is not None:
        dl = _time_resample(policies.t_nodes, policies.delta, times)
    else:
        dl = np.zeros((len(times), policies.theta.shape[1]))
    return th, dl


def simulate_wealth(spec: ModelSpec, surface: ValueSurface, policies: PolicySurface,
                    config: SimConfig, t: float, x: float):
    """Simulate wealth under the tabulated policies from zero initial wealth.

    Streams the factor, default indicator, and wealth jointly; returns a dict
    with terminal wealth, default times, terminal factor values, and the
    realized endowment payoff phi(X_T) 1{tau>T} + psi(tau, X_tau) 1{tau<=T}.
    Any number of equities is supported with a single factor; the factor
    shock drives the correlated part of the equity returns.
    """
    if spec.dim_factors != 1:
        raise ModelError("wealth simulation is implemented for d = 1")
    n = config.n_paths
    rng = config.rng()
    params = _factor_params(spec, "P")
    n_steps, dt = _steps(config, t, spec.horizon)
    times = t + dt * np.arange(n_steps + 1)
    sq = np.sqrt(dt)
    k = spec.dim_equities
    w_stream = _NormalStream(rng, n, config.antithetic)
    idio_stream = _NormalStream(rng, n, config.antithetic, width=k)
    exp_draws = rng.exponential(size=n)

    th_tab, dl_tab = _resample_policies(policies, times)
    x_nodes = policies.x_nodes
    has_cds = policies.delta is not None
    curve = surface.sigma_r_curve
    sr_tab = None
    if has_cds and curve is not None:
        sr_tab = _time_resample(
            policies.t_nodes, curve.sigma_r_table(policies.t_nodes, x_nodes), times
        )

    cur = np.full(n, float(x))
    wealth = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    hazard = np.zeros(n)
    tau = np.full(n, np.inf)
    x_at_tau = np.full(n, np.nan)
    rb_const = None

    for m in range(n_steps):
        s = float(times[m])
        pos = np.maximum(cur, 0.0)
        z_w = w_stream.draw()
        z_i = idio_stream.draw().reshape(n, k)
        dW = sq * z_w

        gam = np.asarray(spec.intensity_p(s, pos), float)
        new_hazard = hazard + gam * dt
        defaulted_now = alive & (new_hazard >= exp_draws)

        theta_now = np.empty((n, k))
        for kk in range(k):
            theta_now[:, kk] = np.interp(pos, x_nodes, th_tab[m, :, kk])
        delta_now = np.interp(pos, x_nodes, dl_tab[m]) if has_cds else np.zeros(n)

        mu_e = np.asarray(spec.equity_drift(s, pos), float).reshape(n, k)
        sig_e = np.asarray(spec.equity_vol(s, pos), float).reshape(n, k, k)
        rho = np.asarray(spec.correlation(s, pos), float).reshape(n, k, 1)
        ell = np.asarray(spec.loss(s, pos), float).reshape(n, k)
        if rb_const is None:
            rb_const = rho_bar(rho[0])  # constant loadings in the affine family
        dZ = rho[:, :, 0] * dW[:, None] + (z_i @ rb_const.T) * sq

        eq_gain = np.einsum("nk,nk->n", theta_now,
                            mu_e * dt + np.einsum("nij,nj->ni", sig_e, dZ))
        if has_cds:
            a = np.asarray(spec.diffusion(s, pos), float).reshape(n)
            gam_til = np.asarray(spec.intensity_ptilde(s, pos), float)
            nu_til = np.asarray(spec.risk_premia(s, pos), float).reshape(n)
            s_r = np.interp(pos, x_nodes, sr_tab[m]) if sr_tab is not None else 0.0
            cds_gain = delta_now * ((s_r * a * nu_til - gam_til) * dt + s_r * a * dW)
        else:
            cds_gain = 0.0
        wealth = np.where(alive, wealth + eq_gain + cds_gain, wealth)

        if np.any(defaulted_now):
            jump = np.einsum("nk,nk->n", theta_now, ell) - delta_now
            wealth = np.where(defaulted_now, wealth - jump, wealth)
            tau = np.where(defaulted_now, s + dt, tau)
            alive = alive & ~defaulted_now
        hazard = new_hazard

        cur = cur + params.kappa * (params.theta - pos) * dt \
            + params.xi * np.sqrt(pos) * dW
        if np.any(defaulted_now):
            x_at_tau = np.where(defaulted_now, np.maximum(cur, 0.0), x_at_tau)

    survived = np.isinf(tau)
    pos_T = np.maximum(cur, 0.0)
    phi_vals = np.asarray(spec.claim(pos_T), float)
    psi_vals = np.zeros(n)
    if np.any(~survived):
        idx = np.where(~survived)[0]
        tau_c = np.minimum(tau[idx], spec.horizon)
        psi_vals[idx] = np.asarray(spec.post_default(tau_c, x_at_tau[idx]), float)
    payoff = np.where(survived, phi_vals, psi_vals)
    return {
        "terminal_factor": pos_T,
        "wealth": wealth,
        "tau": tau,
        "payoff": payoff,
    }


def dual_density_check(spec: ModelSpec, surface: ValueSurface, policies: PolicySurface,
                       config: SimConfig, t: float, x: float) -> McEstimate:
    """Sample mean of the candidate dual density Z_T; the martingale property
    of the optimal wealth/value pair demands a mean of one.

    Z_T = exp(-alpha (W_T + phi(X_T) 1{tau > T} + psi(tau, X_tau) 1{tau <= T}
                - G(t, x))).
    """
    sim = simulate_wealth(spec, surface, policies, config, t, x)
    g0 = float(surface.value_at(t, x))
    z = np.exp(-spec.alpha * (sim["wealth"] + sim["payoff"] - g0))
    return _estimate(_pair_means(z, config.antithetic))


def expected_utility(spec: ModelSpec, surface: ValueSurface, policies: PolicySurface,
                     config: SimConfig, t: float, x: float) -> McEstimate:
    """Realized E[-exp(-alpha (W_T + payoff))] under the tabulated policies."""
    sim = simulate_wealth(spec, surface, policies, config, t, x)
    u = -np.exp(-spec.alpha * (sim["wealth"] + sim["payoff"]))
    return _estimate(_pair_means(u, config.antithetic))


def measure_consistency_gap(spec: ModelSpec, config: SimConfig, t: float, x: float,
                            functional: Optional[Callable] = None):
    """Reweighted physical-measure estimate vs direct pricing-measure estimate.

    Simulates X under P, reweights f(X_T) by the Girsanov density
    exp(-int nu~ dW - 0.5 int |nu~|^2), and compares against the direct
    pricing-measure simulation of f(X_T).  Returns the two estimates.
    """
    if functional is None:
        functional = lambda v: v
    params = _factor_params(spec, "P")
    n_steps, dt = _steps(config, t, spec.horizon)
    rng = config.rng()
    stream = _NormalStream(rng, config.n_paths, False)
    sq = np.sqrt(dt)
    cur = np.full(config.n_paths, float(x))
    log_density = np.zeros(config.n_paths)
    for m in range(n_steps):
        pos = np.maximum(cur, 0.0)
        dW = sq * stream.draw()
        nu = np.asarray(spec.risk_premia(t + m * dt, np.maximum(pos, 1e-14)),
                        float).reshape(-1)
        log_density += -nu * dW - 0.5 * nu**2 * dt
        cur = cur + params.kappa * (params.theta - pos) * dt \
            + params.xi * np.sqrt(pos) * dW
    reweighted = _estimate(functional(np.maximum(cur, 0.0)) * np.exp(log_density))

    cfg_q = replace(config, measure="Ptilde", antithetic=False,
                    seed=config.seed + 10_000)
    params_q = _factor_params(spec, "Ptilde")
    rng_q = cfg_q.rng()
    stream_q = _NormalStream(rng_q, cfg_q.n_paths, False)
    cur = np.full(cfg_q.n_paths, float(x))
    for m in range(n_steps):
        pos = np.maximum(cur, 0.0)
        cur = cur + params_q.kappa * (params_q.theta - pos) * dt \
            + params_q.xi * np.sqrt(pos) * sq * stream_q.draw()
    direct = _estimate(functional(np.maximum(cur, 0.0)))
    return reweighted, direct
