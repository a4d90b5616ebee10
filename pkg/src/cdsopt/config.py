"""YAML model configuration: schema validation and spec construction.

A config file is a nested key/value document with sections ``factor``,
``equity``, ``default``, ``claim``, ``grid`` and ``simulation`` (see the
shipped files under ``cdsopt/configs/`` and the README for the schema).
Validation errors carry the dotted field path of the offender.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .model import (
    ConfigError,
    GridSpec,
    ModelSpec,
    make_cir_complete,
    make_cir_incomplete,
)

__all__ = ["ExperimentConfig", "load_config", "implied_gamma_slope"]


def implied_gamma_slope(one_year_probability: float, theta: float) -> float:
    """Intensity slope making the one-year default probability at the
    long-run mean equal to the target: 1 - exp(-gamma * theta) = p."""
    if not 0.0 < one_year_probability < 1.0:
        raise ConfigError("default.one_year_default_probability: must be in (0, 1)")
    return float(-np.log1p(-one_year_probability) / theta)


def _need(section: dict, key: str, path: str, kind=float):
    if key not in section:
        raise ConfigError(f"{path}.{key}: missing required field")
    val = section[key]
    try:
        if kind is float:
            return float(val)
        if kind is int:
            return int(val)
        if kind is list:
            return list(val)
        return val
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}.{key}: expected {kind.__name__}, got {val!r}") from exc


@dataclass
class ExperimentConfig:
    """Parsed configuration: model family, grid, claim sweep, simulation knobs."""

    mode: str
    risk_aversion: float
    horizon: float
    cds_maturity: float
    factor: dict
    equity: dict
    gamma1: float
    gamma_tilde1: float
    q_values: list
    grid_params: dict
    sim_params: dict
    path: Optional[Path] = None
    sha256: str = ""
    raw: dict = field(default_factory=dict)

    def model(self, q: float = 0.0, post_default=None) -> ModelSpec:
        common = dict(
            kappa=self.factor["kappa"], theta=self.factor["theta"], xi=self.factor["xi"],
            gamma1=self.gamma1, gamma_tilde1=self.gamma_tilde1,
            risk_aversion=self.risk_aversion, horizon=self.horizon,
            cds_maturity=self.cds_maturity, claim_level=q,
        )
        if self.mode == "complete":
            spec = make_cir_complete(
                nu=self.equity["nu"], sigma=self.equity["sigma"],
                loss=self.equity["loss"], **common,
            )
        else:
            spec = make_cir_incomplete(
                nu=np.asarray(self.equity["nu"], float),
                covariance=np.asarray(self.equity["covariance"], float),
                rho=np.asarray(self.equity["rho"], float),
                loss=self.equity["loss"],
                epsilon_rho=self.equity.get("epsilon_rho", 1e-6),
                **common,
            )
        if post_default is not None:
            spec = spec.with_post_default(post_default)
        return spec

    def grid(self) -> GridSpec:
        g = self.grid_params
        return GridSpec.uniform(self.horizon, g["nt"], g["x_min"], g["x_max"], g["nx"])

    @property
    def mollifier_fraction(self) -> float:
        return self.grid_params.get("mollifier_fraction", 0.1)

    @property
    def plot_range(self) -> tuple[float, float]:
        g = self.grid_params
        return g.get("plot_x_min", 0.01), g.get("plot_x_max", 0.2)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    blob = path.read_bytes()
    try:
        raw = yaml.safe_load(blob)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")

    mode = raw.get("mode")
    if mode not in ("complete", "incomplete"):
        raise ConfigError(f"mode: expected 'complete' or 'incomplete', got {mode!r}")
    alpha = _need(raw, "risk_aversion", "<root>")
    horizon = _need(raw, "horizon", "<root>")
    maturity = _need(raw, "cds_maturity", "<root>")
    if alpha <= 0:
        raise ConfigError("risk_aversion: must be positive")
    if not maturity > horizon > 0:
        raise ConfigError("cds_maturity: must exceed horizon (> 0)")

    fac_raw = raw.get("factor")
    if not isinstance(fac_raw, dict):
        raise ConfigError("factor: missing section")
    factor = {k: _need(fac_raw, k, "factor") for k in ("kappa", "theta", "xi")}
    if 2 * factor["kappa"] * factor["theta"] < factor["xi"] ** 2:
        raise ConfigError("factor.xi: Feller condition 2*kappa*theta >= xi^2 violated")

    eq_raw = raw.get("equity")
    if not isinstance(eq_raw, dict):
        raise ConfigError("equity: missing section")
    equity: dict = {"loss": _need(eq_raw, "loss", "equity")}
    if not 0.0 < equity["loss"] <= 1.0:
        raise ConfigError("equity.loss: must lie in (0, 1]")
    if mode == "complete":
        equity["nu"] = _need(eq_raw, "nu", "equity")
        equity["sigma"] = _need(eq_raw, "sigma", "equity")
        if equity["sigma"] <= 0:
            raise ConfigError("equity.sigma: must be positive")
    else:
        equity["nu"] = _need(eq_raw, "nu", "equity", list)
        equity["covariance"] = _need(eq_raw, "covariance", "equity", list)
        equity["rho"] = _need(eq_raw, "rho", "equity", list)
        if "epsilon_rho" in eq_raw:
            equity["epsilon_rho"] = float(eq_raw["epsilon_rho"])
        rho = np.asarray(equity["rho"], float)
        if rho @ rho >= 1.0:
            raise ConfigError(f"equity.rho: rho'rho = {rho @ rho:.4f} must be < 1")
        cov = np.asarray(equity["covariance"], float)
        if cov.shape != (len(rho), len(rho)):
            raise ConfigError("equity.covariance: shape must match rho length")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ConfigError("equity.covariance: must be positive definite")

    d_raw = raw.get("default")
    if not isinstance(d_raw, dict):
        raise ConfigError("default: missing section")
    ratio = _need(d_raw, "gamma_tilde_ratio", "default")
    if ratio <= 0:
        raise ConfigError("default.gamma_tilde_ratio: must be positive")
    if "gamma" in d_raw and d_raw["gamma"] is not None:
        gamma1 = float(d_raw["gamma"])
    elif "one_year_default_probability" in d_raw:
        gamma1 = implied_gamma_slope(float(d_raw["one_year_default_probability"]),
                                     factor["theta"])
    else:
        raise ConfigError("default.gamma: supply gamma or one_year_default_probability")
    if gamma1 <= 0:
        raise ConfigError("default.gamma: must be positive")

    claim_raw = raw.get("claim", {}) or {}
    q_values = [float(q) for q in claim_raw.get("q_values", [1.0])]

    grid_raw = raw.get("grid", {}) or {}
    grid_params = {
        "nt": int(grid_raw.get("nt", 200)),
        "nx": int(grid_raw.get("nx", 500)),
        "x_min": float(grid_raw.get("x_min", 0.004)),
        "x_max": float(grid_raw.get("x_max", 2.0)),
    }
    for key in ("mollifier_fraction", "plot_x_min", "plot_x_max"):
        if key in grid_raw:
            grid_params[key] = float(grid_raw[key])
    if grid_params["x_min"] <= 0:
        raise ConfigError("grid.x_min: must be positive")
    if grid_params["nt"] < 2 or grid_params["nx"] < 10:
        raise ConfigError("grid.nt/nx: grid too coarse")

    sim_raw = raw.get("simulation", {}) or {}
    sim_params = {
        "paths": int(sim_raw.get("paths", 100_000)),
        "dt": float(sim_raw.get("dt", 1e-3)),
        "seed": int(sim_raw.get("seed", 20_240_801)),
    }
    if sim_params["paths"] < 2:
        raise ConfigError("simulation.paths: need at least 2")

    return ExperimentConfig(
        mode=mode, risk_aversion=alpha, horizon=horizon, cds_maturity=maturity,
        factor=factor, equity=equity, gamma1=gamma1,
        gamma_tilde1=ratio * gamma1, q_values=q_values,
        grid_params=grid_params, sim_params=sim_params,
        path=path, sha256=hashlib.sha256(blob).hexdigest(), raw=raw,
    )
