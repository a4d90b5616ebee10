"""Utility-indifference prices of defaultable bonds and the relative benefit.

The indifference price per unit notional is the difference quotient of
certainty-equivalent surfaces, p(t, x; q) = (G(t, x; q) - G(t, x; 0)) / q.
In the complete market this collapses to the unique arbitrage-free survival
price and is independent of q; in the incomplete market the q-dependence is
the quantity of interest.  Recovery enters by absorbing q * R(t, x) into
the post-default payoff of the bond-holding leg.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import GridSpec, ModelSpec
from .solver import ValueSurface, solve_linear_complete, solve_semilinear_incomplete

__all__ = ["PriceSurface", "indifference_price", "with_recovery", "relative_benefit"]


@dataclass
class PriceSurface:
    """Per-unit indifference prices for a set of notionals on one grid."""

    t_nodes: np.ndarray
    x_nodes: np.ndarray
    q_values: np.ndarray
    prices: np.ndarray                 # (nq, nt + 1, nx)
    base_surface: ValueSurface         # G(.; 0)
    claim_surfaces: list               # G(.; q) in q order

    def at_time_zero(self, iq: int) -> np.ndarray:
        return self.prices[iq, 0, :]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "q", "series", "value"])
            for iq, q in enumerate(self.q_values):
                for i, t in enumerate(self.t_nodes):
                    for j, x in enumerate(self.x_nodes):
                        writer.writerow([
                            f"{t:.12g}", f"{x:.12g}", f"{q:.12g}",
                            "indifference_price", f"{self.prices[iq, i, j]:.12g}",
                        ])


def _solve(spec: ModelSpec, grid: GridSpec, mode: str, curve=None) -> ValueSurface:
    if mode == "complete":
        return solve_linear_complete(spec, grid, curve=curve)
    if mode == "incomplete":
        return solve_semilinear_incomplete(spec, grid, curve)
    raise ValueError(f"unknown solver mode {mode!r}")


def indifference_price(spec: ModelSpec, q: float, solver_mode: str, grid: GridSpec,
                       curve=None, base_surface: Optional[ValueSurface] = None,
                       claim_spec: Optional[ModelSpec] = None):
    """Price surface slice for notional q (plus the two value surfaces).

    ``base_surface`` lets callers share the phi = 0 solve across notionals.
    ``claim_spec`` overrides the bond-holding spec (used by recovery, which
    modifies the post-default payoff of that leg only).
    """
    if q == 0.0:
        raise ValueError("indifference price needs a nonzero notional")
    if base_surface is None:
        base_surface = _solve(spec.with_constant_claim(0.0), grid, solver_mode, curve)
    holding = claim_spec if claim_spec is not None else spec.with_constant_claim(q)
    claim_surface = _solve(holding, grid, solver_mode, curve)
    prices = (claim_surface.values - base_surface.values) / q
    return prices, claim_surface, base_surface


def price_table(spec: ModelSpec, q_values, solver_mode: str, grid: GridSpec,
                curve=None, recovery: Optional[Callable] = None) -> PriceSurface:
    """Indifference prices for several notionals, sharing the base solve."""
    base = _solve(spec.with_constant_claim(0.0), grid, solver_mode, curve)
    prices = []
    claim_surfaces = []
    for q in q_values:
        holding = None
        if recovery is not None:
            holding = with_recovery(spec, q, recovery).with_constant_claim(q)
        p, cs, _ = indifference_price(spec, q, solver_mode, grid, curve,
                                      base_surface=base, claim_spec=holding)
        prices.append(p)
        claim_surfaces.append(cs)
    return PriceSurface(
        t_nodes=grid.t_nodes, x_nodes=grid.x_nodes,
        q_values=np.asarray(list(q_values), float),
        prices=np.array(prices), base_surface=base, claim_surfaces=claim_surfaces,
    )


def with_recovery(spec: ModelSpec, q: float, recovery_fn: Callable) -> ModelSpec:
    """Spec whose post-default payoff absorbs q units of bond recovery.

    The recovery R(t, x) must be nonnegative; the new post-default value is
    psi + q * R.  The claim is left untouched (set it per leg).
    """
    old_psi = spec.post_default

    def psi(t, x):
        r = np.asarray(recovery_fn(t, x), float)
        if np.any(r < -1e-12):
            raise ValueError("recovery must be nonnegative")
        out = np.asarray(old_psi(t, x), float) + q * r
        return float(out) if out.ndim == 0 else out

    return spec.with_post_default(psi)


def relative_benefit(ce_cds: ValueSurface, ce_nocds: ValueSurface,
                     tiny: float = 1e-12) -> np.ndarray:
    """Pointwise CE_with / CE_without - 1; masked (NaN) where the base vanishes."""
    if ce_cds.values.shape != ce_nocds.values.shape:
        raise ValueError("relative benefit needs surfaces on identical grids")
    if not (np.allclose(ce_cds.t_nodes, ce_nocds.t_nodes)
            and np.allclose(ce_cds.x_nodes, ce_nocds.x_nodes)):
        raise ValueError("relative benefit needs surfaces on identical grids")
    denom = ce_nocds.values
    bad = np.abs(denom) < tiny
    if np.any(bad):
        warnings.warn(
            f"relative benefit undefined at {int(bad.sum())} nodes (zero base CE)",
            RuntimeWarning,
        )
    out = np.where(bad, np.nan, ce_cds.values / np.where(bad, 1.0, denom) - 1.0)
    return out
