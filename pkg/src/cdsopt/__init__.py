"""Optimal equity and rolling-CDS investment under default risk.

Certainty-equivalent PDE solvers, closed-form Hamiltonian policies,
utility-indifference pricing, and independent Monte Carlo oracles for a
reduced-form default model driven by a diffusive factor.
"""

from .cds import CdsCurve, build_curve, rolling_cds_coefficients, sigma_r
from .cir import AffineTransform, CirParams, build_transform, cir_mean, ptilde_params, survival_transform
from .config import ExperimentConfig, load_config
from .hamiltonian import (
    HamiltonianInputs,
    KCoefficients,
    decomposition_gap,
    general_policy,
    k_coefficients,
    reduced_hamiltonian_complete,
    reduced_hamiltonian_incomplete,
    theta_given_delta,
)
from .model import (
    CirFamily,
    ConfigError,
    GridSpec,
    ModelError,
    ModelSpec,
    NumericalError,
    eval_covariances,
    make_cir_complete,
    make_cir_incomplete,
    make_cir_single_incomplete,
    q_complete,
    q_incomplete,
    v_c,
)
from .montecarlo import McEstimate, SimConfig, dual_density_check, feynman_kac_G, sample_default, simulate_factor
from .postdefault import PsiAffine, build_psi, surviving_asset_spec
from .pricing import PriceSurface, indifference_price, price_table, relative_benefit, with_recovery
from .productlog import PlResult, pl, pl_derivative, pl_of_log, pl_quad_bound_gap
from .solver import (
    Mollifier,
    PolicySurface,
    ValueSurface,
    extract_policies,
    solve_linear_complete,
    solve_localized,
    solve_nocds_benchmark,
    solve_semilinear_incomplete,
)

__version__ = "0.1.0"
