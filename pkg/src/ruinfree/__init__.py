"""Minimum probability of lifetime ruin with deferred life annuities.

Pipeline: solve the dual obstacle problem with projected SOR (fbp),
Legendre-transform it into the primal ruin surface and strategy field
(dual), and cross-check by Monte Carlo simulation of the controlled
wealth process (simulate).  Closed forms live in model; the CLI wires
everything together.
"""

from .model import (AnnuityState, ModelParams, ParameterError, deferred_price,
                    exponent_d, obstacle_u, one_shot_annuity_ruin,
                    paper_example_params, phi, pi_star_no_annuity, safe_level,
                    safe_level_immediate, terminal_dual_g)
from .fbp import (BoundaryStructureError, ConvergenceError, DualGrid, GridError,
                  ObstacleSolution, assemble_operator, build_grid,
                  extract_boundaries, psor_step, solve_obstacle)
from .dual import (ConcavityError, RuinSurface, SweepResult, build_ruin_surface,
                   check_verification_conditions, legendre_transform,
                   ruin_probability, solve_annuity_sweep, strategy_field,
                   validate_ineq)
from .simulate import (SimConfig, SimReport, path_diagnostics, simulate_no_annuity,
                       simulate_ruin)

__all__ = [name for name in dir() if not name.startswith("_")]
