"""Numerical laboratory for infinite-horizon coupled forward-backward SDEs
with random coefficients."""

from .core import (BrownianBundle, BrownianFactor, CoefficientSet, ConstantsRecord, PathTriple,
                   TimeGrid, resample_grid, standard_error, weighted_norm, weighted_norm_array)
from .conditions import (LambdaWindow, SamplerConfig, estimate_constants, gamma_ratio,
                         grid_minimize_lower, lambda_window, lambda_window_optimal,
                         saddlepoint_window, yin_lower_bound)
from .errors import (CoverageError, DecoupledSystemError, DivergenceError, InvalidInputError,
                     InvalidModeError, NonConvergenceError, OracleUnavailableError,
                     RegressionError)
from .simulate import euler_forward, forward_paths, generate_brownian, shift
from .bsde import BasisConfig, BSDEResult, backward_sweep, solve_bsde
from .picard import (ComparisonReport, SensitivityReport, SolveConfig, SolveDiagnostics,
                     comparison_harness, gamma1_step, gamma2_step, sensitivity_harness,
                     solve_fbsde, window_for)
from .models import (ZOO, AffineOracle, ModelSpec, affine_decoupling, black_consol_model,
                     blanchard_model, dornbusch_model, dornbusch_oracle, dornbusch_window,
                     krugman_model, linear_model, rem_equivalence_residual, shifted_driver,
                     sine_rate)
from .field import (RepresentingField, StationarityReport, build_field, coverage_fraction,
                    decoupling_residual, ikw_cases, ikw_residual, stationarity_test,
                    z_consistency_residual)
from .control import (AdjointSolution, ControlConfig, ControlProblem, Policy, VerifyConfig,
                      VerifyReport, adjoint_solve, cost, gradient, hamiltonian, lq_problem,
                      optimize_policy, verify_max_principle)

__version__ = "0.1.0"
