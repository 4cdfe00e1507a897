"""resinv: deterministic history matching of two-phase reservoirs.

Estimates log-permeability fields from noisy production data with an
iteratively regularized Levenberg-Marquardt scheme (discrepancy-based
parameter selection and stopping), alongside the standard prior-penalized
Levenberg-Marquardt approach for comparison.
"""

__version__ = "0.1.0"

from .errors import ConfigError, NumericalError, OutsideDomainError, ResinvError
from .geostat import CovarianceOperator, build_covariance, sample_field, spherical_cov
from .grid import Field, Grid, PhysicalParams, Schedule, WellSpec, cell_of
from .reg_lm import RegLMConfig, kappa_eval, reg_lm_step, run_reg_lm, select_alpha
from .sensitivity import SensitivityOperator, assemble_products, jacobian_adjoint, jacobian_fd
from .simulator import ObservationVector, ReservoirModel, mobilities, rel_perm_oil, rel_perm_water
from .std_lm import StdLMConfig, lambda_schedule, objective, run_std_lm, std_lm_step

__all__ = [
    "ConfigError", "NumericalError", "OutsideDomainError", "ResinvError",
    "CovarianceOperator", "build_covariance", "sample_field", "spherical_cov",
    "Field", "Grid", "PhysicalParams", "Schedule", "WellSpec", "cell_of",
    "RegLMConfig", "kappa_eval", "reg_lm_step", "run_reg_lm", "select_alpha",
    "SensitivityOperator", "assemble_products", "jacobian_adjoint", "jacobian_fd",
    "ObservationVector", "ReservoirModel", "mobilities", "rel_perm_oil", "rel_perm_water",
    "StdLMConfig", "lambda_schedule", "objective", "run_std_lm", "std_lm_step",
    "__version__",
]
