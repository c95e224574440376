"""Inner envelope regression: GMM, globally and locally efficient estimators of nested response subspaces."""

__version__ = "0.1.0"

from .dataset import Dataset, read_dataset, write_dataset
from .errors import (
    ConvergenceError,
    DataError,
    DimensionError,
    EstimationError,
    InnerEnvelopeError,
    SingularBlockError,
)
from .kernel import KernelSpec
from .modelselect import bootstrap_se, select_dimension
from .moments import MomentConfig, fit_gmm
from .regression import beta_from_bases, fit_parametric_inner_envelope, prediction_rmse
from .simulate import Scenario, generate
from .solver import SolverConfig, fit_global, fit_local, fit_method
from .subspace import Basis, InnerEnvelopeBases, Theta, bases_to_theta, subspace_distance, theta_to_bases

__all__ = [
    "Basis",
    "ConvergenceError",
    "DataError",
    "Dataset",
    "DimensionError",
    "EstimationError",
    "InnerEnvelopeBases",
    "InnerEnvelopeError",
    "KernelSpec",
    "MomentConfig",
    "Scenario",
    "SingularBlockError",
    "SolverConfig",
    "Theta",
    "__version__",
    "bases_to_theta",
    "beta_from_bases",
    "bootstrap_se",
    "fit_global",
    "fit_gmm",
    "fit_local",
    "fit_method",
    "fit_parametric_inner_envelope",
    "generate",
    "prediction_rmse",
    "read_dataset",
    "select_dimension",
    "subspace_distance",
    "theta_to_bases",
    "write_dataset",
]
