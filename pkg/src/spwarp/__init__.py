"""Warped spatial regression with Moran-eigenvector random effects.

The package fits regression models whose response is mapped to a Gaussian
working scale by a chain of invertible transformations (Box-Cox,
sinh-arcsinh warps, started-log for counts) while spatial structure in the
residuals and, optionally, in the coefficients is captured by a low-rank
Moran eigenvector basis estimated by restricted maximum likelihood.
"""

from .basis import (
    ProximityMatrix,
    EigenBasis,
    ExtendedBasis,
    build_kernel_proximity,
    build_contiguity_proximity,
    extract_basis,
    extend_basis,
)
from .transforms import (
    TransformSpec,
    TransformChain,
    SALParams,
    boxcox_forward,
    boxcox_inverse,
    sal_forward,
    sal_inverse,
    sal_deriv,
    count_forward,
    count_inverse,
    fit_chain,
    gaussianization_report,
)
from .errors import (
    SpwarpError,
    ConfigError,
    DataError,
    NumericError,
    ArchiveVersionError,
)

__version__ = "0.1.0"


_LAZY_MODULES = ("estimator", "inference", "predictor", "dataio", "cli")


def __getattr__(name):
    # estimator and friends import lazily to keep `import spwarp` light
    import importlib
    if name in _LAZY_MODULES:
        return importlib.import_module(f".{name}", __name__)
    for modname in _LAZY_MODULES:
        module = importlib.import_module(f".{modname}", __name__)
        if hasattr(module, name):
            return getattr(module, name)
    raise AttributeError(f"module 'spwarp' has no attribute {name!r}")


__all__ = [
    "ProximityMatrix", "EigenBasis", "ExtendedBasis",
    "build_kernel_proximity", "build_contiguity_proximity",
    "extract_basis", "extend_basis",
    "TransformSpec", "TransformChain", "SALParams",
    "boxcox_forward", "boxcox_inverse", "sal_forward", "sal_inverse",
    "sal_deriv", "count_forward", "count_inverse", "fit_chain",
    "gaussianization_report",
    "ModelSpec", "FittedModel", "fit_resf", "fit_resf_vc",
    "restricted_loglik", "info_criteria", "fit_statistics",
    "marginal_effects", "predictive_quantiles", "estimated_density",
    "distribution_moments", "significance_summary",
    "predict_oos", "PredictionResult",
    "RunConfig", "parse_config", "ingest", "save_model", "load_model",
    "run_fit", "run_predict", "run_basis", "run_transform_check",
    "SpwarpError", "ConfigError", "DataError", "NumericError",
    "ArchiveVersionError",
    "__version__",
]
