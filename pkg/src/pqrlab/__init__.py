"""Scaling-strategy laboratory for the neural tangent kernel and its differentials.

Modules: :mod:`~pqrlab.numerics`, :mod:`~pqrlab.family`, :mod:`~pqrlab.network`,
:mod:`~pqrlab.kernels`, :mod:`~pqrlab.oracle`, :mod:`~pqrlab.dynamics`,
:mod:`~pqrlab.estimator`, :mod:`~pqrlab.cli`.
"""

from .errors import (
    DomainError,
    InternalContractError,
    InvalidArgumentError,
    NumericOverflowError,
    PqrError,
    ResourceError,
    ShapeError,
    UnsupportedError,
)
from .family import (
    AbcParams,
    ScalingStrategy,
    derive_meta_family,
    from_abc,
    gamma,
    gauge_transform,
    to_abc,
    validate_meta_principles,
)
from .kernels import KernelStack, LayerKernels, compute_kernels, kernel_step, ntk_first_layer
from .network import (
    Dataset,
    NetworkConfig,
    NetworkParams,
    critical_hyperparameters,
    forward,
    get_activation,
    init_params,
)
from .numerics import Jet, RngStream, contract, fit_loglog_slope, gaussian_sample

__all__ = [
    "AbcParams",
    "Dataset",
    "DomainError",
    "InternalContractError",
    "InvalidArgumentError",
    "Jet",
    "KernelStack",
    "LayerKernels",
    "NetworkConfig",
    "NetworkParams",
    "NumericOverflowError",
    "PqrError",
    "ResourceError",
    "RngStream",
    "ScalingStrategy",
    "ShapeError",
    "UnsupportedError",
    "compute_kernels",
    "contract",
    "critical_hyperparameters",
    "derive_meta_family",
    "fit_loglog_slope",
    "forward",
    "from_abc",
    "gamma",
    "gauge_transform",
    "gaussian_sample",
    "get_activation",
    "init_params",
    "kernel_step",
    "ntk_first_layer",
    "to_abc",
    "validate_meta_principles",
]
