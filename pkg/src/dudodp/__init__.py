"""Unsupervised CT metal artifact reduction with dual-domain diffusion priors."""

from .errors import ConfigurationError, ContractError, DataError, DenoiserUnavailable
from .tomography import Geometry, back_project, fbp, forward_project, hu_to_mu, mu_to_hu, ramp_filter

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DataError",
    "DenoiserUnavailable",
    "Geometry",
    "back_project",
    "fbp",
    "forward_project",
    "hu_to_mu",
    "mu_to_hu",
    "ramp_filter",
]
