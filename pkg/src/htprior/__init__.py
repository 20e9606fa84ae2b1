"""Learned line priors through Hough-transform / inverse-Hough-transform layers."""
from htprior.errors import ConfigurationError, HTPriorError, LoadError, UsageError
from htprior.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigurationError", "HTPriorError", "LoadError", "UsageError", "__version__"]
