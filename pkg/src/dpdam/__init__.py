"""Robust sparse additive models fitted by penalized density power divergence."""

__version__ = "0.1.0"
