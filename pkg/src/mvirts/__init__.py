"""Mask-aware transformer classifiers for irregularly sampled multivariate series."""

__version__ = "0.1.0"
