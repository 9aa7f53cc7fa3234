"""Universal label-space taxonomy and the numerical kernels that consume it."""

__version__ = "0.1.0"
