"""Onsager-Machlup and Freidlin-Wentzell functionals for tilted Gaussian measures."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.1.0"
