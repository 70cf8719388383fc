"""Polynomial value-function approximations for optimal control via sums of squares."""

from lib.utils import code_version

__version__ = code_version()
