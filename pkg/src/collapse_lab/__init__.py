"""Numerical laboratory for stochastic collapse models on finite-dimensional spaces."""

from __future__ import annotations

from collapse_lab.errors import CollapseLabError

__all__ = ["CollapseLabError", "__version__"]

__version__ = "0.1.0"
