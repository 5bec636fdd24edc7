"""Composite Gauss-Legendre quadrature with fixed breakpoints.

The temporal kernels are smooth except at a few known points (the support
edges and the origin), so integrals are split there and each smooth piece is
covered by equal panels of a fixed-order Gauss-Legendre rule.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

ORDER = 8


@lru_cache(maxsize=None)
def _leggauss(order: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(order)


def nodes_weights(a: float, b: float, breaks=(), panels: int = 4, order: int = ORDER) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for ``int_a^b`` split at interior ``breaks``.

    Args:
        a: Lower limit.
        b: Upper limit (``b <= a`` gives an empty rule).
        breaks: Points where the integrand may be non-smooth.
        panels: Equal panels per smooth piece.
        order: Gauss-Legendre order per panel.
    """
    if b <= a:
        return np.zeros(0), np.zeros(0)
    cuts = [a] + sorted(x for x in breaks if a < x < b) + [b]
    x0, w0 = _leggauss(order)
    xs, ws = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        edges = np.linspace(lo, hi, panels + 1)
        for p0, p1 in zip(edges[:-1], edges[1:]):
            half = 0.5 * (p1 - p0)
            xs.append(p0 + half * (x0 + 1.0))
            ws.append(half * w0)
    return np.concatenate(xs), np.concatenate(ws)


def integrate(f, a: float, b: float, breaks=(), panels: int = 4, order: int = ORDER):
    """Integrates a vectorized function over ``[a, b]``."""
    x, w = nodes_weights(a, b, breaks, panels, order)
    if x.size == 0:
        return 0.0
    return np.tensordot(w, f(x), axes=(0, 0))
