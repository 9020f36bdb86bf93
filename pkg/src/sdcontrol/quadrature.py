"""Gauss rules on the reference triangle and the reference edge."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 20


@dataclass(frozen=True)
class QuadratureRule:
    """
    Quadrature rule in barycentric coordinates.

    ``points`` has shape ``(n, 3)`` on the triangle ``(0,0), (1,0), (0,1)``
    and ``(n, 2)`` on the edge ``[0, 1]``; ``weights`` sum to the reference
    measure (1/2 and 1 respectively).
    """
    domain: str
    degree: int
    points: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def make_quadrature(domain, degree):
    """
    Build a rule exact for polynomials of total degree ``<= degree``.

    Triangle rules are collapsed (Duffy) products of Gauss-Legendre and
    Gauss-Jacobi(1, 0) points; all weights are positive and all points lie
    strictly inside the triangle.
    """
    if int(degree) != degree or not 1 <= degree <= MAX_DEGREE:
        raise ValueError("unsupported quadrature degree %r (1..%d)"
                         % (degree, MAX_DEGREE))
    n = (int(degree) + 2) // 2
    s, ws = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (s + 1.0)
    ws = 0.5 * ws
    if domain == "edge":
        pts = np.column_stack([1.0 - s, s])
        return QuadratureRule("edge", int(degree), pts, ws)
    if domain != "triangle":
        raise ValueError("unknown quadrature domain %r" % (domain,))
    t, wt = roots_jacobi(n, 1.0, 0.0)
    t = 0.5 * (t + 1.0)
    wt = 0.25 * wt
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    x = (S * (1.0 - T)).ravel()
    y = T.ravel()
    pts = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule("triangle", int(degree), pts, W.ravel())
