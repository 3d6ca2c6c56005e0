"""Quadrature rules on the reference triangle.

Points are returned in barycentric coordinates ``(n, 3)`` and weights are
normalised to sum to one, so a physical integral is ``area * sum(w * f)``.
"""

from functools import lru_cache

import numpy as np


def _orbit3(a, w):
    b = 1.0 - 2.0 * a
    pts = [(b, a, a), (a, b, a), (a, a, b)]
    return pts, [w] * 3


@lru_cache(maxsize=None)
def _symmetric_rule(degree):
    if degree <= 1:
        return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
    if degree == 2:
        pts, wts = _orbit3(1 / 6, 1 / 3)
        return np.array(pts), np.array(wts)
    if degree in (3, 4):
        p1, w1 = _orbit3(0.445948490915965, 0.223381589678011)
        p2, w2 = _orbit3(0.091576213509771, 0.109951743655322)
        return np.array(p1 + p2), np.array(w1 + w2)
    if degree == 5:
        r15 = np.sqrt(15.0)
        p1, w1 = _orbit3((6 - r15) / 21, (155 - r15) / 1200)
        p2, w2 = _orbit3((6 + r15) / 21, (155 + r15) / 1200)
        pts = [(1 / 3, 1 / 3, 1 / 3)] + p1 + p2
        return np.array(pts), np.array([9 / 40] + w1 + w2)
    raise ValueError(f"no symmetric rule tabulated for degree {degree}")


@lru_cache(maxsize=None)
def collapsed_gauss(n):
    """Duffy-collapsed tensor Gauss-Legendre rule, exact to degree ``2n - 2``.

    The collapse adds a linear Jacobian factor, which costs one degree.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    # (u, v) in the unit square -> (s, t) = (u, v (1 - u)) in the triangle
    s = u.ravel()
    t = (v * (1.0 - u)).ravel()
    weights = 2.0 * (wu * wv * (1.0 - u)).ravel()
    bary = np.column_stack([1.0 - s - t, s, t])
    return bary, weights


def triangle_rule(degree):
    """Return ``(bary, weights)`` exact for polynomials up to ``degree``.

    Degrees up to 5 use fixed symmetric Gauss rules; higher degrees fall back
    to a collapsed Gauss-Legendre product rule.
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if degree <= 5:
        return _symmetric_rule(degree)
    return collapsed_gauss((degree + 3) // 2)
