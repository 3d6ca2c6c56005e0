import math

import numpy as np
import pytest

from qmcns.quadrature import collapsed_gauss, triangle_rule


def exact_monomial(a, b):
    # int over the reference triangle of x^a y^b, divided by its area 1/2
    return 2.0 * math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


@pytest.mark.parametrize("degree", range(0, 13))
def test_rule_exact_up_to_degree(degree):
    bary, w = triangle_rule(degree)
    assert np.all(w > 0)
    assert abs(w.sum() - 1.0) < 1e-14
    assert np.allclose(bary.sum(axis=1), 1.0)
    x, y = bary[:, 1], bary[:, 2]
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            assert abs(w @ (x**a * y**b) - exact_monomial(a, b)) < 1e-14


def test_degree_five_rule_is_not_exact_for_degree_eight():
    bary, w = triangle_rule(5)
    x = bary[:, 1]
    assert abs(w @ x**8 - exact_monomial(8, 0)) > 1e-6


def test_collapsed_gauss_exactness():
    bary, w = collapsed_gauss(4)
    x, y = bary[:, 1], bary[:, 2]
    assert abs(w @ (x**2 * y**4) - exact_monomial(2, 4)) < 1e-14


def test_rejects_negative_degree():
    with pytest.raises(ValueError):
        triangle_rule(-1)
