import math

import numpy as np
import pytest

from oracles import matern_mpmath
from qmcns.mesh_fem import assemble_p1_mass, build_mesh
from qmcns.random_field import (
    BSequence,
    KLBasis,
    KLError,
    MaternParams,
    assemble_cov_operator,
    b_sequence,
    build_kl,
    estimate_p,
    load_kl,
    matern_cov,
    p1_gradients,
    sample_Z,
    save_kl,
    solve_kl,
)


# -- kernel ----------------------------------------------------------------------

def test_matern_at_zero():
    assert matern_cov(0.0, MaternParams(2.5, 0.7, 1.0)) == 0.7


def test_matern_half_closed_form():
    p = MaternParams(0.5, 1.0, 1.0)
    r = np.linspace(0.0, 3.0, 100)
    assert np.abs(matern_cov(r, p) - np.exp(-math.sqrt(2) * r)).max() <= 1e-10
    assert matern_cov(1.0, p) == pytest.approx(0.2431167345, abs=1e-10)


@pytest.mark.parametrize("nu, sigma2, lam", [(2.5, 1.0, 1.0), (1.75, 0.25, 0.1), (0.5, 2.0, 0.3)])
def test_matern_against_mpmath(nu, sigma2, lam):
    p = MaternParams(nu, sigma2, lam)
    for r in [1e-6, 0.01, 0.1, 0.5, 1.0, 1.4]:
        assert matern_cov(r, p) == pytest.approx(matern_mpmath(r, nu, sigma2, lam), rel=1e-12)


def test_matern_positive_decreasing():
    r = np.linspace(0, 1.5, 400)
    c = matern_cov(r, MaternParams(1.75, 1.0, 0.1))
    assert np.all(c > 0)
    assert np.all(np.diff(c) < 0)


def test_matern_rejects_negative_distance():
    with pytest.raises(ValueError):
        matern_cov(-0.1, MaternParams())


@pytest.mark.parametrize("args", [(0, 1, 1), (1, -1, 1), (1, 1, 0)])
def test_matern_params_validated(args):
    with pytest.raises(ValueError):
        MaternParams(*args)


# -- covariance operator ---------------------------------------------------------

def test_constant_kernel_is_rank_one():
    mesh = build_mesh(4)
    A = assemble_cov_operator(mesh, lambda r: np.ones_like(r))
    m1 = assemble_p1_mass(mesh) @ np.ones(mesh.n_vertices)
    assert np.abs(A - np.outer(m1, m1)).max() < 1e-15


def test_cov_operator_symmetric():
    A = assemble_cov_operator(build_mesh(4), MaternParams(1.75, 1.0, 1.0))
    assert np.abs(A - A.T).max() <= 1e-12 * np.abs(A).max()


def test_cov_quadrature_refinement_converges():
    # tensorised 3-point vs 6-point rules; the gap shrinks at third order
    p = MaternParams(1.75, 1.0, 1.0)
    gaps = []
    for m in (4, 8):
        mesh = build_mesh(m)
        A3 = assemble_cov_operator(mesh, p, quad_degree=2)
        A6 = assemble_cov_operator(mesh, p, quad_degree=4)
        gaps.append(np.abs(A3 - A6).max() / np.abs(A6).max())
    assert gaps[0] < 1e-3
    assert gaps[0] / gaps[1] > 5


def test_cov_operator_memory_guard():
    with pytest.raises(MemoryError):
        assemble_cov_operator(build_mesh(8), MaternParams(), max_nodes=50)


# -- eigenpairs ------------------------------------------------------------------

def test_rank_one_kernel_eigenvalue():
    mesh = build_mesh(4)
    sigma2 = 0.8
    A = assemble_cov_operator(mesh, lambda r: np.full_like(r, sigma2))
    kl = solve_kl(A, assemble_p1_mass(mesh), 3, fine_mesh=mesh)
    assert kl.mu[0] == pytest.approx(sigma2, abs=1e-8)
    assert kl.mu[1] <= 1e-10


def test_kl_invariants():
    mesh = build_mesh(8)
    A = assemble_cov_operator(mesh, MaternParams(2.5, 1.0, 1.0))
    M = assemble_p1_mass(mesh)
    kl = solve_kl(A, M, 30, fine_mesh=mesh)
    assert np.all(np.diff(kl.mu) <= 0)
    Md = M.toarray()
    assert np.abs(kl.xi.T @ Md @ kl.xi - np.eye(30)).max() <= 1e-8
    res = np.abs(A @ kl.xi - (Md @ kl.xi) * kl.mu).max(axis=0)
    assert np.all(res <= 1e-8 * np.abs(A).max())
    assert kl.mu.sum() <= 1.0 + 1e-6


def test_full_spectrum_trace():
    mesh = build_mesh(8)
    kl = solve_kl(assemble_cov_operator(mesh, MaternParams(2.5, 1.0, 1.0)),
                  assemble_p1_mass(mesh), mesh.n_vertices, fine_mesh=mesh)
    assert kl.mu.sum() == pytest.approx(1.0, rel=0.02)


def test_eigenvalues_stable_under_refinement():
    p = MaternParams(2.5, 1.0, 1.0)
    a = build_kl(8, p, 10).mu
    b = build_kl(16, p, 10).mu
    assert np.all(np.abs(a - b) / b < 0.05)


def test_solve_kl_rejects_bad_count():
    mesh = build_mesh(2)
    A = assemble_cov_operator(mesh, MaternParams())
    with pytest.raises(ValueError):
        solve_kl(A, assemble_p1_mass(mesh), 100)


def test_negative_spectrum_detected():
    mesh = build_mesh(2)
    M = assemble_p1_mass(mesh)
    with pytest.raises(KLError):
        solve_kl(-np.eye(mesh.n_vertices), M, mesh.n_vertices)


def test_eigenvector_sign_convention(kl16):
    idx = np.argmax(np.abs(kl16.xi), axis=0)
    assert np.all(kl16.xi[idx, np.arange(kl16.s_max)] > 0)


# -- decay diagnostics -----------------------------------------------------------

def test_b_sequence_sign_invariant(kl16):
    flipped = KLBasis(kl16.fine_mesh, kl16.mu, -kl16.xi, kl16.params)
    assert np.array_equal(b_sequence(kl16).b, b_sequence(flipped).b)


def test_b_sequence_synthetic():
    mesh = build_mesh(2)
    j = np.arange(1, 6)
    xi = np.zeros((mesh.n_vertices, 5))
    xi[0] = 1.0
    xi[1] = -0.5
    kl = KLBasis(mesh, j**-3.0, xi)
    assert np.allclose(b_sequence(kl).b, j**-1.5, rtol=1e-15)


def test_estimate_p_power_laws():
    j = np.arange(1, 101)
    assert estimate_p(j**-1.5, 1, 100) == pytest.approx(2 / 3, abs=1e-10)
    assert estimate_p(j**-2.0, 5, 80) == pytest.approx(0.5, abs=1e-10)
    assert estimate_p(j**-1.0, 1, 100) == pytest.approx(1.0, abs=1e-12)
    assert estimate_p(j**-0.5, 1, 100) == 1.0
    assert estimate_p(BSequence(j**-1.25), 10, 60) == pytest.approx(0.8, abs=1e-10)


def test_estimate_p_rejects_bad_ranges():
    b = np.arange(1, 30) ** -2.0
    with pytest.raises(ValueError):
        estimate_p(b, 1, 40)
    with pytest.raises(ValueError):
        estimate_p(b, 1, 5)
    with pytest.raises(ValueError):
        estimate_p(np.zeros(30), 1, 20)


def test_matern_25_summability_below_two_thirds(kl32):
    # decay of b_j is steeper than j^(-3/2), so p <= 2/3
    assert b_sequence(kl32, 10, 60).p_hat <= 2 / 3
    assert b_sequence(kl32, 20, 100).p_hat <= 2 / 3


def test_matern_175_summability_near_reported():
    kl = build_kl(16, MaternParams(1.75, 1.0, 1.0), 100)
    p = b_sequence(kl, 10, 60).p_hat
    assert abs(p - 0.7198) <= 0.15
    assert 2 / 3 < p < 1


# -- sampling --------------------------------------------------------------------

def test_zero_parameters_give_zero_field(kl16):
    pts = np.random.default_rng(0).random((50, 2))
    Z, g = sample_Z(kl16, np.zeros(10), pts)
    assert np.all(Z == 0) and np.all(g == 0)


def test_single_mode_nodal_values(kl16):
    mesh = kl16.fine_mesh
    Z, _ = sample_Z(kl16, np.array([1.0]), mesh.vertices)
    assert np.allclose(Z, math.sqrt(kl16.mu[0]) * kl16.xi[:, 0], rtol=0, atol=1e-13)


def test_interpolation_matches_direct_sum_at_vertices(kl16):
    y = np.random.default_rng(2).standard_normal(20)
    mesh = kl16.fine_mesh
    Z, _ = sample_Z(kl16, y, mesh.vertices)
    direct = sum(math.sqrt(kl16.mu[j]) * kl16.xi[:, j] * y[j] for j in range(20))
    assert np.abs(Z - direct).max() <= 1e-13


def test_p1_gradients_of_linear_field():
    mesh = build_mesh(3)
    g = p1_gradients(mesh, 2 * mesh.vertices[:, 0] - 5 * mesh.vertices[:, 1])
    assert np.allclose(g, [2.0, -5.0], atol=1e-12)


def test_sample_Z_rejects_outside(kl16):
    with pytest.raises(ValueError):
        sample_Z(kl16, np.ones(3), np.array([[-0.5, 0.5]]))


def test_too_many_terms_rejected(kl16):
    with pytest.raises(ValueError):
        kl16.nodal_field(np.ones(kl16.s_max + 1))


# -- serialisation ---------------------------------------------------------------

def test_kl_round_trip(tmp_path, kl16):
    path = tmp_path / "kl.bin"
    save_kl(kl16, path)
    back = load_kl(path)
    assert back.fine_mesh.m == kl16.fine_mesh.m
    assert back.params == kl16.params
    assert np.array_equal(back.mu, kl16.mu)
    assert np.array_equal(back.xi, kl16.xi)


def test_kl_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"\0" * 128)
    with pytest.raises(ValueError):
        load_kl(path)
