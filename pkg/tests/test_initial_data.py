import numpy as np
import pytest

from conftest import random_interior_field
from qmcns.errors import FieldMagnitudeError
from qmcns.initial_data import (
    InitialDataProjector,
    InitialFieldSpec,
    eval_u0,
    project_initial,
    projector_for,
    projector_for_kl,
)
from qmcns.mesh_fem import barycentric_gradients, build_mesh, build_space, evaluate_velocity, l2_norm
from qmcns.random_field import KLBasis


def synthetic_kl(m, modes):
    """KL basis whose modes are given nodal functions ``f(x) -> values``, all with mu = 1."""
    mesh = build_mesh(m)
    xi = np.column_stack([f(mesh.vertices) for f in modes])
    return KLBasis(mesh, np.ones(len(modes)), xi)


def random_points(rng, n):
    return 0.02 + 0.96 * rng.random((n, 2))


# -- pointwise evaluation --------------------------------------------------------

def test_zero_parameters_give_zero_velocity(kl16):
    pts = random_points(np.random.default_rng(0), 200)
    assert np.all(eval_u0(InitialFieldSpec(kl16, 10, np.zeros(10)), pts) == 0)


def test_affine_mode_has_only_second_component():
    c0, c1 = 0.3, -0.7
    kl = synthetic_kl(8, [lambda x: c0 + c1 * x[:, 0]])
    pts = random_points(np.random.default_rng(1), 100)
    u = eval_u0(InitialFieldSpec(kl, 1, np.array([1.0])), pts)
    Z = c0 + c1 * pts[:, 0]
    assert np.abs(u[:, 0]).max() == 0
    assert np.allclose(u[:, 1], np.exp(Z) * c1, rtol=1e-13, atol=0)


def test_constant_shift_scales_by_exponential():
    kl = synthetic_kl(8, [lambda x: np.ones(len(x)), lambda x: np.sin(3 * x[:, 0]) * x[:, 1] ** 2])
    pts = random_points(np.random.default_rng(2), 100)
    base = eval_u0(InitialFieldSpec(kl, 2, np.array([0.0, 0.8])), pts)
    for c in (-1.5, 0.4, 2.0):
        shifted = eval_u0(InitialFieldSpec(kl, 2, np.array([c, 0.8])), pts)
        assert np.abs(shifted - np.exp(c) * base).max() <= 1e-13 * np.abs(shifted).max()


def test_overflow_guard():
    kl = synthetic_kl(4, [lambda x: np.ones(len(x)) + x[:, 0]])
    with pytest.raises(FieldMagnitudeError):
        eval_u0(InitialFieldSpec(kl, 1, np.array([400.0])), np.array([[0.5, 0.5]]))


@pytest.mark.parametrize("s, y", [(3, np.zeros(2)), (100, np.zeros(100)), (2, np.array([0.0, np.nan]))])
def test_spec_validation(kl16, s, y):
    with pytest.raises(ValueError):
        InitialFieldSpec(kl16, s, y)


def test_weak_divergence_vanishes(kl32):
    # u0 is a rotated gradient of the continuous function exp(Z), so its
    # integral against grad q vanishes for q in H^1_0
    coarse = build_mesh(8)
    space = build_space(coarse)
    proj = InitialDataProjector(space, kl32)
    tri, _ = coarse.locate(proj.points)
    grad = barycentric_gradients(coarse)[tri]  # (nq, 3, 2)
    vtx = coarse.triangles[tri]
    interior = np.flatnonzero(~coarse.boundary_vertex_mask)
    rng = np.random.default_rng(3)
    y = rng.standard_normal(64)
    Z, gZ = proj.field_at_quadrature(y)
    u0 = np.exp(Z)[:, None] * np.column_stack([-gZ[:, 1], gZ[:, 0]])
    scale = proj.u0_l2_norm(y)
    for _ in range(50):
        q = np.zeros(coarse.n_vertices)
        q[interior] = rng.standard_normal(len(interior))
        gq = np.einsum("nk,nkd->nd", q[vtx], grad)
        res = proj.weights @ np.sum(u0 * gq, axis=1)
        assert abs(res) <= 1e-6 * scale * np.sqrt(proj.weights @ np.sum(gq**2, axis=1))


# -- projection ------------------------------------------------------------------

def test_zero_data_projects_to_zero(space4, kl16):
    st = project_initial(InitialFieldSpec(kl16, 8, np.zeros(8)), space4)
    assert np.all(st.u == 0)
    assert st.time_index == 0


def test_projection_idempotent_on_discrete_fields(space4):
    P = projector_for(space4)
    v = P.project_function(lambda x: np.column_stack([np.sin(3 * x[:, 1]), x[:, 0] ** 2]))
    again = P.project_function(lambda x: evaluate_velocity(space4, v.u, x))
    assert np.abs(again.u - v.u).max() <= 1e-10 * np.abs(v.u).max()
    assert np.all(P.project_load(np.zeros(space4.velocity_dim)).u == 0)


def test_projection_nonexpansive(space8, kl32):
    oracle = InitialDataProjector(space8, kl32, quad_degree=8)
    rng = np.random.default_rng(5)
    for _ in range(20):
        y = rng.standard_normal(64)
        st = project_initial(InitialFieldSpec(kl32, 64, y), space8)
        assert l2_norm(space8, st.u) <= oracle.u0_l2_norm(y) + 1e-8


def test_projection_divergence_free(space8, kl32):
    rng = np.random.default_rng(6)
    for _ in range(5):
        st = project_initial(InitialFieldSpec(kl32, 64, rng.standard_normal(64)), space8)
        assert st.divergence_residual(space8) <= 1e-10
        assert np.all(st.u[space8.dirichlet_velocity_dofs] == 0)


def test_projection_satisfies_galerkin_condition(space4, kl16):
    # (u_h, v) = (u0, v) for every discretely divergence-free v
    rng = np.random.default_rng(7)
    y = rng.standard_normal(32)
    proj = projector_for_kl(space4, kl16)
    uh = proj.project(y).u
    load = proj.load(y)
    P = projector_for(space4)
    M = space4.scalar_mass
    for _ in range(5):
        v = P.project_load(random_interior_field(space4, rng)).u
        n = space4.n_nodes
        lhs = uh[:n] @ (M @ v[:n]) + uh[n:] @ (M @ v[n:])
        assert lhs == pytest.approx(load @ v, rel=1e-9, abs=1e-12)


def test_projectors_cached(space4, kl16):
    assert projector_for(space4) is projector_for(space4)
    assert projector_for_kl(space4, kl16) is projector_for_kl(space4, kl16)


def test_non_nested_meshes_use_solver_rule(kl16):
    space = build_space(build_mesh(3))
    proj = InitialDataProjector(space, kl16)
    y = np.random.default_rng(8).standard_normal(16)
    assert len(proj.points) == space.mesh.n_triangles * 7
    assert proj.project(y).divergence_residual(space) <= 1e-10


def test_exp_field_norm_of_zero_field(space4, kl16):
    # exp(0) = 1 so the H1 norm is the area of the unit square
    assert projector_for_kl(space4, kl16).exp_field_h1_norm(np.zeros(4)) == pytest.approx(1.0, rel=1e-13)
