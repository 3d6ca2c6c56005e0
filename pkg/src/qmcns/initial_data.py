"""Log-normal divergence-free initial velocity and its L2 projection onto V_h."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import FieldMagnitudeError, NumericalError
from .mesh_fem import VelocityState, barycentric_gradients, p2_basis
from .quadrature import triangle_rule
from .random_field import sample_Z

Z_MAX = 300.0


@dataclass(frozen=True, eq=False)
class InitialFieldSpec:
    kl: object
    s: int
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.shape != (self.s,):
            raise ValueError(f"parameter vector must have length s={self.s}")
        if self.s > self.kl.s_max:
            raise ValueError(f"s={self.s} exceeds the {self.kl.s_max} stored KL terms")
        if not np.all(np.isfinite(y)):
            raise ValueError("parameter vector must be finite")
        object.__setattr__(self, "y", y)


def _velocity_from_field(Z, gZ):
    if np.any(Z > Z_MAX):
        raise FieldMagnitudeError(f"log-normal field exponent {Z.max():.1f} exceeds {Z_MAX}")
    e = np.exp(Z)
    return np.column_stack([-e * gZ[:, 1], e * gZ[:, 0]])


def eval_u0(spec, points):
    """``exp(Z_s) * (-d2 Z_s, d1 Z_s)`` at ``points``; shape ``(n, 2)``."""
    Z, gZ = sample_Z(spec.kl, spec.y, np.atleast_2d(points))
    return _velocity_from_field(Z, gZ)


def _coarse_barycentric(mesh, tri, pts):
    p = mesh.vertices[mesh.triangles[tri]]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    r = pts - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


class DivFreeProjector:
    """L2 projection onto the discretely divergence-free subspace.

    The saddle matrix ``[M C^T 0; C 0 m; 0 m^T 0]`` on the interior velocity
    dofs is factorised once and shared by every projection.
    """

    def __init__(self, space):
        self.space = space
        n = space.n_nodes
        inner = np.flatnonzero(~space.boundary_node_mask)
        self.inner = inner
        Mi = space.scalar_mass[inner][:, inner]
        M = sp.block_diag([Mi, Mi])
        C = space.divergence[:, np.concatenate([inner, inner + n])]
        m = sp.csr_matrix(space.pressure_mean_vector[:, None])
        K = sp.bmat([[M, C.T, None], [C, None, m], [None, m.T, None]], format="csc")
        try:
            self._lu = splu(K)
        except RuntimeError as exc:
            raise NumericalError(f"projection saddle system is singular: {exc}") from exc
        self._ni = len(inner)

    def project_load(self, load):
        """Project given the load vector ``(f, v_i)`` over all velocity dofs."""
        space = self.space
        n = space.n_nodes
        ni = self._ni
        rhs = np.zeros(2 * ni + space.pressure_dim + 1)
        rhs[:ni] = load[self.inner]
        rhs[ni:2 * ni] = load[n + self.inner]
        x = self._lu.solve(rhs)
        u = np.zeros(space.velocity_dim)
        u[self.inner] = x[:ni]
        u[n + self.inner] = x[ni:2 * ni]
        return VelocityState(u, x[2 * ni:-1], 0)

    def project_function(self, f):
        """Project a vector field ``f(points) -> (n, 2)`` using the space's quadrature."""
        space = self.space
        pts = space.quadrature_points().reshape(-1, 2)
        vals = np.asarray(f(pts), dtype=float).reshape(space.mesh.n_triangles, -1, 2)
        w = space.quad_weights
        local = np.einsum("q,qi,eqc->cei", w, space.phi, vals) * space.areas[None, :, None]
        load = np.zeros(space.velocity_dim)
        for c in range(2):
            np.add.at(load, c * space.n_nodes + space.cell_nodes.ravel(), local[c].ravel())
        return self.project_load(load)


def projector_for(space):
    p = getattr(space, "_divfree_projector", None)
    if p is None:
        p = DivFreeProjector(space)
        space._divfree_projector = p
    return p


class InitialDataProjector:
    """Projects truncated log-normal initial data for one (space, KL basis) pair.

    When the KL mesh refines the solver mesh by an integer factor every fine
    triangle lies inside one solver triangle; the load integrals are then
    taken triangle by triangle on the fine mesh, where ``u0`` is smooth.
    Otherwise the solver mesh's own quadrature is used.
    """

    def __init__(self, space, kl, quad_degree=5):
        self.space = space
        self.kl = kl
        fine = kl.fine_mesh
        coarse = space.mesh
        bary, w = triangle_rule(quad_degree)
        if fine.m % coarse.m == 0:
            pf = fine.vertices[fine.triangles]
            pts = np.einsum("qk,ekd->eqd", bary, pf).reshape(-1, 2)
            ftri = np.repeat(np.arange(fine.n_triangles), len(w))
            fbary = np.tile(bary, (fine.n_triangles, 1))
            weights = np.outer(fine.triangle_areas(), w).ravel()
            ctri, _ = coarse.locate(pf.mean(axis=1))
            ctri = np.repeat(ctri, len(w))
            cbary = _coarse_barycentric(coarse, ctri, pts)
        else:
            pc = coarse.vertices[coarse.triangles]
            pts = np.einsum("qk,ekd->eqd", bary, pc).reshape(-1, 2)
            ctri = np.repeat(np.arange(coarse.n_triangles), len(w))
            cbary = np.tile(bary, (coarse.n_triangles, 1))
            weights = np.outer(coarse.triangle_areas(), w).ravel()
            ftri, fbary = fine.locate(pts)
        nq = len(pts)
        self.points = pts
        self.weights = weights
        self.ftri = ftri
        self.interp = sp.csr_matrix(
            (fbary.ravel(), (np.repeat(np.arange(nq), 3), fine.triangles[ftri].ravel())),
            shape=(nq, fine.n_vertices))
        gl = barycentric_gradients(fine)  # (nft, 3, 2)
        rows = np.repeat(np.arange(fine.n_triangles), 3)
        self.grad_x = sp.csr_matrix((gl[:, :, 0].ravel(), (rows, fine.triangles.ravel())),
                                    shape=(fine.n_triangles, fine.n_vertices))
        self.grad_y = sp.csr_matrix((gl[:, :, 1].ravel(), (rows, fine.triangles.ravel())),
                                    shape=(fine.n_triangles, fine.n_vertices))
        phi, _ = p2_basis(cbary)
        self.load_matrix = sp.csr_matrix(
            ((phi * weights[:, None]).ravel(),
             (space.cell_nodes[ctri].ravel(), np.repeat(np.arange(nq), 6))),
            shape=(space.n_nodes, nq))
        self.projector = projector_for(space)

    def field_at_quadrature(self, y):
        Zn = self.kl.nodal_field(y)
        Z = self.interp @ Zn
        gZ = np.column_stack([(self.grad_x @ Zn)[self.ftri], (self.grad_y @ Zn)[self.ftri]])
        return Z, gZ

    def load(self, y):
        Z, gZ = self.field_at_quadrature(y)
        u0 = _velocity_from_field(Z, gZ)
        return np.concatenate([self.load_matrix @ u0[:, 0], self.load_matrix @ u0[:, 1]])

    def project(self, y):
        return self.projector.project_load(self.load(y))

    def u0_l2_norm(self, y):
        Z, gZ = self.field_at_quadrature(y)
        u0 = _velocity_from_field(Z, gZ)
        return float(np.sqrt(self.weights @ np.sum(u0**2, axis=1)))

    def exp_field_h1_norm(self, y):
        """``||exp Z_s||_{H^1}`` (diagnostic for the smallness condition)."""
        Z, gZ = self.field_at_quadrature(y)
        e2 = np.exp(2.0 * np.minimum(Z, Z_MAX))
        return float(np.sqrt(self.weights @ (e2 * (1.0 + np.sum(gZ**2, axis=1)))))


def projector_for_kl(space, kl):
    cache = getattr(space, "_initial_projectors", None)
    if cache is None:
        cache = {}
        space._initial_projectors = cache
    key = id(kl)
    if key not in cache:
        cache[key] = (kl, InitialDataProjector(space, kl))
    return cache[key][1]


def project_initial(spec, space):
    """L2 projection of the truncated initial velocity onto the discrete div-free space."""
    return projector_for_kl(space, spec.kl).project(spec.y)
