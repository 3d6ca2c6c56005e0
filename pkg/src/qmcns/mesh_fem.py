"""Structured triangulations of the unit square and Taylor-Hood (P2-P1) spaces.

Velocity coefficient vectors are laid out component-major: the first
``n_nodes`` entries hold the x-component at the P2 nodes (vertices first,
then edge midpoints in edge order), the next ``n_nodes`` the y-component.
All assembled operators are ``scipy.sparse`` CSR matrices.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .quadrature import triangle_rule

# local edge k of a triangle is the one opposite local vertex k
_LOCAL_EDGES = ((1, 2), (2, 0), (0, 1))


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Uniform right-triangle mesh of [0, 1]^2 with ``m`` squares per side."""

    m: int
    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_midpoints: np.ndarray
    triangle_edges: np.ndarray
    boundary_vertex_mask: np.ndarray
    boundary_edge_mask: np.ndarray

    @property
    def h(self):
        return 1.0 / self.m

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    def triangle_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def locate(self, points, tol=1e-12):
        """Return ``(triangle_index, barycentric)`` for each point.

        Points on shared edges are assigned deterministically to one of the
        adjacent triangles.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if np.any(pts < -tol) or np.any(pts > 1.0 + tol):
            raise ValueError("point outside the unit square")
        m = self.m
        s = np.clip(pts, 0.0, 1.0) * m
        i = np.minimum(np.floor(s[:, 0]).astype(np.int64), m - 1)
        j = np.minimum(np.floor(s[:, 1]).astype(np.int64), m - 1)
        xi = s[:, 0] - i
        eta = s[:, 1] - j
        lower = xi >= eta
        tri = 2 * (j * m + i) + np.where(lower, 0, 1)
        bary = np.where(
            lower[:, None],
            np.column_stack([1.0 - xi, xi - eta, eta]),
            np.column_stack([1.0 - eta, xi, eta - xi]),
        )
        return tri, bary


def build_mesh(m):
    """Split each of the ``m x m`` squares along its SW-NE diagonal."""
    if int(m) != m or m < 1:
        raise ValueError(f"mesh subdivision must be a positive integer, got {m!r}")
    m = int(m)
    g = np.linspace(0.0, 1.0, m + 1)
    X, Y = np.meshgrid(g, g, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    jj, ii = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    v00 = (jj * (m + 1) + ii).ravel()
    v10 = v00 + 1
    v01 = v00 + (m + 1)
    v11 = v01 + 1
    tris = np.empty((2 * m * m, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])

    local = np.concatenate([tris[:, list(e)] for e in _LOCAL_EDGES], axis=0)
    local = np.sort(local, axis=1)
    edges, inverse = np.unique(local, axis=0, return_inverse=True)
    triangle_edges = inverse.reshape(3, -1).T.copy()
    midpoints = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])

    def on_boundary(p):
        return np.any(np.isclose(p, 0.0) | np.isclose(p, 1.0), axis=1)

    return TriMesh(
        m=m,
        vertices=vertices,
        triangles=tris,
        edges=edges,
        edge_midpoints=midpoints,
        triangle_edges=triangle_edges,
        boundary_vertex_mask=on_boundary(vertices),
        boundary_edge_mask=on_boundary(midpoints),
    )


def p2_basis(bary):
    """P2 Lagrange basis values ``(n, 6)`` and derivatives w.r.t. barycentrics ``(n, 6, 3)``."""
    bary = np.atleast_2d(bary)
    l0, l1, l2 = bary.T
    vals = np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1,
    ])
    z = np.zeros_like(l0)
    d = np.stack([
        np.column_stack([4 * l0 - 1, z, z]),
        np.column_stack([z, 4 * l1 - 1, z]),
        np.column_stack([z, z, 4 * l2 - 1]),
        np.column_stack([z, 4 * l2, 4 * l1]),
        np.column_stack([4 * l2, z, 4 * l0]),
        np.column_stack([4 * l1, 4 * l0, z]),
    ], axis=1)
    return vals, d


def barycentric_gradients(mesh):
    """Constant gradients of the barycentric coordinates, shape ``(nt, 3, 2)``."""
    p = mesh.vertices[mesh.triangles]
    T = np.empty((mesh.n_triangles, 3, 3))
    T[:, 0, :] = p[:, :, 0]
    T[:, 1, :] = p[:, :, 1]
    T[:, 2, :] = 1.0
    inv = np.linalg.inv(T)
    return inv[:, :, :2]


def _scatter(rows, cols, local, shape):
    """Assemble element matrices ``local[e, a, b]`` at ``(rows[e, a], cols[e, b])``."""
    na, nb = local.shape[1:]
    r = np.repeat(rows[:, :, None], nb, axis=2)
    c = np.repeat(cols[:, None, :], na, axis=1)
    A = sp.coo_matrix((local.ravel(), (r.ravel(), c.ravel())), shape=shape)
    A = A.tocsr()
    A.sum_duplicates()
    return A


class TaylorHoodSpace:
    """P2 velocity / P1 pressure mixed space with homogeneous Dirichlet velocity."""

    def __init__(self, mesh, quad_degree=5):
        self.mesh = mesh
        nv = mesh.n_vertices
        self.nodes = np.vstack([mesh.vertices, mesh.edge_midpoints])
        self.n_nodes = nv + mesh.n_edges
        self.cell_nodes = np.hstack([mesh.triangles, nv + mesh.triangle_edges])
        self.boundary_node_mask = np.concatenate(
            [mesh.boundary_vertex_mask, mesh.boundary_edge_mask])
        bnodes = np.flatnonzero(self.boundary_node_mask)
        self.dirichlet_velocity_dofs = np.concatenate([bnodes, bnodes + self.n_nodes])
        inodes = np.flatnonzero(~self.boundary_node_mask)
        self.interior_velocity_dofs = np.concatenate([inodes, inodes + self.n_nodes])

        self.areas = mesh.triangle_areas()
        self.grad_lambda = barycentric_gradients(mesh)
        self.quad_bary, self.quad_weights = triangle_rule(quad_degree)
        self.phi, dphi = p2_basis(self.quad_bary)
        # physical basis gradients at quadrature points: (nt, nq, 6, 2)
        self.dphi = np.einsum("qik,ekd->eqid", dphi, self.grad_lambda)

    @property
    def velocity_dim(self):
        return 2 * self.n_nodes

    @property
    def pressure_dim(self):
        return self.mesh.n_vertices

    def quadrature_points(self):
        """Physical quadrature points, shape ``(nt, nq, 2)``."""
        p = self.mesh.vertices[self.mesh.triangles]
        return np.einsum("qk,ekd->eqd", self.quad_bary, p)

    def _check_velocity(self, *vectors):
        for u in vectors:
            if np.shape(u) != (self.velocity_dim,):
                raise ValueError(
                    f"velocity vector has shape {np.shape(u)}, expected ({self.velocity_dim},)")

    def cell_values(self, u):
        """Velocity at quadrature points ``(nt, nq, 2)`` and gradients ``(nt, nq, 2, 2)``.

        ``grad[..., c, d]`` is the derivative of component ``c`` in direction ``d``.
        """
        uc = np.asarray(u).reshape(2, self.n_nodes)[:, self.cell_nodes]  # (2, nt, 6)
        val = np.einsum("qi,cei->eqc", self.phi, uc)
        grad = np.einsum("eqid,cei->eqcd", self.dphi, uc)
        return val, grad

    # -- assembled operators (cached, never mutated) ---------------------------

    @cached_property
    def scalar_mass(self):
        w = self.quad_weights
        local = np.einsum("q,qi,qj->ij", w, self.phi, self.phi)
        local = self.areas[:, None, None] * local[None]
        n = self.n_nodes
        return _scatter(self.cell_nodes, self.cell_nodes, local, (n, n))

    @cached_property
    def scalar_stiffness(self):
        w = self.quad_weights
        local = np.einsum("q,eqid,eqjd->eij", w, self.dphi, self.dphi)
        local *= self.areas[:, None, None]
        n = self.n_nodes
        return _scatter(self.cell_nodes, self.cell_nodes, local, (n, n))

    @cached_property
    def divergence(self):
        # c(v, q) = -int q div v, rows = pressure, cols = velocity
        w = self.quad_weights
        psi = self.quad_bary  # P1 basis = barycentrics
        blocks = []
        for c in range(2):
            local = -np.einsum("q,qa,eqj->eaj", w, psi, self.dphi[..., c])
            local *= self.areas[:, None, None]
            blocks.append(_scatter(self.mesh.triangles, self.cell_nodes, local,
                                   (self.pressure_dim, self.n_nodes)))
        return sp.hstack(blocks, format="csr")

    @cached_property
    def pressure_mean_vector(self):
        """Integrals of the P1 pressure basis functions."""
        out = np.zeros(self.pressure_dim)
        np.add.at(out, self.mesh.triangles.ravel(), np.repeat(self.areas / 3.0, 3))
        return out

    @cached_property
    def convection_tensor(self):
        """Element tensor ``T[e, i, j, k, d]`` of the skew-symmetrised convection form.

        For an advecting field ``w`` the scalar convection matrix has element
        entries ``N_e[i, j] = sum_{k, d} T[e, i, j, k, d] * w_d[k]`` with
        ``i`` the test and ``j`` the trial basis function.
        """
        w = self.quad_weights
        G = np.einsum("q,qk,qi,eqjd->eijkd", w, self.phi, self.phi, self.dphi)
        T = 0.5 * (G - G.transpose(0, 2, 1, 3, 4))
        return T * self.areas[:, None, None, None, None]


def build_space(mesh):
    return TaylorHoodSpace(mesh)


def assemble_mass(space):
    M = space.scalar_mass
    return sp.block_diag([M, M], format="csr")


def assemble_stiffness(space):
    K = space.scalar_stiffness
    return sp.block_diag([K, K], format="csr")


def assemble_divergence(space):
    return space.divergence


def assemble_p1_mass(mesh):
    """Mass matrix of the P1 nodal basis on ``mesh``."""
    local = np.full((3, 3), 1.0 / 12.0) + np.eye(3) / 12.0
    local = mesh.triangle_areas()[:, None, None] * local[None]
    n = mesh.n_vertices
    return _scatter(mesh.triangles, mesh.triangles, local, (n, n))


def convection_matrix(space, w):
    """Scalar matrix ``N`` with ``B[w, u, v] = sum_c v_c @ N @ u_c``."""
    space._check_velocity(w)
    wl = np.asarray(w).reshape(2, space.n_nodes)[:, space.cell_nodes]  # (2, nt, 6)
    local = np.einsum("eijkd,dek->eij", space.convection_tensor, wl)
    n = space.n_nodes
    return _scatter(space.cell_nodes, space.cell_nodes, local, (n, n))


def trilinear(space, u, v, w):
    """Skew-symmetric convection form ``1/2 int ((u.grad)v).w - ((u.grad)w).v``."""
    space._check_velocity(u, v, w)
    uq, _ = space.cell_values(u)
    vq, gv = space.cell_values(v)
    wq, gw = space.cell_values(w)
    adv_v = np.einsum("eqd,eqcd->eqc", uq, gv)
    adv_w = np.einsum("eqd,eqcd->eqc", uq, gw)
    integrand = 0.5 * (np.sum(adv_v * wq, axis=2) - np.sum(adv_w * vq, axis=2))
    return float(np.sum(space.areas * (integrand @ space.quad_weights)))


def l2_norm(space, u):
    space._check_velocity(u)
    return float(np.sqrt(max(u @ (assemble_mass(space) @ u), 0.0)))


def h1_seminorm(space, u):
    space._check_velocity(u)
    return float(np.sqrt(max(u @ (assemble_stiffness(space) @ u), 0.0)))


def l4_norm(space, u):
    """``||u||_4`` with a degree-8 rule (exact for |u|^4 of a P2 field)."""
    space._check_velocity(u)
    bary, w = triangle_rule(8)
    phi, _ = p2_basis(bary)
    uc = np.asarray(u).reshape(2, space.n_nodes)[:, space.cell_nodes]
    val = np.einsum("qi,cei->eqc", phi, uc)
    integrand = np.sum(val**2, axis=2) ** 2
    return float(np.sum(space.areas * (integrand @ w)) ** 0.25)


def interpolate_velocity(space, f):
    """Nodal P2 interpolant of a vector field ``f(points) -> (n, 2)``."""
    vals = np.asarray(f(space.nodes), dtype=float)
    return np.concatenate([vals[:, 0], vals[:, 1]])


def evaluate_velocity(space, u, points):
    """Point values ``(n, 2)`` of the P2 field ``u``."""
    space._check_velocity(u)
    tri, bary = space.mesh.locate(points)
    phi, _ = p2_basis(bary)
    uc = np.asarray(u).reshape(2, space.n_nodes)[:, space.cell_nodes[tri]]  # (2, n, 6)
    return np.einsum("ni,cni->nc", phi, uc)


@dataclass(frozen=True, eq=False)
class VelocityState:
    """Velocity/pressure coefficients at time level ``time_index``."""

    u: np.ndarray
    p: np.ndarray
    time_index: int = 0

    def divergence_residual(self, space):
        return float(np.max(np.abs(space.divergence @ self.u), initial=0.0))
