"""Matérn Gaussian random fields: covariance operator, KL eigenpairs, decay diagnostics.

The covariance operator is discretised by Galerkin projection onto P1
elements of a (fine) structured mesh, giving the generalised symmetric
eigenproblem ``A v = mu M v`` with ``M`` the P1 mass matrix.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy import special

from .errors import NumericalError
from .mesh_fem import assemble_p1_mass, build_mesh
from .quadrature import triangle_rule


@dataclass(frozen=True)
class MaternParams:
    nu: float = 2.5
    sigma2: float = 1.0
    lambda_C: float = 1.0

    def __post_init__(self):
        if not (self.nu > 0 and self.sigma2 > 0 and self.lambda_C > 0):
            raise ValueError("Matérn parameters must be strictly positive")


def matern_cov(r, params):
    """Matérn covariance ``sigma^2 2^(1-nu)/Gamma(nu) x^nu K_nu(x)``, ``x = 2 sqrt(nu) r / lambda_C``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distance must be non-negative")
    nu = params.nu
    x = 2.0 * math.sqrt(nu) * r / params.lambda_C
    with np.errstate(invalid="ignore", over="ignore"):
        scale = 2.0 ** (1.0 - nu) / special.gamma(nu)
        val = params.sigma2 * scale * x**nu * special.kv(nu, x)
    val = np.where(x == 0.0, params.sigma2, val)
    val = np.where(np.isfinite(val), val, 0.0)  # K_nu underflow at large x
    return float(val) if val.ndim == 0 else val


def _p1_quadrature(mesh, degree):
    """Quadrature points ``(nq_total, 2)`` and the weighted P1 evaluation matrix (dense rows)."""
    bary, w = triangle_rule(degree)
    p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    pts = np.einsum("qk,ekd->eqd", bary, p).reshape(-1, 2)
    area = mesh.triangle_areas()
    nq = len(w)
    rows = np.repeat(np.arange(len(pts)), 3)
    cols = np.repeat(mesh.triangles, nq, axis=0).ravel()
    vals = (area[:, None, None] * w[None, :, None] * bary[None, :, :]).reshape(-1)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), mesh.n_vertices))
    return pts, P


def assemble_cov_operator(fine_mesh, params, quad_degree=2, max_nodes=5000, block=1024):
    """Dense Galerkin matrix ``A_ij = int int phi_i(x) c(x, x') phi_j(x') dx dx'``.

    ``params`` is a :class:`MaternParams` or a callable ``c(r)`` of the distance.
    The quadrature is the tensor product of a per-triangle rule with itself.
    """
    n = fine_mesh.n_vertices
    if n > max_nodes:
        raise MemoryError(f"covariance operator with {n} nodes exceeds the cap of {max_nodes}")
    kernel = params if callable(params) else (lambda r: matern_cov(r, params))
    pts, P = _p1_quadrature(fine_mesh, quad_degree)
    PT = P.T.tocsr()
    A = np.zeros((n, n))
    for lo in range(0, len(pts), block):
        blk = pts[lo:lo + block]
        d = np.sqrt(((blk[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
        Kb = np.asarray(kernel(d), dtype=float)
        if Kb.ndim == 0:
            Kb = np.full(d.shape, float(Kb))
        KP = (PT @ Kb.T).T  # (block, n)
        A += PT[:, lo:lo + block] @ KP
    return 0.5 * (A + A.T)


class KLError(NumericalError):
    pass


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Leading eigenpairs of the discretised covariance operator.

    ``xi[:, j]`` holds nodal values of the M-orthonormal eigenfunction ``j``.
    """

    fine_mesh: object
    mu: np.ndarray
    xi: np.ndarray
    params: MaternParams = None

    @property
    def s_max(self):
        return len(self.mu)

    def nodal_field(self, y):
        y = np.asarray(y, dtype=float)
        s = len(y)
        if s > self.s_max:
            raise ValueError(f"KL basis has only {self.s_max} terms, got {s}")
        return self.xi[:, :s] @ (np.sqrt(self.mu[:s]) * y)


def solve_kl(A, M, s, params=None, fine_mesh=None, tol=1e-8):
    """Largest ``s`` eigenpairs of ``A v = mu M v``, sorted nonincreasing."""
    n = A.shape[0]
    if not 1 <= s <= n:
        raise ValueError(f"requested {s} eigenpairs from a {n}-dimensional operator")
    Md = M.toarray() if hasattr(M, "toarray") else np.asarray(M)
    try:
        mu, V = scipy.linalg.eigh(A, Md, subset_by_index=[n - s, n - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise KLError(f"generalised eigensolve failed: {exc}") from exc
    mu = mu[::-1].copy()
    V = V[:, ::-1].copy()
    if mu[0] > 0 and np.any(mu < -1e-12 * mu[0]):
        raise KLError("covariance operator has significantly negative eigenvalues")
    mu = np.clip(mu, 0.0, None)
    # deterministic signs: largest-magnitude nodal value positive
    idx = np.argmax(np.abs(V), axis=0)
    V *= np.sign(V[idx, np.arange(s)])

    normA = np.abs(A).max()
    res = np.abs(A @ V - (Md @ V) * mu).max(axis=0)
    if np.any(res > tol * max(normA, 1e-300)):
        raise KLError(f"eigen-residual {res.max():.2e} exceeds tolerance")
    orth = np.abs(V.T @ Md @ V - np.eye(s)).max()
    if orth > tol:
        raise KLError(f"eigenvectors are not M-orthonormal (error {orth:.2e})")
    return KLBasis(fine_mesh, mu, V, params)


def build_kl(m_fine, params, s, max_nodes=5000):
    """Assemble and solve the KL eigenproblem on a P1 mesh with ``m_fine`` squares per side."""
    mesh = build_mesh(m_fine)
    A = assemble_cov_operator(mesh, params, max_nodes=max_nodes)
    M = assemble_p1_mass(mesh)
    return solve_kl(A, M, s, params=params, fine_mesh=mesh)


@dataclass(frozen=True, eq=False)
class BSequence:
    b: np.ndarray
    p_hat: float = None
    j_range: tuple = None


def b_sequence(kl, j_lo=None, j_hi=None):
    """``b_j = sqrt(mu_j) * max|xi_j|`` (nodal max), optionally with ``p_hat``."""
    b = np.sqrt(kl.mu) * np.abs(kl.xi).max(axis=0)
    if j_lo is None:
        return BSequence(b)
    return BSequence(b, estimate_p(b, j_lo, j_hi), (j_lo, j_hi))


def estimate_p(b, j_lo, j_hi):
    """Summability exponent from the slope of ``|log b_j|`` against ``log j`` (1-based, inclusive)."""
    b = np.asarray(b.b if isinstance(b, BSequence) else b, dtype=float)
    if j_hi > len(b) or j_lo < 1:
        raise ValueError(f"regression range [{j_lo}, {j_hi}] outside 1..{len(b)}")
    if j_hi - j_lo < 8:
        raise ValueError("regression range needs at least 9 terms")
    j = np.arange(j_lo, j_hi + 1)
    bj = b[j_lo - 1:j_hi]
    ok = bj > 0
    if ok.sum() < 2:
        raise ValueError("b_j vanish on the regression range")
    q = np.polyfit(np.log(j[ok]), np.abs(np.log(bj[ok])), 1)[0]
    if q <= 1.0:
        return 1.0
    return float(1.0 / q)


def sample_Z(kl, y, points):
    """Truncated KL field and its (piecewise-constant) gradient at ``points``.

    Returns ``(values (n,), gradients (n, 2))``.
    """
    mesh = kl.fine_mesh
    Zn = kl.nodal_field(y)
    tri, bary = mesh.locate(points)
    nodes = mesh.triangles[tri]
    vals = np.sum(bary * Zn[nodes], axis=1)
    grads = p1_gradients(mesh, Zn)[tri]
    return vals, grads


def p1_gradients(mesh, nodal):
    """Elementwise gradient ``(nt, 2)`` of a P1 field."""
    p = mesh.vertices[mesh.triangles]
    z = nodal[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    dz1 = z[:, 1] - z[:, 0]
    dz2 = z[:, 2] - z[:, 0]
    gx = (dz1 * d2[:, 1] - dz2 * d1[:, 1]) / det
    gy = (dz2 * d1[:, 0] - dz1 * d2[:, 0]) / det
    return np.column_stack([gx, gy])


# -- serialisation ---------------------------------------------------------------
# Little-endian layout:
#   8 bytes magic b"QMCNSKL1"
#   int64 m_fine, int64 s_max, int64 n_nodes
#   float64 nu, sigma2, lambda_C
#   float64[s_max] mu
#   float64[n_nodes * s_max] xi, column-major (eigenvector after eigenvector)

_MAGIC = b"QMCNSKL1"
_HEADER = struct.Struct("<8sqqqddd")


def save_kl(kl, path):
    p = kl.params or MaternParams()
    n = kl.xi.shape[0]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, kl.fine_mesh.m, kl.s_max, n, p.nu, p.sigma2, p.lambda_C))
        fh.write(np.asarray(kl.mu, dtype="<f8").tobytes())
        fh.write(np.asarray(kl.xi, dtype="<f8").tobytes(order="F"))


def load_kl(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, m, s, n, nu, sigma2, lam = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path} is not a KL basis file")
    off = _HEADER.size
    mu = np.frombuffer(raw, dtype="<f8", count=s, offset=off).copy()
    off += 8 * s
    xi = np.frombuffer(raw, dtype="<f8", count=n * s, offset=off).reshape((n, s), order="F").copy()
    mesh = build_mesh(m)
    if mesh.n_vertices != n:
        raise ValueError(f"{path}: node count {n} does not match m_fine={m}")
    return KLBasis(mesh, mu, xi, MaternParams(nu, sigma2, lam))
