"""Backward-Euler / Picard solver for the discrete Navier-Stokes system.

Each Picard iterate solves the saddle-point system

    [ M/dt + A + N(w)   C^T   0 ] [u]   [M u_prev / dt]
    [ C                 0     m ] [p] = [0           ]
    [ 0                 m^T   0 ] [l]   [0           ]

on the interior velocity dofs, where ``N(w)`` is the skew-symmetric
convection matrix linearised about the previous iterate ``w`` and the last
row pins the pressure mean to zero.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import NonConvergence
from .mesh_fem import VelocityState, evaluate_velocity

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    T: float
    eta: float = 1e-7
    max_picard: int = 50

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T >= self.dt:
            raise ValueError("T must be at least dt")
        if not self.eta > 0:
            raise ValueError("Picard tolerance must be positive")
        if self.max_picard < 1:
            raise ValueError("max_picard must be >= 1")
        if abs(self.n_steps * self.dt - self.T) > 1e-12:
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))


@dataclass
class Trajectory:
    states: list
    dt: float
    picard_counts: list = field(default_factory=list)

    def state_at(self, t):
        j = int(round(t / self.dt))
        if abs(j * self.dt - t) > 1e-9:
            raise ValueError(f"t={t} is not on the time grid (dt={self.dt})")
        if j < 0 or j >= len(self.states):
            raise ValueError(f"t={t} lies outside the computed trajectory")
        return self.states[j]


@dataclass(frozen=True)
class Functional:
    """Point evaluation of one velocity component at time ``t``.

    ``component`` is 1-based (1 = x-velocity, 2 = y-velocity).
    """

    point: tuple = (0.5, 0.5)
    component: int = 1
    t: float = 0.1
    name: str = "G"

    def __post_init__(self):
        if self.component not in (1, 2):
            raise ValueError("component must be 1 or 2")


class NavierStokesSolver:
    """Reusable solver bound to one Taylor-Hood space.

    The sparsity pattern of the saddle matrix is fixed, so the CSC structure
    and the scatter maps are computed once; each Picard iterate only
    recomputes the convection values and refactorises.
    """

    def __init__(self, space):
        self.space = space
        n = space.n_nodes
        inner = np.flatnonzero(~space.boundary_node_mask)
        ni = len(inner)
        npres = space.pressure_dim
        self.n_inner = ni
        self.inner = inner
        self.dim = 2 * ni + npres + 1

        reduce = -np.ones(n, dtype=np.int64)
        reduce[inner] = np.arange(ni)

        Ms = space.scalar_mass[inner][:, inner].tocoo()
        Ks = space.scalar_stiffness[inner][:, inner].tocoo()
        self.mass_inner = space.scalar_mass[inner][:, inner].tocsr()
        C = space.divergence[:, np.concatenate([inner, inner + n])].tocoo()
        mvec = space.pressure_mean_vector
        self.C_inner = C.tocsr()

        rows, cols, kinds, vals = [], [], [], []

        def add(r, c, v, kind):
            rows.append(np.asarray(r))
            cols.append(np.asarray(c))
            vals.append(np.asarray(v, dtype=float))
            kinds.append(np.full(len(r), kind))

        for comp in range(2):
            off = comp * ni
            add(Ms.row + off, Ms.col + off, Ms.data, 0)  # scaled by 1/dt
            add(Ks.row + off, Ks.col + off, Ks.data, 1)
        pr = 2 * ni
        add(C.row + pr, C.col, C.data, 1)
        add(C.col, C.row + pr, C.data, 1)
        lam = self.dim - 1
        add(np.arange(npres) + pr, np.full(npres, lam), mvec, 1)
        add(np.full(npres, lam), np.arange(npres) + pr, mvec, 1)

        # convection entries: element (e, i, j) -> both velocity components
        cn = reduce[space.cell_nodes]
        er = np.repeat(cn[:, :, None], 6, axis=2).ravel()
        ec = np.repeat(cn[:, None, :], 6, axis=1).ravel()
        keep = (er >= 0) & (ec >= 0)
        self._conv_keep = np.flatnonzero(keep)
        kr, kc = er[keep], ec[keep]
        n_base = sum(len(r) for r in rows)
        conv_rows = np.concatenate([kr, kr + ni])
        conv_cols = np.concatenate([kc, kc + ni])

        all_rows = np.concatenate(rows + [conv_rows])
        all_cols = np.concatenate(cols + [conv_cols])
        keys = all_cols * self.dim + all_rows
        ukeys, inv = np.unique(keys, return_inverse=True)
        self._indices = (ukeys % self.dim).astype(np.int32)
        self._indptr = np.searchsorted(ukeys // self.dim, np.arange(self.dim + 1)).astype(np.int32)
        self._nnz = len(ukeys)
        self._base_inv = inv[:n_base]
        self._base_vals = np.concatenate(vals)
        self._base_is_mass = np.concatenate(kinds) == 0
        self._conv_inv = inv[n_base:]

        nt = space.mesh.n_triangles
        # (nt, 36, 12) so that local N = T @ w_local
        self._T = space.convection_tensor.transpose(0, 1, 2, 4, 3).reshape(nt, 36, 12)

    # -- linear algebra ------------------------------------------------------

    def _full(self, u_inner):
        u = np.zeros(self.space.velocity_dim)
        n = self.space.n_nodes
        ni = self.n_inner
        u[self.inner] = u_inner[:ni]
        u[self.inner + n] = u_inner[ni:]
        return u

    def _inner(self, u):
        n = self.space.n_nodes
        return np.concatenate([u[self.inner], u[self.inner + n]])

    def system_matrix(self, w_inner, dt, convection=True):
        base = np.where(self._base_is_mass, self._base_vals / dt, self._base_vals)
        data = np.bincount(self._base_inv, weights=base, minlength=self._nnz)
        if convection:
            w = self._full(w_inner).reshape(2, self.space.n_nodes)[:, self.space.cell_nodes]
            wl = w.transpose(1, 0, 2).reshape(-1, 12, 1)  # (nt, d*6 + k)
            local = np.matmul(self._T, wl).ravel()[self._conv_keep]
            data += np.bincount(self._conv_inv, weights=np.concatenate([local, local]),
                                minlength=self._nnz)
        return sp.csc_matrix((data, self._indices, self._indptr), shape=(self.dim, self.dim))

    def mass_norm(self, u_inner):
        ni = self.n_inner
        a, b = u_inner[:ni], u_inner[ni:]
        M = self.mass_inner
        return float(np.sqrt(max(a @ (M @ a) + b @ (M @ b), 0.0)))

    def _split(self, x):
        ni = self.n_inner
        return x[:2 * ni], x[2 * ni:-1]

    # -- time stepping -------------------------------------------------------

    def picard_step(self, prev, cfg, convection=True):
        """Advance ``prev`` by one backward-Euler step; returns ``(state, iterations)``."""
        ni = self.n_inner
        u_prev = self._inner(prev.u)
        M = self.mass_inner
        rhs = np.zeros(self.dim)
        rhs[:ni] = (M @ u_prev[:ni]) / cfg.dt
        rhs[ni:2 * ni] = (M @ u_prev[ni:]) / cfg.dt

        w = u_prev
        rel = np.inf
        for k in range(1, cfg.max_picard + 1):
            A = self.system_matrix(w, cfg.dt, convection)
            x = splu(A).solve(rhs)
            u, p = self._split(x)
            nrm = self.mass_norm(u)
            diff = self.mass_norm(u - w)
            rel = diff / nrm if nrm > 0 else (0.0 if diff == 0 else np.inf)
            w = u
            if rel <= cfg.eta:
                return VelocityState(self._full(u), p, prev.time_index + 1), k
        raise NonConvergence(cfg.max_picard, rel, prev.time_index + 1)

    def backward_euler(self, u0, cfg, convection=True):
        states = [u0]
        counts = []
        for _ in range(cfg.n_steps):
            state, k = self.picard_step(states[-1], cfg, convection)
            states.append(state)
            counts.append(k)
        if max(counts, default=0) > 25:
            log.warning("Picard iteration count reached %d", max(counts))
        return Trajectory(states, cfg.dt, counts)


def solver_for(space):
    """Solver cached on the (immutable) space object."""
    s = getattr(space, "_ns_solver", None)
    if s is None:
        s = NavierStokesSolver(space)
        space._ns_solver = s
    return s


def picard_step(space, u_prev, cfg, convection=True):
    return solver_for(space).picard_step(u_prev, cfg, convection)[0]


def backward_euler(space, u0, cfg, convection=True):
    return solver_for(space).backward_euler(u0, cfg, convection)


def evaluate_G(traj, space, functional):
    state = traj.state_at(functional.t)
    val = evaluate_velocity(space, state.u, np.atleast_2d(functional.point))
    return float(val[0, functional.component - 1])


def energy_profile(traj, space):
    """``(lhs_j, rhs)`` of the discrete energy inequality for every step ``j``."""
    solver = solver_for(space)
    e0 = solver.mass_norm(solver._inner(traj.states[0].u)) ** 2
    K = space.scalar_stiffness
    n = space.n_nodes
    dissipation = 0.0
    lhs = []
    for st in traj.states[1:]:
        a, b = st.u[:n], st.u[n:]
        dissipation += traj.dt * (a @ (K @ a) + b @ (K @ b))
        lhs.append(solver.mass_norm(solver._inner(st.u)) ** 2 + dissipation)
    return np.array(lhs), e0
