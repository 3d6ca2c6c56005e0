"""Randomly shifted rank-1 lattice rules for Gaussian integrals over R^s.

The generating vector is built component by component, minimising the
shift-averaged worst-case error in an unanchored weighted Sobolev space with
weight functions ``psi_j(t)^2 = exp(-2 a_j |t|)`` and POD weights
``gamma_u = Gamma_|u| * prod_{j in u} gamma_j``.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy import integrate, special

SQRT2PI = math.sqrt(2.0 * math.pi)
# smallest positive double used in place of an exact zero before inversion
_NUDGE = 2.0 ** -53


def inv_norm_cdf(v):
    """Inverse standard normal CDF, elementwise; rejects values outside (0, 1)."""
    v = np.asarray(v, dtype=float)
    if np.any(~(v > 0.0) | ~(v < 1.0)):
        raise ValueError("inverse normal CDF needs arguments in the open interval (0, 1)")
    out = special.ndtri(v)
    return float(out) if out.ndim == 0 else out


def norm_cdf(t):
    return special.ndtr(t)


def euler_totient(N):
    """Number of ``1 <= z <= N - 1`` coprime to ``N`` (so ``N = 1`` gives 0)."""
    N = int(N)
    if N < 1:
        raise ValueError("N must be positive")
    if N == 1:
        return 0
    result, n, p = N, N, 2
    while p * p <= n:
        if n % p == 0:
            while n % p == 0:
                n //= p
            result -= result // p
        p += 1
    if n > 1:
        result -= result // n
    return result


def coprime_candidates(N):
    z = np.arange(1, N)
    return z[np.gcd(z, N) == 1]


def zeta(x):
    if not x > 1:
        raise ValueError("zeta(x) needs x > 1")
    return float(special.zeta(x, 1))


def rho(lam, a):
    """Constant ``rho_i(lambda)`` of the CBC error bound for weight exponent ``a``."""
    if not 0.5 < lam <= 1.0:
        raise ValueError("lambda must lie in (1/2, 1]")
    if not a > 0:
        raise ValueError("a must be positive")
    eta = (2 * lam - 1) / (4 * lam)
    base = SQRT2PI * math.exp(a * a / eta) / (math.pi ** (2 - 2 * eta) * (1 - eta) * eta)
    return 2.0 * base**lam * zeta(lam + 0.5)


def choose_lambda(p_hat, delta=1.0 / 11.0):
    """Rate parameter lambda* from the summability exponent of ``b_j``."""
    if not 0 < p_hat <= 1:
        raise ValueError("p_hat must lie in (0, 1]")
    if not 0 < delta <= 0.5:
        raise ValueError("delta must lie in (0, 1/2]")
    if p_hat <= 2.0 / 3.0:
        return 1.0 / (2.0 - 2.0 * delta)
    if p_hat < 1.0:
        return p_hat / (2.0 - p_hat)
    return 1.0


def choose_a(lam):
    """Weight-function exponent minimising the error constant for given lambda."""
    return math.sqrt((2 * lam - 1) / (8 * lam))


# -- shift-averaged kernel -----------------------------------------------------

def _theta_integrand(t, f, a):
    # max(0, Phi - f) + max(0, Phi - 1 + f) - Phi^2, written with the upper
    # tail where it avoids cancellation; each piece alone is not integrable
    # against exp(2 a |t|), only the sum is.
    P = special.ndtr(t)
    Q = special.ndtr(-t)
    g = -P * P
    if P > f:
        g = g + (P - f)
    if P > 1 - f:
        g = g + (P - 1 + f)
    if P > f and P > 1 - f:
        g = -Q * Q
    elif f == 0.0:
        g = P * Q
    return g * math.exp(2 * a * abs(t))


def _theta_cutoff(a):
    # tails behave like Phi(-|t|)^2 exp(2 a |t|) <= exp(-t^2 + 2 a |t|)
    t = 8.0
    while math.exp(-t * t + 2 * a * t) > 1e-30:
        t += 1.0
    return t


def theta(f, a):
    """Shift-averaged kernel ``theta(f)`` for ``psi^2(t) = exp(-2 a |t|)``."""
    if not a > 0:
        raise ValueError("a must be positive")
    f = float(f)
    if not 0.0 <= f < 1.0:
        raise ValueError("f must lie in [0, 1)")
    cut = _theta_cutoff(a)
    breaks = {0.0}
    for c in (f, 1.0 - f):
        if 0.0 < c < 1.0:
            t = float(special.ndtri(c))
            if abs(t) < cut:
                breaks.add(t)
    pts = [-cut] + sorted(breaks) + [cut]
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        if hi > lo:
            val, _ = integrate.quad(_theta_integrand, lo, hi, args=(f, a),
                                    epsabs=1e-13, epsrel=1e-12, limit=200)
            total += val
    return total


@lru_cache(maxsize=32)
def _theta_table_cached(N, a):
    tab = np.empty(N)
    half = N // 2
    for k in range(half + 1):
        tab[k] = theta(k / N, a)
    tab[half + 1:] = tab[1:N - half][::-1]
    tab.setflags(write=False)
    return tab


def theta_table(N, a):
    """``theta(k / N)`` for ``k = 0..N-1`` (built once per ``(N, a)``)."""
    return _theta_table_cached(int(N), float(a))


# -- weights -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PODWeights:
    """POD weights ``gamma_u = Gamma_|u| prod_{j in u} gamma_j``.

    ``log_order`` holds ``log Gamma_0 .. log Gamma_s`` (``Gamma_l`` itself
    overflows for ``l`` beyond about a hundred).
    """

    lambda_star: float
    a: np.ndarray
    gamma: np.ndarray
    log_order: np.ndarray
    delta: float = 1.0 / 11.0

    @property
    def order(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_order)

    @property
    def s(self):
        return len(self.gamma)

    def weight(self, subset):
        """``gamma_u`` for an iterable of 0-based coordinate indices."""
        subset = list(subset)
        prod = float(np.prod(self.gamma[subset]))
        if prod == 0.0:
            return 0.0
        return math.exp(self.log_order[len(subset)] + math.log(prod))

    def order_ratio(self):
        """``Gamma_l / Gamma_{l-1}`` for ``l = 1..s``."""
        return np.exp(np.diff(self.log_order))


def pod_weights(b, lambda_star, a=None, delta=1.0 / 11.0):
    """Weights minimising the error constant for the sequence ``b``."""
    b = np.asarray(b, dtype=float)
    s = len(b)
    if a is None:
        a = choose_a(lambda_star)
    a_arr = np.full(s, a, dtype=float) if np.ndim(a) == 0 else np.asarray(a, dtype=float)
    rho_j = np.array([rho(lambda_star, aj) for aj in a_arr])
    expo = 1.0 / (1.0 + lambda_star)
    gamma = (b**2 / (a_arr * rho_j)) ** expo
    ell = np.arange(s + 1)
    log_order = expo * (2 * special.gammaln(ell + 1) + ell * math.log(4.0))
    return PODWeights(lambda_star, a_arr, gamma, log_order, delta)


def pod_weight_direct(b, lam, a, subset):
    """``gamma_u`` evaluated from its defining product formula (no factorisation)."""
    k = len(subset)
    prod = 1.0
    for j in subset:
        prod *= b[j] ** 2 / (a * rho(lam, a))
    return ((math.factorial(k) ** 2) * 4.0**k * prod) ** (1.0 / (1.0 + lam))


# -- lattice rules ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LatticeRule:
    N: int
    z: np.ndarray

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("a lattice rule needs N >= 2")
        z = np.asarray(self.z, dtype=np.int64)
        if np.any(z < 1) or np.any(z > self.N - 1):
            raise ValueError("generating vector entries must lie in [1, N-1]")
        if np.any(np.gcd(z, self.N) != 1):
            raise ValueError("generating vector entries must be coprime to N")
        object.__setattr__(self, "z", z)

    @property
    def s(self):
        return len(self.z)


def _indices(N, z):
    # i = 1..N; i = N maps to index 0 (the origin before shifting)
    i = np.arange(1, N + 1, dtype=np.int64)
    return (i * int(z)) % N


class _Accumulator:
    """Per-point order accumulators ``Q_i(l) = Gamma_l q_i(l)``.

    ``q_i(l)`` is the elementary symmetric polynomial of degree ``l`` in
    ``gamma_j theta(i z_j / N)`` over the dimensions chosen so far; storing it
    pre-multiplied by ``Gamma_l`` keeps the numbers in range.
    """

    def __init__(self, N, weights):
        self.N = N
        self.ratio = weights.order_ratio()
        s = weights.s
        self.Q = np.zeros((s + 1, N))
        self.Q[0] = math.exp(weights.log_order[0])
        self.d = 0

    def error_sq(self):
        return float(np.sum(self.Q[1:self.d + 1]) / self.N)

    def candidate_factor(self):
        # W_i = sum_{l>=1} (Gamma_l / Gamma_{l-1}) Q_i(l-1)
        d = self.d
        return self.ratio[:d + 1] @ self.Q[:d + 1]

    def add(self, gamma_j, th):
        d = self.d
        x = gamma_j * th
        self.Q[1:d + 2] = self.Q[1:d + 2] + self.ratio[:d + 1, None] * x * self.Q[:d + 1]
        self.d = d + 1
        if not np.all(np.isfinite(self.Q[d + 1])):
            raise FloatingPointError("order accumulators overflowed")


def shift_avg_error_sq(rule, weights, s=None, table=None):
    """Squared shift-averaged worst-case error of ``rule`` in the first ``s`` dims."""
    s = rule.s if s is None else s
    a = float(weights.a[0])
    if np.any(weights.a[:s] != a):
        raise ValueError("a single theta table needs identical a_j")
    tab = theta_table(rule.N, a) if table is None else table
    acc = _Accumulator(rule.N, weights)
    for j in range(s):
        acc.add(weights.gamma[j], tab[_indices(rule.N, rule.z[j])])
    return acc.error_sq()


def shift_avg_error_sq_bruteforce(rule, weights, s=None, table=None):
    """Same quantity by summing over every nonempty subset (exponential cost)."""
    s = rule.s if s is None else s
    a = float(weights.a[0])
    tab = theta_table(rule.N, a) if table is None else table
    th = np.array([tab[_indices(rule.N, rule.z[j])] for j in range(s)])
    total = 0.0
    for k in range(1, s + 1):
        for u in combinations(range(s), k):
            total += weights.weight(u) / rule.N * np.sum(np.prod(th[list(u)], axis=0))
    return float(total)


@dataclass
class CBCResult:
    rule: LatticeRule
    errors_sq: np.ndarray = field(default_factory=lambda: np.zeros(0))


CBC_TIE_RTOL = 1e-12


def cbc_construct(N, s, weights, chunk=256, table=None):
    """Component-by-component construction; ties go to the smallest ``z``.

    Returns a :class:`CBCResult` with the squared error after each component.
    """
    N = int(N)
    if N < 2:
        raise ValueError("N must be at least 2")
    if s < 1 or s > weights.s:
        raise ValueError(f"s must lie in [1, {weights.s}]")
    a = float(weights.a[0])
    if np.any(weights.a[:s] != a):
        raise ValueError("CBC with a single theta table needs identical a_j")
    tab = theta_table(N, a) if table is None else table
    cand = coprime_candidates(N)
    i = np.arange(1, N + 1, dtype=np.int64)
    acc = _Accumulator(N, weights)
    z = []
    errs = []
    for d in range(s):
        base = acc.error_sq()
        W = acc.candidate_factor()
        scores = np.empty(len(cand))
        for lo in range(0, len(cand), chunk):
            zc = cand[lo:lo + chunk]
            idx = (zc[:, None] * i[None, :]) % N
            scores[lo:lo + chunk] = tab[idx] @ W
        vals = base + weights.gamma[d] * scores / N
        # exact ties are common (z and N - z always tie), so compare with a tolerance
        best = int(np.flatnonzero(vals <= vals.min() + CBC_TIE_RTOL * abs(vals.min()))[0])
        zd = int(cand[best])
        z.append(zd)
        acc.add(weights.gamma[d], tab[_indices(N, zd)])
        errs.append(acc.error_sq())
    return CBCResult(LatticeRule(N, np.array(z)), np.array(errs))


def candidate_errors_sq(N, z_prefix, weights, table=None):
    """Squared error for every coprime candidate appended to ``z_prefix`` (by recomputation)."""
    out = {}
    for zc in coprime_candidates(N):
        rule = LatticeRule(N, np.r_[np.asarray(z_prefix, dtype=np.int64), zc])
        out[int(zc)] = shift_avg_error_sq(rule, weights, table=table)
    return out


# -- points --------------------------------------------------------------------

def generate_points(rule, shift, s=None):
    """Row ``i - 1`` holds ``frac(i z / N + shift)`` for ``i = 1..N``."""
    s = rule.s if s is None else s
    shift = np.asarray(shift, dtype=float)[:s]
    if shift.shape != (s,):
        raise ValueError(f"shift must have {s} components")
    if np.any(shift < 0) or np.any(shift >= 1):
        raise ValueError("shift coordinates must lie in [0, 1)")
    i = np.arange(1, rule.N + 1, dtype=np.int64)[:, None]
    base = (i * rule.z[None, :s]) % rule.N
    pts = base / rule.N + shift[None, :]
    return pts - np.floor(pts)


def map_to_gaussian(points):
    pts = np.where(points == 0.0, _NUDGE, points)
    return inv_norm_cdf(pts)


@dataclass(frozen=True, eq=False)
class ShiftSet:
    """``R`` uniform random shifts in ``[0, 1)^s``; shift ``r`` uses seed ``base_seed ^ r``."""

    shifts: np.ndarray
    base_seed: int

    @classmethod
    def draw(cls, R, s, base_seed):
        rows = [np.random.Generator(np.random.PCG64(int(base_seed) ^ r)).random(s)
                for r in range(R)]
        return cls(np.array(rows).reshape(R, s), int(base_seed))

    @property
    def R(self):
        return len(self.shifts)


def qmc_quadrature(evaluator, rule, shift, s=None):
    """Equal-weight average of ``evaluator(y)`` over the shifted, Gaussian-mapped lattice."""
    ys = map_to_gaussian(generate_points(rule, shift, s))
    vals = np.empty(len(ys))
    for k, y in enumerate(ys):
        try:
            vals[k] = evaluator(y)
        except Exception as exc:
            raise RuntimeError(f"evaluator failed at lattice point {k + 1}") from exc
    return float(np.mean(vals))


# -- generating vector files -----------------------------------------------------

def save_generating_vector(rule, path):
    """Plain text: ``N s`` on the first line, then one component per line."""
    with open(path, "w") as fh:
        fh.write(f"{rule.N} {rule.s}\n")
        for zj in rule.z:
            fh.write(f"{int(zj)}\n")


def load_generating_vector(path, s=None):
    """Read a file written by :func:`save_generating_vector`, optionally keeping ``s`` components."""
    with open(path) as fh:
        N, n = (int(t) for t in fh.readline().split())
        z = [int(line) for line in fh if line.strip()]
    if len(z) != n:
        raise ValueError(f"{path}: header promises {n} components, found {len(z)}")
    if s is not None:
        if s > n:
            raise ValueError(f"{path}: holds {n} components, {s} requested")
        z = z[:s]
    return LatticeRule(N, np.array(z, dtype=np.int64))
