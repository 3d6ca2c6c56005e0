"""QMC vs MC convergence study: configuration, sampling, estimators and export.

Seeds. Shift ``r`` of repeat ``k`` of the ``N``-point QMC run draws its shift
from PCG64 seeded with ``base_seed XOR h("qmc", N, k, r)``; the matching MC
batch uses ``h("mc", N, k, r)``. ``h`` is the first 8 bytes (little endian)
of a BLAKE2b digest of the tuple, so seeds do not depend on Python's hash
randomisation or on the order in which work is scheduled.
"""

import csv
import dataclasses
import hashlib
import json
import logging
import math
import multiprocessing
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, SampleFailure
from .initial_data import projector_for_kl
from .mesh_fem import build_mesh, build_space, p2_basis
from .ns_solver import Functional, SolverConfig, solver_for
from .qmc import (
    cbc_construct,
    choose_a,
    choose_lambda,
    generate_points,
    map_to_gaussian,
    pod_weights,
)
from .random_field import MaternParams, b_sequence, build_kl

log = logging.getLogger(__name__)

METHODS = ("qmc", "mc")


def _default_functionals():
    return (Functional((0.5, 0.5), 1, 0.1, "G1"), Functional((0.5, 0.5), 2, 0.2, "G2"))


@dataclass(frozen=True)
class ExperimentConfig:
    mesh: int = 8
    dt: float = 0.1
    T: float = 0.2
    s: int = 64
    N_list: tuple = (127, 257, 509, 1021, 2039)
    R: int = 32
    functionals: tuple = field(default_factory=_default_functionals)
    nu: float = 2.5
    sigma2: float = 0.25
    lambda_C: float = 1.0
    refine: int = 4
    p_hat: float = None
    p_range: tuple = (10, 60)
    delta: float = 1.0 / 11.0
    base_seed: int = 0
    eta: float = 1e-7
    max_picard: int = 50
    assumed_k: float = None
    method: str = "both"
    repeats: int = 1

    def __post_init__(self):
        object.__setattr__(self, "N_list", tuple(int(n) for n in self.N_list))
        object.__setattr__(self, "p_range", tuple(int(j) for j in self.p_range))
        fs = tuple(f if isinstance(f, Functional) else Functional(tuple(f["point"]), int(f["component"]),
                                                                   float(f["t"]), f.get("name", "G"))
                   for f in self.functionals)
        object.__setattr__(self, "functionals", fs)
        self.validate()

    def validate(self):
        def bad(msg):
            raise ConfigError(msg)

        if self.mesh < 1:
            bad("mesh must be a positive integer")
        if not 0 <= self.base_seed < 2**64:
            bad("base_seed must lie in [0, 2^64)")
        if self.refine < 1:
            bad("refine must be a positive integer")
        try:
            SolverConfig(self.dt, self.T, self.eta, self.max_picard)
        except ValueError as exc:
            bad(str(exc))
        if not self.N_list:
            bad("N_list is empty")
        if any(n < 2 for n in self.N_list):
            bad("every N must be at least 2")
        if any(b <= a for a, b in zip(self.N_list, self.N_list[1:])):
            bad("N_list must be strictly increasing")
        if self.R < 2:
            bad("R must be at least 2 to form a standard error")
        if self.repeats < 1:
            bad("repeats must be at least 1")
        if self.s < 1:
            bad("s must be positive")
        n_fine = (self.mesh * self.refine + 1) ** 2
        if max(self.s, self.p_range[1]) > n_fine:
            bad(f"s and the p regression range must not exceed the {n_fine} fine-mesh nodes")
        if self.method not in ("qmc", "mc", "both"):
            bad("method must be qmc, mc or both")
        if self.p_hat is not None and not 0 < self.p_hat <= 1:
            bad("p_hat must lie in (0, 1]")
        if self.p_hat is None and self.p_range[1] - self.p_range[0] < 8:
            bad("p regression range needs at least 9 terms")
        if not 0 < self.delta <= 0.5:
            bad("delta must lie in (0, 1/2]")
        try:
            MaternParams(self.nu, self.sigma2, self.lambda_C)
        except ValueError as exc:
            bad(str(exc))
        if not self.functionals:
            bad("at least one functional is required")
        names = [f.name for f in self.functionals]
        if len(set(names)) != len(names):
            bad("functional names must be unique")
        for f in self.functionals:
            j = round(f.t / self.dt)
            if abs(j * self.dt - f.t) > 1e-12 or j < 1:
                bad(f"functional {f.name}: t={f.t} is not a positive multiple of dt={self.dt}")
            if f.t > self.T + 1e-12:
                bad(f"functional {f.name}: t={f.t} exceeds T={self.T}")
            if not all(0.0 <= c <= 1.0 for c in f.point):
                bad(f"functional {f.name}: point outside the unit square")

    @property
    def methods(self):
        return METHODS if self.method == "both" else (self.method,)

    @property
    def matern(self):
        return MaternParams(self.nu, self.sigma2, self.lambda_C)

    @property
    def t_max(self):
        return max(f.t for f in self.functionals)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["N_list"] = list(self.N_list)
        d["p_range"] = list(self.p_range)
        d["functionals"] = [{"name": f.name, "point": list(f.point), "component": f.component, "t": f.t}
                            for f in self.functionals]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def load_config(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(d)


def save_config(config, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def seed_for(base_seed, tag, N, repeat, r):
    digest = hashlib.blake2b(f"{tag}:{N}:{repeat}:{r}".encode(), digest_size=8).digest()
    return int(base_seed) ^ int.from_bytes(digest, "little")


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


# -- statistics ----------------------------------------------------------------

def standard_error(values):
    """``sqrt(sum (Q_r - mean)^2 / (R (R - 1)))``."""
    q = np.asarray(values, dtype=float)
    R = len(q)
    if R < 2:
        raise ValueError("the standard error needs at least two replicates")
    return float(np.sqrt(np.sum((q - q.mean()) ** 2) / (R * (R - 1))))


def estimate_rate(stderr_by_N):
    """Least-squares slope of ``-log e`` against ``log N``."""
    items = sorted(dict(stderr_by_N).items())
    if len(items) < 3:
        raise ValueError("a rate needs at least three (N, error) pairs")
    N = np.array([k for k, _ in items], dtype=float)
    e = np.array([v for _, v in items], dtype=float)
    if np.any(~(e > 0)):
        raise ValueError("errors must be strictly positive")
    return float(np.polyfit(np.log(N), -np.log(e), 1)[0])


# -- sampling ------------------------------------------------------------------

class _PointFailure(Exception):
    def __init__(self, index, message):
        super().__init__(index, message)
        self.index = index
        self.message = message


class SampleEvaluator:
    """Maps a parameter vector ``y`` to the functional values of one trajectory."""

    def __init__(self, config, kl=None):
        self.config = config
        self.space = build_space(build_mesh(config.mesh))
        if kl is None:
            kl = build_kl(config.mesh * config.refine, config.matern,
                          max(config.s, config.p_range[1]))
        if kl.s_max < config.s:
            raise ConfigError(f"KL basis holds {kl.s_max} terms, s={config.s} requested")
        self.kl = kl
        self.projector = projector_for_kl(self.space, kl)
        self.solver = solver_for(self.space)
        self.solver_cfg = SolverConfig(config.dt, config.t_max, config.eta, config.max_picard)
        n = self.space.n_nodes
        self._probes = []
        for f in config.functionals:
            tri, bary = self.space.mesh.locate(np.atleast_2d(f.point))
            phi, _ = p2_basis(bary)
            idx = (f.component - 1) * n + self.space.cell_nodes[tri[0]]
            self._probes.append((int(round(f.t / config.dt)), idx, phi[0]))

    def __call__(self, y):
        """``(values per functional, max Picard count, ||exp Z||_{H^1})``."""
        y = np.asarray(y, dtype=float)
        u0 = self.projector.project(y)
        traj = self.solver.backward_euler(u0, self.solver_cfg)
        vals = np.array([phi @ traj.states[j].u[idx] for j, idx, phi in self._probes])
        return vals, max(traj.picard_counts), self.projector.exp_field_h1_norm(y)

    def block(self, ys, offset=0):
        nf = len(self._probes)
        vals = np.empty((len(ys), nf))
        picard = np.empty(len(ys), dtype=np.int64)
        h1 = np.empty(len(ys))
        for k, y in enumerate(ys):
            try:
                vals[k], picard[k], h1[k] = self(y)
            except NumericalError as exc:
                raise _PointFailure(offset + k, str(exc)) from exc
        return vals, picard, h1


_WORKER = None


def _worker_init(evaluator):
    global _WORKER
    _WORKER = evaluator


def _worker_block(args):
    ys, offset = args
    return _WORKER.block(ys, offset)


class _Executor:
    """Evaluates blocks of parameter vectors in order, optionally on forked workers."""

    def __init__(self, evaluator, workers=1, chunk=64):
        self.evaluator = evaluator
        self.workers = max(1, int(workers))
        self.chunk = chunk
        self._pool = None
        if self.workers > 1:
            ctx = multiprocessing.get_context("fork")
            self._pool = ctx.Pool(self.workers, initializer=_worker_init, initargs=(evaluator,))

    def evaluate(self, ys):
        if self._pool is None:
            return self.evaluator.block(ys)
        jobs = [(ys[lo:lo + self.chunk], lo) for lo in range(0, len(ys), self.chunk)]
        parts = self._pool.map(_worker_block, jobs, chunksize=1)
        return tuple(np.concatenate(p) for p in zip(*parts))

    def close(self):
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None


# -- reports -------------------------------------------------------------------

@dataclass(eq=False)
class ErrorReport:
    """Replicate estimates ``Q[f, k, rep, r]`` for functional ``f`` and ``N_list[k]``.

    Entries not yet computed are NaN; ``complete`` is False for a partial
    report flushed after a failure.
    """

    method: str
    config: ExperimentConfig
    Q: np.ndarray
    picard_max: np.ndarray
    exp_h1_max: np.ndarray
    seeds: np.ndarray
    provenance: dict = field(default_factory=dict)
    complete: bool = True

    @property
    def functional_names(self):
        return tuple(f.name for f in self.config.functionals)

    @property
    def N_list(self):
        return self.config.N_list

    def done(self, k):
        return bool(np.all(np.isfinite(self.Q[:, k])))

    def completed_N(self):
        return [N for k, N in enumerate(self.N_list) if self.done(k)]

    def mean(self, f, k):
        return float(np.mean(np.mean(self.Q[f, k], axis=1)))

    def stderr(self, f, k):
        """Standard error over replicates, averaged over repeats."""
        return float(np.mean([standard_error(q) for q in self.Q[f, k]]))

    def summary(self):
        """Rows ``(functional, N, mean, stderr)`` for every completed ``N``."""
        rows = []
        for f, name in enumerate(self.functional_names):
            for k, N in enumerate(self.N_list):
                if self.done(k):
                    rows.append((name, N, self.mean(f, k), self.stderr(f, k)))
        return rows

    def rates(self):
        out = {}
        for f, name in enumerate(self.functional_names):
            pairs = {N: self.stderr(f, k) for k, N in enumerate(self.N_list) if self.done(k)}
            try:
                out[name] = estimate_rate(pairs)
            except ValueError:
                out[name] = float("nan")
        return out


def _empty_report(config, method, provenance):
    nf, nN = len(config.functionals), len(config.N_list)
    shape = (nN, config.repeats, config.R)
    return ErrorReport(method, config, np.full((nf,) + shape, np.nan), np.zeros(shape, dtype=np.int64),
                       np.full(shape, np.nan), np.zeros(shape, dtype=np.uint64), provenance)


def weights_for(config, kl):
    """POD weights and the parameters that produced them."""
    bseq = b_sequence(kl)
    p_hat = config.p_hat
    if p_hat is None:
        lo, hi = config.p_range
        p_hat = b_sequence(kl, lo, hi).p_hat
    lam = choose_lambda(p_hat, config.delta)
    a = choose_a(lam)
    w = pod_weights(bseq.b[:config.s], lam, a, config.delta)
    return w, {"p_hat": float(p_hat), "lambda_star": lam, "a": a}


def generating_vectors(config, kl):
    w, info = weights_for(config, kl)
    rules = {N: cbc_construct(N, config.s, w).rule for N in config.N_list}
    return rules, info


def zvec_hash(rule):
    return hashlib.sha256(np.asarray(rule.z, dtype="<i8").tobytes()).hexdigest()


def _run(config, method, evaluator, workers, flush_prefix, rules=None):
    prov = {"seed": config.base_seed, "config_hash": config.config_hash(), "method": method}
    if method == "qmc":
        if rules is None:
            rules, info = generating_vectors(config, evaluator.kl)
            prov.update(info)
        prov["generating_vectors"] = {str(N): zvec_hash(rules[N]) for N in config.N_list}
    report = _empty_report(config, method, prov)
    ex = _Executor(evaluator, workers)
    try:
        for k, N in enumerate(config.N_list):
            for rep in range(config.repeats):
                for r in range(config.R):
                    seed = seed_for(config.base_seed, method, N, rep, r)
                    rng = _rng(seed)
                    if method == "qmc":
                        ys = map_to_gaussian(generate_points(rules[N], rng.random(config.s)))
                    else:
                        ys = rng.standard_normal((N, config.s))
                    try:
                        vals, picard, h1 = ex.evaluate(ys)
                    except _PointFailure as exc:
                        report.complete = False
                        if flush_prefix is not None:
                            export_report(report, flush_prefix)
                        raise SampleFailure(method, N, r, exc.index, exc.message) from None
                    report.Q[:, k, rep, r] = vals.mean(axis=0)
                    report.picard_max[k, rep, r] = picard.max()
                    report.exp_h1_max[k, rep, r] = h1.max()
                    report.seeds[k, rep, r] = seed
            log.info("%s N=%d done", method, N)
    finally:
        ex.close()
    return report


def run_qmc(config, evaluator=None, workers=1, flush_prefix=None, rules=None):
    evaluator = evaluator or SampleEvaluator(config)
    return _run(config, "qmc", evaluator, workers, flush_prefix, rules)


def run_mc(config, evaluator=None, workers=1, flush_prefix=None):
    evaluator = evaluator or SampleEvaluator(config)
    return _run(config, "mc", evaluator, workers, flush_prefix)


def run_experiment(config, evaluator=None, workers=1, flush_prefix=None):
    """Reports keyed by method for every method the config selects."""
    evaluator = evaluator or SampleEvaluator(config)
    return {m: _run(config, m, evaluator, workers, flush_prefix) for m in config.methods}


# -- export --------------------------------------------------------------------

def _fmt(x):
    return "%.17g" % x


def report_paths(prefix, method):
    return {
        "replicates": f"{prefix}_{method}_replicates.csv",
        "summary": f"{prefix}_{method}_summary.csv",
        "plot": f"{prefix}_{method}_plot.csv",
        "rates": f"{prefix}_{method}_rates.csv",
        "meta": f"{prefix}_{method}_meta.json",
    }


def export_report(report, path_prefix):
    """Write the CSV tables and a JSON snapshot of config and provenance; returns the paths."""
    paths = report_paths(path_prefix, report.method)
    names = report.functional_names
    with open(paths["replicates"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["functional", "N", "repeat", "replicate", "seed", "Q", "picard_max", "exp_h1_max"])
        for k, N in enumerate(report.N_list):
            for rep in range(report.config.repeats):
                for r in range(report.config.R):
                    if not np.isfinite(report.Q[0, k, rep, r]):
                        continue
                    for f, name in enumerate(names):
                        w.writerow([name, N, rep, r, int(report.seeds[k, rep, r]), _fmt(report.Q[f, k, rep, r]),
                                    int(report.picard_max[k, rep, r]), _fmt(report.exp_h1_max[k, rep, r])])
    summary = report.summary()
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["functional", "N", "mean", "stderr"])
        for name, N, mean, se in summary:
            w.writerow([name, N, _fmt(mean), _fmt(se)])
    with open(paths["plot"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["functional", "N", "log_N", "log_stderr"])
        for name, N, _, se in summary:
            w.writerow([name, N, _fmt(math.log(N)), _fmt(math.log(se)) if se > 0 else "-inf"])
    with open(paths["rates"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["functional", "rate", "n_points"])
        n_pts = len(report.completed_N())
        for name, rate in report.rates().items():
            w.writerow([name, _fmt(rate), n_pts])
    meta = {"config": report.config.to_dict(), "provenance": report.provenance,
            "complete": report.complete, "completed_N": report.completed_N()}
    if report.config.assumed_k is not None:
        meta["expected_truncation_rate"] = report.config.assumed_k / 2.0 - 1.0
    with open(paths["meta"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def read_summary(path):
    """Rows of a summary CSV as dicts with ``N`` int and ``mean``/``stderr`` float."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"functional": r["functional"], "N": int(r["N"]), "mean": float(r["mean"]),
             "stderr": float(r["stderr"])} for r in rows]


def rates_from_summary(rows):
    by_f = {}
    for r in rows:
        by_f.setdefault(r["functional"], {})[r["N"]] = r["stderr"]
    return {f: estimate_rate(d) for f, d in by_f.items()}
