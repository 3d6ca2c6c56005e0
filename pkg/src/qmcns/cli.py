"""Command-line entry point: ``qmcns {kl,cbc,run,rates}``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""

import argparse
import csv
import logging
import sys

from .errors import ConfigError, NumericalError
from .experiment import (
    ExperimentConfig,
    SampleEvaluator,
    export_report,
    load_config,
    rates_from_summary,
    read_summary,
    run_qmc,
    run_mc,
    save_config,
    weights_for,
)
from .ns_solver import Functional
from .plotting import curves_from_reports, plot_b_sequence, plot_stderr
from .qmc import cbc_construct, save_generating_vector
from .random_field import b_sequence, build_kl, load_kl, save_kl

log = logging.getLogger("qmcns")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _int_list(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _functional(text):
    # name:x,y:component:t
    try:
        name, pt, comp, t = text.split(":")
        x, y = (float(v) for v in pt.split(","))
        return Functional((x, y), int(comp), float(t), name)
    except ValueError:
        raise argparse.ArgumentTypeError(f"functional must look like G1:0.5,0.5:1:0.1, got {text!r}")


# flag -> ExperimentConfig field
_CONFIG_FLAGS = {
    "mesh": "mesh", "dt": "dt", "T": "T", "s": "s", "N": "N_list", "R": "R", "nu": "nu",
    "sigma2": "sigma2", "lambda_C": "lambda_C", "refine": "refine", "p_hat": "p_hat",
    "p_range": "p_range", "delta": "delta", "eta": "eta", "max_picard": "max_picard",
    "assumed_k": "assumed_k", "method": "method", "repeats": "repeats", "seed": "base_seed",
    "functional": "functionals",
}


def _add_config_flags(p, seed_required=False):
    g = p.add_argument_group("experiment configuration (overrides --config)")
    g.add_argument("--config", help="JSON file with ExperimentConfig fields")
    g.add_argument("--mesh", type=int, help="squares per side of the solver mesh")
    g.add_argument("--refine", type=int, help="KL mesh refinement factor")
    g.add_argument("--dt", type=float)
    g.add_argument("--T", type=float)
    g.add_argument("--s", type=int, help="truncation dimension")
    g.add_argument("--N", type=_int_list, help="comma-separated lattice sizes")
    g.add_argument("--R", type=int, help="random shifts / MC batches")
    g.add_argument("--nu", type=float)
    g.add_argument("--sigma2", type=float)
    g.add_argument("--lambda-C", dest="lambda_C", type=float)
    g.add_argument("--p-hat", dest="p_hat", type=float, help="skip the regression and use this p")
    g.add_argument("--p-range", dest="p_range", type=_int_list, help="j_lo,j_hi for the p regression")
    g.add_argument("--delta", type=float)
    g.add_argument("--eta", type=float, help="Picard tolerance")
    g.add_argument("--max-picard", dest="max_picard", type=int)
    g.add_argument("--assumed-k", dest="assumed_k", type=float)
    g.add_argument("--method", choices=("qmc", "mc", "both"))
    g.add_argument("--repeats", type=int)
    g.add_argument("--functional", action="append", type=_functional,
                   help="name:x,y:component:t (repeatable)")
    g.add_argument("--seed", type=int, required=seed_required)
    g.add_argument("--kl", help="cached KL basis file (see `qmcns kl`)")


def config_from_args(args):
    base = load_config(args.config).to_dict() if getattr(args, "config", None) else {}
    for flag, name in _CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            base[name] = v
    return ExperimentConfig.from_dict(base)


def _kl_for(config, path):
    if path:
        kl = load_kl(path)
        if kl.params != config.matern:
            raise ConfigError(f"{path} was computed for {kl.params}, config asks for {config.matern}")
        return kl
    return build_kl(config.mesh * config.refine, config.matern, max(config.s, config.p_range[1]))


def cmd_kl(args):
    cfg = config_from_args(args)
    n = args.terms or max(cfg.s, cfg.p_range[1])
    kl = build_kl(cfg.mesh * cfg.refine, cfg.matern, n)
    save_kl(kl, args.out)
    lo, hi = cfg.p_range
    bseq = b_sequence(kl, lo, hi)
    with open(f"{args.out}_b.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "mu", "b"])
        for j, (mu, b) in enumerate(zip(kl.mu, bseq.b), start=1):
            w.writerow([j, "%.17g" % mu, "%.17g" % b])
    plot_b_sequence(bseq.b, f"{args.out}_b.png", bseq.p_hat)
    print(f"wrote {kl.s_max} KL terms to {args.out}; p_hat = {bseq.p_hat:.4f} over j = {lo}..{hi}")
    return EXIT_OK


def cmd_cbc(args):
    cfg = config_from_args(args)
    kl = _kl_for(cfg, args.kl)
    w, info = weights_for(cfg, kl)
    for N in cfg.N_list:
        rule = cbc_construct(N, cfg.s, w).rule
        out = args.out.format(N=N) if len(cfg.N_list) > 1 else args.out
        save_generating_vector(rule, out)
        print(f"N={N}: z written to {out} (lambda*={info['lambda_star']:.4f}, p_hat={info['p_hat']:.4f})")
    return EXIT_OK


def cmd_run(args):
    cfg = config_from_args(args)
    evaluator = SampleEvaluator(cfg, _kl_for(cfg, args.kl))
    save_config(cfg, f"{args.out}_config.json")
    reports = {}
    for m in cfg.methods:
        run = run_qmc if m == "qmc" else run_mc
        reports[m] = run(cfg, evaluator, workers=args.workers, flush_prefix=args.out)
        paths = export_report(reports[m], args.out)
        for name, rate in reports[m].rates().items():
            print(f"{m} {name}: rate {rate:.4f}")
        log.info("wrote %s", ", ".join(paths.values()))
    plot_stderr(curves_from_reports(reports), f"{args.out}_stderr.png",
                title=f"m={cfg.mesh}, s={cfg.s}, R={cfg.R}")
    return EXIT_OK


def cmd_rates(args):
    curves = {}
    for path in args.summaries:
        rows = read_summary(path)
        method = "qmc" if "_qmc_" in path else "mc" if "_mc_" in path else path
        try:
            rates = rates_from_summary(rows)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for name, rate in sorted(rates.items()):
            print(f"{path} {name}: rate {rate:.4f}")
        for r in rows:
            curves.setdefault((method, r["functional"]), {})[r["N"]] = r["stderr"]
    if args.plot:
        plot_stderr(curves, args.plot)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="qmcns", description="QMC uncertainty quantification for Navier-Stokes "
                                          "with log-normal initial velocity")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    k = sub.add_parser("kl", help="compute and cache KL eigenpairs")
    _add_config_flags(k)
    k.add_argument("--terms", type=int, help="number of eigenpairs to keep")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_kl)

    c = sub.add_parser("cbc", help="construct generating vectors")
    _add_config_flags(c)
    c.add_argument("--out", required=True, help="output file; use {N} when several N are given")
    c.set_defaults(func=cmd_cbc)

    r = sub.add_parser("run", help="run the QMC / MC convergence study")
    _add_config_flags(r, seed_required=True)
    r.add_argument("--out", default="qmcns", help="prefix for all output files")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("rates", help="fit convergence rates from summary CSVs")
    t.add_argument("summaries", nargs="+")
    t.add_argument("--plot", help="write a log-log figure here")
    t.set_defaults(func=cmd_rates)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, MemoryError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
