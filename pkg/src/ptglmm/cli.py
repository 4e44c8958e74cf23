"""Command-line interface.

Subcommands:

  filter      drop lowly expressed genes by the CPM rule
  normalize   write per-sample log effective library sizes (TMM offsets)
  fit         fit one gene and write the full result as JSON
  fit-all     fit every gene (cascade) with hypothesis tests -> TSV + JSON
  test        Wald test of a saved single-gene fit
  simulate    run a calibration/power study and write its report
  pmf         empirical vs fitted pmf table for one gene

Global flags (before the subcommand): --seed, --threads, --quad-points,
--config.  A JSON config file maps flag names to default values; explicit
flags win.  PTGLMM_THREADS sets the default worker count.  Exit codes:
0 success, 2 validation error, 3 batch completed with failed genes.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import batch as batch_mod
from . import io as io_mod
from .glmm import (
    DataError,
    FitOptions,
    LongitudinalDataset,
    ThetaFull,
    fit_gene_cascade,
    fit_nbglm,
    fit_nbmixed,
    fit_ptglm,
    fit_ptmixed,
)
from .inference import HypothesisSpec, bh_adjust, wald_test
from .io import format_float
from .ptdist import PtParams, pt_pmf_vector
from .quadrature import gh_rule
from .simulate import SimDesign, run_study_ab, run_study_cd

__all__ = ["main"]


def _default_threads() -> int:
    env = os.environ.get("PTGLMM_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptglmm",
                                description="Poisson-Tweedie mixed models for longitudinal counts")
    p.add_argument("--seed", type=int, default=1, help="base random seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: PTGLMM_THREADS or cpu count)")
    p.add_argument("--quad-points", type=int, default=5, help="quadrature nodes")
    p.add_argument("--config", default=None, help="JSON file of default flag values")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("filter", help="CPM filter a counts table")
    sp.add_argument("--counts", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold-cpm", type=float, default=1.0)
    sp.add_argument("--min-fraction", type=float, default=0.5)

    sp = sub.add_parser("normalize", help="write TMM offsets")
    sp.add_argument("--counts", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--trim-m", type=float, default=0.30)
    sp.add_argument("--trim-a", type=float, default=0.05)
    sp.add_argument("--ref-sample", default=None)

    def add_data_args(sp, gene_required):
        sp.add_argument("--counts", required=True)
        sp.add_argument("--samples", required=True, help="sample sheet TSV")
        sp.add_argument("--fixed", required=True, help="fixed-effect spec, e.g. 'group+time'")
        sp.add_argument("--gene", required=gene_required)
        sp.add_argument("--offsets", default=None,
                        help="precomputed offsets TSV (bypasses normalization)")
        sp.add_argument("--no-normalize", action="store_true",
                        help="use zero offsets instead of TMM")
        sp.add_argument("--subject-col", default="subject")
        sp.add_argument("--time-col", default="time")

    sp = sub.add_parser("fit", help="fit a single gene")
    add_data_args(sp, gene_required=True)
    sp.add_argument("--family", choices=("pt", "nb"), default="pt")
    sp.add_argument("--glm", action="store_true", help="no random intercept")
    sp.add_argument("--out", required=True, help="output JSON")

    sp = sub.add_parser("fit-all", help="fit every gene with hypothesis tests")
    add_data_args(sp, gene_required=False)
    sp.add_argument("--test", action="append", default=[],
                    help="NAME=SPEC hypothesis (SPEC: coefficient list or @matrix.tsv); repeatable")
    sp.add_argument("--out-prefix", required=True)

    sp = sub.add_parser("test", help="Wald test on a saved fit JSON")
    sp.add_argument("--fit", required=True)
    sp.add_argument("--hypothesis", required=True)

    sp = sub.add_parser("simulate", help="run a simulation study")
    sp.add_argument("--scenario", required=True, choices=list("ABCDabcd"))
    sp.add_argument("--a", type=float, default=0.0, help="power parameter (scenarios A/B)")
    sp.add_argument("--n", type=int, required=True, help="subjects")
    sp.add_argument("--reps", type=int, required=True)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--G", type=int, default=500, help="genes (scenarios C/D)")
    sp.add_argument("--no-lrt", action="store_true")
    sp.add_argument("--out-prefix", required=True)

    sp = sub.add_parser("pmf", help="empirical vs fitted pmf table")
    add_data_args(sp, gene_required=True)
    sp.add_argument("--out", required=True)
    return p


def _load_config(argv, parser):
    """Apply --config JSON values as parser defaults before parsing."""
    if "--config" not in argv:
        return
    cfg_path = argv[argv.index("--config") + 1]
    with open(cfg_path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise DataError("config file must hold a JSON object of flag values")
    defaults = {k.replace("-", "_"): v for k, v in cfg.items()}
    parser.set_defaults(**defaults)
    for action in parser._subparsers._group_actions[0].choices.values():
        action.set_defaults(**{k: v for k, v in defaults.items()
                               if any(k == a.dest for a in action._actions)})


def _resolve_offsets(args, counts):
    if args.offsets:
        offsets = io_mod.read_offsets(args.offsets)
        missing = [s for s in counts.samples if s not in offsets]
        if missing:
            raise DataError(f"offsets missing for samples {missing[:3]}")
        return offsets
    if args.no_normalize:
        return {s: 0.0 for s in counts.samples}
    return io_mod.tmm_offsets(counts)


def _single_gene_dataset(args):
    counts = io_mod.read_counts(args.counts)
    sheet = io_mod.read_sample_sheet(args.samples)
    if set(counts.samples) != set(sheet.samples):
        raise DataError("counts columns and sample sheet ids do not match")
    sheet = sheet.reorder(counts.samples)
    offsets = _resolve_offsets(args, counts)
    if args.gene not in counts.genes:
        raise DataError(f"gene {args.gene!r} not in the counts table")
    y = counts.row(args.gene)
    data = io_mod.build_dataset(y, sheet, args.fixed, subject_col=args.subject_col,
                                time_col=args.time_col, offsets=offsets)
    return counts, sheet, offsets, data


def _fit_to_json(fit) -> dict:
    return {
        "model_tag": fit.model_tag,
        "converged": bool(fit.converged),
        "loglik": fit.loglik,
        "coef_names": fit.coef_names,
        "param_names": fit.param_names,
        "beta": [float(b) for b in fit.theta_hat.beta],
        "dispersion": float(fit.theta_hat.dispersion),
        "power": float(fit.theta_hat.power),
        "ranef_var": float(fit.theta_hat.ranef_var),
        "vcov": None if fit.vcov is None else [[float(v) for v in row] for row in fit.vcov],
        "n_loglik_evals": fit.n_loglik_evals,
        "flags": {k: (v.tolist() if hasattr(v, "tolist") else v) for k, v in fit.flags.items()},
    }


def _cmd_filter(args) -> int:
    table = io_mod.read_counts(args.counts)
    out = io_mod.cpm_filter(table, args.threshold_cpm, args.min_fraction)
    io_mod.write_counts(out, args.out)
    print(f"kept {len(out.genes)} of {len(table.genes)} genes", file=sys.stderr)
    return 0


def _cmd_normalize(args) -> int:
    table = io_mod.read_counts(args.counts)
    offsets = io_mod.tmm_offsets(table, args.trim_m, args.trim_a, args.ref_sample)
    io_mod.write_offsets(offsets, args.out)
    return 0


def _cmd_fit(args, options) -> int:
    _, _, _, data = _single_gene_dataset(args)
    if args.glm:
        fit = fit_ptglm(data, options) if args.family == "pt" else fit_nbglm(data, options)
    else:
        fit = fit_ptmixed(data, options) if args.family == "pt" else fit_nbmixed(data, options)
    with open(args.out, "w") as fh:
        json.dump(_fit_to_json(fit), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0 if fit.converged else 3


def _cmd_fit_all(args, options, threads) -> int:
    counts = io_mod.read_counts(args.counts)
    sheet = io_mod.read_sample_sheet(args.samples)
    offsets = _resolve_offsets(args, counts)
    hypotheses = []
    for item in args.test:
        if "=" not in item:
            raise DataError(f"--test must be NAME=SPEC, got {item!r}")
        name, spec = item.split("=", 1)
        hypotheses.append((name, spec))

    def progress(done, total):
        if done % 10 == 0 or done == total:
            print(f"fitted {done}/{total} genes", file=sys.stderr)

    result = batch_mod.run_fit_all(counts, sheet, args.fixed, hypotheses,
                                   options=options, offsets=offsets,
                                   workers=threads, progress=progress)
    batch_mod.write_results_tsv(result, args.out_prefix + ".tsv")
    batch_mod.write_results_json(result, args.out_prefix + ".json")
    print(f"wrote {args.out_prefix}.tsv ({result.n_failed} failed genes)", file=sys.stderr)
    return 3 if result.n_failed else 0


def _cmd_test(args) -> int:
    with open(args.fit) as fh:
        saved = json.load(fh)
    if saved["vcov"] is None:
        raise DataError("saved fit carries no covariance; Wald test unavailable")
    hyp = io_mod.parse_hypothesis(args.hypothesis, saved["coef_names"])

    # minimal stand-in object with the attributes wald_test needs
    class _Saved:
        converged = saved["converged"]
        vcov = np.array(saved["vcov"])
        n_coef = len(saved["coef_names"])
        flags = {}

        class theta_hat:
            beta = np.array(saved["beta"])

        @staticmethod
        def beta_cov():
            return np.array(saved["vcov"])[: len(saved["coef_names"]), : len(saved["coef_names"])]

    res = wald_test(_Saved, hyp)
    print("statistic\tdf\tp_value")
    print(f"{format_float(res.statistic)}\t{res.df}\t{format_float(res.p_value)}")
    return 0


def _cmd_simulate(args, options, threads, seed) -> int:
    scenario = args.scenario.upper()
    if scenario in ("A", "B"):
        dispersion = 1.0 if args.a == 1.0 else 3.0
        records, report = run_study_ab(
            scenario, args.a, args.n, args.reps, seed, alpha=args.alpha,
            k_quad=options.k_quad, do_lrt=not args.no_lrt, workers=threads,
        )
        design_echo = {
            "scenario": scenario, "power": args.a, "n": args.n, "m": 5,
            "dispersion": dispersion, "ranef_var": 0.5, "replicates": args.reps,
            "seed": seed, "alpha": args.alpha, "quad_points": options.k_quad,
        }
    else:
        _, report = run_study_cd(
            scenario, args.G, args.n, args.reps, seed, alpha=args.alpha,
            k_quad=options.k_quad, workers=threads,
        )
        design_echo = {
            "scenario": scenario, "genes": args.G, "n": args.n, "m": 5,
            "replicates": args.reps, "seed": seed, "alpha": args.alpha,
            "quad_points": options.k_quad,
        }
    rep = report.as_dict()
    with open(args.out_prefix + "_report.json", "w") as fh:
        json.dump(rep, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(args.out_prefix + "_design.json", "w") as fh:
        json.dump(design_echo, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(args.out_prefix + "_report.tsv", "w") as fh:
        keys, vals = [], []
        for k, v in rep.items():
            if isinstance(v, dict):
                for k2, v2 in v.items():
                    keys.append(f"{k}_{k2}")
                    vals.append(format_float(v2))
            elif isinstance(v, (int, float)) and not isinstance(v, bool):
                keys.append(k)
                vals.append(format_float(v) if isinstance(v, float) else str(v))
            elif isinstance(v, (str, bool)):
                keys.append(k)
                vals.append(str(v))
        fh.write("\t".join(keys) + "\n")
        fh.write("\t".join(vals) + "\n")
    return 0


def _cmd_pmf(args, options) -> int:
    _, _, _, data = _single_gene_dataset(args)
    fit = fit_gene_cascade(data, options)
    kmax = int(data.y.max())
    emp = np.bincount(data.y, minlength=kmax + 1) / data.n_obs
    fitted = np.zeros(kmax + 1)
    theta = fit.theta_hat
    eta = data.X @ theta.beta + data.offset
    if theta.ranef_var > 0:
        rule = gh_rule(options.k_quad)
        sigma = math.sqrt(theta.ranef_var)
        nodes = sigma * math.sqrt(2.0) * rule.nodes
        wts = rule.weights / math.sqrt(math.pi)
        for w, v in zip(wts, nodes):
            for e in eta:
                fitted += w * pt_pmf_vector(
                    PtParams(float(np.exp(e + v)), theta.dispersion, theta.power), kmax
                ) / data.n_obs
    else:
        for e in eta:
            fitted += pt_pmf_vector(
                PtParams(float(np.exp(e)), theta.dispersion, theta.power), kmax
            ) / data.n_obs
    with open(args.out, "w") as fh:
        fh.write("count\tempirical\tfitted\n")
        for k in range(kmax + 1):
            fh.write(f"{k}\t{format_float(emp[k])}\t{format_float(fitted[k])}\n")
    return 0 if fit.converged else 3


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        _load_config(argv, parser)
        args = parser.parse_args(argv)
        threads = args.threads if args.threads is not None else _default_threads()
        options = FitOptions(k_quad=args.quad_points)
        if args.command == "filter":
            return _cmd_filter(args)
        if args.command == "normalize":
            return _cmd_normalize(args)
        if args.command == "fit":
            return _cmd_fit(args, options)
        if args.command == "fit-all":
            return _cmd_fit_all(args, options, threads)
        if args.command == "test":
            return _cmd_test(args)
        if args.command == "simulate":
            return _cmd_simulate(args, options, threads, args.seed)
        if args.command == "pmf":
            return _cmd_pmf(args, options)
        parser.error(f"unknown command {args.command!r}")
    except (DataError, ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
