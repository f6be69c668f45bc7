"""Command-line front end.

One subcommand per experiment family. Exit codes: 0 on success, 1 for
usage problems (bad flags, bad config keys, invalid parameter values),
2 for numerical failures (quadrature breakdown, moment inversion,
threshold searches that leave their bracket), 3 for I/O errors.

Single-run trajectory subcommands (nmf, amp, se) write plain CSV to
--out or stdout; sweep subcommands delegate to the harness and print
the path of the aggregate file they produced. JSON goes to --out or
stdout, pretty-printed with sorted keys.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import harness
from .diagnostics import conjecture_check
from .meanfield import NmfConfig, beta_inst, run_nmf
from .model import (ModelParams, sample_lda, sample_z2, save_dataset,
                    save_x_csv)
from .priors import QuadratureError, QuadratureSpec
from .state_evolution import (ThresholdNotFound, beta_bayes, beta_spect,
                              run_se)
from .tap_amp import AmpConfig, MomentInversionError, run_amp
from .z2sync import run_z2_nmf, z2_coverage, z2_hessian_min_eig

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


def _floats(text):
    return [float(part) for part in text.split(",") if part.strip()]


def _ints(text):
    return [int(part) for part in text.split(",") if part.strip()]


def _threads(args):
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("MFL_THREADS", "1"))


def _emit_json(payload, out):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out is None:
        print(text)
    else:
        Path(out).write_text(text + "\n")


def _emit_csv(columns, rows, out):
    if out is None:
        writer = csv.DictWriter(sys.stdout, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    else:
        with open(out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)


def _single_run_setup(args):
    params = ModelParams.from_delta(args.k, args.d, args.delta, args.beta,
                                    args.nu)
    seed = args.seed if args.seed is not None else 0
    dataset = sample_lda(params, seed)
    init_seed = harness.replicate_seed(seed, 0, 0, 0, "init")
    return params, dataset, init_seed


def cmd_gen(args):
    if args.out is None:
        raise UsageError("gen requires --out")
    params = ModelParams.from_delta(args.k, args.d, args.delta, args.beta,
                                    args.nu)
    dataset = sample_lda(params, args.seed if args.seed is not None else 0)
    if str(args.out).endswith(".csv"):
        save_x_csv(dataset.X, args.out)
    else:
        save_dataset(dataset, args.out)
    return 0


def cmd_nmf(args):
    params, dataset, init_seed = _single_run_setup(args)
    cfg = NmfConfig(max_iters=args.max_iters, quad=_quad(args, params.k),
                    seed=init_seed)
    _, iters, converged, traj = run_nmf(dataset.X, params, cfg)
    columns = ["iter", "free_energy", "delta_t", "V_W", "V_H"]
    _emit_csv(columns, [{c: rec[c] for c in columns} for rec in traj],
              args.out)
    logger.info("nmf: %d iterations, converged=%s", iters, converged)
    return 0


def cmd_amp(args):
    params, dataset, init_seed = _single_run_setup(args)
    cfg = AmpConfig(gamma=args.gamma, max_iters=args.max_iters,
                    record_free_energy=args.free_energy,
                    quad=_quad(args, params.k), seed=init_seed)
    _, iters, converged, traj = run_amp(dataset.X, params, cfg)
    columns = ["iter", "V_W", "V_H", "delta_t", "tr_Q", "tr_Qtilde"]
    if args.free_energy:
        columns.insert(1, "tap_free_energy")
    _emit_csv(columns, [{c: rec[c] for c in columns} for rec in traj],
              args.out)
    logger.info("amp: %d iterations, converged=%s", iters, converged)
    return 0


def cmd_se(args):
    # The recursion depends on (k, delta, beta, nu) only; a large
    # denominator keeps n/d at the requested ratio.
    params = ModelParams.from_delta(args.k, 1_000_000, args.delta,
                                    args.beta, args.nu)
    seed = args.seed if args.seed is not None else 0
    states = run_se(params, _quad(args, args.k), args.mc, seed,
                    args.iters, init=args.init)
    k = args.k
    columns = (["iter"]
               + [f"M_{i + 1}{j + 1}" for i in range(k) for j in range(k)]
               + [f"Mtilde_{i + 1}{j + 1}" for i in range(k)
                  for j in range(k)])
    rows = []
    for t, st in enumerate(states, start=1):
        row = {"iter": t}
        for i in range(k):
            for j in range(k):
                row[f"M_{i + 1}{j + 1}"] = st.M[i, j]
                row[f"Mtilde_{i + 1}{j + 1}"] = st.Mtilde[i, j]
        rows.append(row)
    _emit_csv(columns, rows, args.out)
    return 0


def cmd_thresholds(args):
    seed = args.seed if args.seed is not None else 0
    if len(args.k) == 1 and len(args.delta) == 1:
        k, delta = args.k[0], args.delta[0]
        quad = _quad(args, k)
        payload = {
            "beta_spect": beta_spect(k, delta, args.nu),
            "beta_inst": beta_inst(k, delta, args.nu, quad),
            "beta_bayes": beta_bayes(k, delta, args.nu, quad, args.mc,
                                     seed=seed),
        }
    else:
        payload = [asdict(rec) for rec in harness.threshold_rows(
            args.k, args.delta, args.nu, mc_samples=args.mc, seed=seed)]
    _emit_json(payload, args.out)
    return 0


def _experiment_config(args, need_gamma=False):
    values = {}
    if args.config is not None:
        values.update(harness.load_config(args.config))
    overrides = {
        "algorithm": getattr(args, "algorithm", None),
        "k": args.k, "d": args.d, "nu": args.nu,
        "delta_grid": args.delta_grid, "beta_grid": args.beta_grid,
        "replicates": args.replicates, "base_seed": args.seed,
        "output_dir": str(args.out) if args.out is not None else None,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if need_gamma and getattr(args, "gamma", None) is not None:
        values.setdefault("amp_cfg", {})["gamma"] = args.gamma
    known = {f.name for f in fields(harness.ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if isinstance(values.get("quad"), dict):
        values["quad"] = QuadratureSpec(**values["quad"])
    elif values.get("quad") is None and args.quad_nodes is not None:
        values["quad"] = replace(QuadratureSpec.default(values.get("k", 2)),
                                 nodes=args.quad_nodes)
    for key in ("delta_grid", "beta_grid"):
        if key in values and not isinstance(values[key], list):
            values[key] = [values[key]]
    return harness.ExperimentConfig(**values)


def cmd_phase_diagram(args):
    cfg = _experiment_config(args, need_gamma=True)
    path = harness.run_phase_diagram(cfg, threads=_threads(args))
    print(path)
    return 0


def cmd_coverage(args):
    cfg = _experiment_config(args)
    path = harness.run_coverage(cfg, args.alpha, threads=_threads(args))
    print(path)
    return 0


def cmd_binder(args):
    records = harness.binder_json_from_runs(args.runs)
    _emit_json(records, args.out)
    return 0


def cmd_z2(args):
    seed = args.seed if args.seed is not None else 0
    inst = sample_z2(args.n, args.lam, seed)
    state, _ = run_z2_nmf(inst,
                          seed=harness.replicate_seed(seed, 0, 0, 0, "init"))
    actual, claimed = z2_coverage(state, inst.sigma)
    origin = np.zeros(args.n)
    payload = {
        "lambda": args.lam,
        "n": args.n,
        "seed": seed,
        "norm_sq_over_n": float(state.m @ state.m) / args.n,
        "min_eig_naive": z2_hessian_min_eig(origin, inst, tap=False),
        "min_eig_tap": (z2_hessian_min_eig(origin, inst, tap=True)
                        if args.tap else None),
        "coverage_actual": actual,
        "coverage_claimed": claimed,
    }
    _emit_json(payload, args.out)
    return 0


def cmd_conjecture(args):
    quad = _quad(args, args.k)
    rows = []
    for q in args.q:
        product, bound, holds = conjecture_check(q, args.nu, args.k, quad)
        rows.append({"q": q, "sigma_gamma": product, "bound": bound,
                     "holds": holds})
    _emit_json(rows, args.out)
    return 0


def _quad(args, k):
    spec = QuadratureSpec.default(k)
    nodes = getattr(args, "quad_nodes", None)
    if nodes is not None:
        spec = replace(spec, nodes=nodes)
    return spec


def _add_model_flags(sub):
    sub.add_argument("--k", type=int, default=2)
    sub.add_argument("--d", type=int, default=400)
    sub.add_argument("--delta", type=float, default=1.0)
    sub.add_argument("--beta", type=float, required=True)
    sub.add_argument("--nu", type=float, default=1.0)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path,
                        help="experiment config file (key=value or JSON)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None,
                        help="worker count (default: MFL_THREADS or 1)")
    common.add_argument("--out", type=Path, default=None)
    common.add_argument("--quad-nodes", type=int, default=None,
                        help="override the per-dimension quadrature size")

    parser = argparse.ArgumentParser(
        prog="mfl", description="Mean-field and message-passing inference "
        "for the Gaussian-topic model.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen", parents=[common],
                        help="sample a dataset (.csv triplets or binary)")
    _add_model_flags(p)
    p.set_defaults(func=cmd_gen)

    p = subs.add_parser("nmf", parents=[common],
                        help="single mean-field run; trajectory CSV")
    _add_model_flags(p)
    p.add_argument("--max-iters", type=int, default=300)
    p.set_defaults(func=cmd_nmf)

    p = subs.add_parser("amp", parents=[common],
                        help="single message-passing run; trajectory CSV")
    _add_model_flags(p)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--gamma", type=float, default=0.8)
    p.add_argument("--free-energy", action="store_true",
                   help="record the TAP free energy each iteration")
    p.set_defaults(func=cmd_amp)

    p = subs.add_parser("se", parents=[common],
                        help="state-evolution recursion; overlap CSV")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--nu", type=float, default=1.0)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--init", choices=["zero", "uninformative",
                                      "informative"],
                   default="uninformative")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--mc", type=int, default=100_000)
    p.set_defaults(func=cmd_se)

    p = subs.add_parser("thresholds", parents=[common],
                        help="beta_spect / beta_inst / beta_bayes as JSON")
    p.add_argument("--k", type=_ints, default=[2])
    p.add_argument("--delta", type=_floats, default=[1.0])
    p.add_argument("--nu", type=float, default=1.0)
    p.add_argument("--mc", type=int, default=100_000)
    p.set_defaults(func=cmd_thresholds)

    for name, fn in (("phase-diagram", cmd_phase_diagram),
                     ("coverage", cmd_coverage)):
        p = subs.add_parser(name, parents=[common],
                            help=f"{name} sweep over a (delta, beta) grid")
        p.add_argument("--algorithm", choices=["nmf", "amp"])
        p.add_argument("--k", type=int)
        p.add_argument("--d", type=int)
        p.add_argument("--nu", type=float)
        p.add_argument("--delta-grid", type=_floats)
        p.add_argument("--beta-grid", type=_floats)
        p.add_argument("--replicates", type=int)
        if name == "phase-diagram":
            p.add_argument("--gamma", type=float,
                           help="damping override for amp sweeps")
        else:
            p.add_argument("--alpha", type=float, default=0.1)
        p.set_defaults(func=fn)

    p = subs.add_parser("binder", parents=[common],
                        help="fold a per-run CSV into Binder cumulants")
    p.add_argument("--runs", type=Path, required=True)
    p.set_defaults(func=cmd_binder)

    p = subs.add_parser("z2", parents=[common],
                        help="synchronization warm-up diagnostics")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--tap", action="store_true",
                   help="also report the corrected Hessian eigenvalue "
                        "(reported as null otherwise)")
    p.set_defaults(func=cmd_z2)

    p = subs.add_parser("conjecture", parents=[common],
                        help="tilted-moment inequality check")
    p.add_argument("--q", type=_floats, required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--nu", type=float, default=1.0)
    p.set_defaults(func=cmd_conjecture)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mfl: error: {exc}", file=sys.stderr)
        return 1
    except QuadratureError as exc:
        print(f"mfl: numerical error: {exc}", file=sys.stderr)
        return 2
    except (MomentInversionError, ThresholdNotFound, RuntimeError,
            ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"mfl: numerical error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        print(f"mfl: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mfl: i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
