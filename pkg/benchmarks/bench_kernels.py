#!/usr/bin/env python3
"""Timing comparison for the two tilted_batch backends.

tilted_batch (mfl._kernels) keeps a serial numba kernel and a chunked
numpy path in lockstep, and in auto mode routes on R*M, the number of
node evaluations per call. This script times both backends over the
batch shapes the package actually produces: coordinate updates evaluate
R = n document rows against the k=2 rule (M = 512 nodes) or the k=3
rule (M = 96^2 nodes), while state-evolution Monte Carlo pushes R into
the tens of thousands. The last column reports which backend auto mode
picks for that shape, so the printed table doubles as a check on the
_AUTO_NUMBA_CUTOFF constant.

Run: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from mfl import _kernels
from mfl.priors import QuadratureSpec, simplex_nodes


def build_case(k, rows, seed=0):
    """Representative inputs: moderate tilts against the default rule."""
    quad = QuadratureSpec.default(k)
    nodes, logw = simplex_nodes(k, 1.0, quad)
    rng = np.random.default_rng(seed)
    Y = 2.0 * rng.standard_normal((rows, k))
    A = 0.1 * rng.standard_normal((k, k))
    Qtilde = A @ A.T
    return Y, nodes, logw, Qtilde


def time_backend(name, Y, nodes, logw, Qtilde, repeats):
    """Best-of-N wall time per call, with one untimed warm-up call."""
    _kernels.set_backend(name)
    try:
        _kernels.tilted_batch(Y, nodes, logw, Qtilde)
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            _kernels.tilted_batch(Y, nodes, logw, Qtilde)
            best = min(best, time.perf_counter() - t0)
    finally:
        _kernels.set_backend(None)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed calls per case, best-of (default 5)")
    args = parser.parse_args()

    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    cases = [(2, r) for r in (4, 8, 32, 128, 512, 2048, 8192, 32768)]
    cases += [(3, r) for r in (32, 256, 2048)]

    header = f"{'k':>2} {'M':>6} {'R':>6} {'R*M':>10} " \
             f"{'numba ms':>10} {'numpy ms':>10} {'numpy/numba':>12} {'auto':>6}"
    print(header)
    print("-" * len(header))
    crossings = []
    for k, rows in cases:
        Y, nodes, logw, Qtilde = build_case(k, rows)
        t_nb = time_backend("numba", Y, nodes, logw, Qtilde, args.repeats)
        t_np = time_backend("numpy", Y, nodes, logw, Qtilde, args.repeats)
        work = rows * nodes.shape[0]
        auto = "numba" if work <= _kernels._AUTO_NUMBA_CUTOFF else "numpy"
        winner = "numba" if t_nb <= t_np else "numpy"
        crossings.append((work, winner))
        print(f"{k:>2} {nodes.shape[0]:>6} {rows:>6} {work:>10} "
              f"{t_nb * 1e3:>10.3f} {t_np * 1e3:>10.3f} "
              f"{t_np / t_nb:>12.2f} {auto:>6}")

    numba_wins = [w for w, name in crossings if name == "numba"]
    numpy_wins = [w for w, name in crossings if name == "numpy"]
    print()
    print(f"auto-mode cutoff: R*M <= {_kernels._AUTO_NUMBA_CUTOFF} goes to numba")
    if numba_wins and numpy_wins:
        print(f"measured crossover: numba still ahead at R*M = {max(numba_wins)}, "
              f"numpy ahead from R*M = {min(numpy_wins)}")
    elif numpy_wins:
        print("measured: numpy ahead on every case tried")
    else:
        print("measured: numba ahead on every case tried")


if __name__ == "__main__":
    main()
