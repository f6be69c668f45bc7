"""Batched tilted-moment kernels with optional numba acceleration.

The one hot loop in this package: given R tilt vectors y_r and a fixed
quadrature rule (nodes n_m with log-weights logw_m) on the simplex,
compute for every row the log-normalizer, mean and second moment of the
density proportional to exp(<y_r, w> - <w, Qt w>/2) against the rule.

Two implementations are kept in lockstep: a serial numba kernel (low
per-call overhead, wins on small batches) and a chunked numpy path that
rides BLAS matmuls and vectorized exp (wins on large R x M products).
The environment variable MFL_BACKEND selects one: "numba", "numpy", or
"auto" (the default, which routes on batch size). set_backend() forces
a choice programmatically, overriding the environment; tests use it to
pin both paths against each other.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return wrap


_FORCED = None

# Batches with R*M at or below this many node evaluations go to numba in
# auto mode; larger ones go to the chunked numpy path. The numpy path
# wins from a few hundred rows up on every machine tried; below that the
# two are within tens of microseconds of each other, so the exact value
# barely matters. See benchmarks/bench_kernels.py for the measurement.
_AUTO_NUMBA_CUTOFF = 1 << 12


def set_backend(name):
    """Force a backend ("numba", "numpy", "auto"), or None to re-read the env."""
    global _FORCED
    if name not in (None, "auto", "numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _FORCED = name


def backend_mode():
    """Resolve the current backend mode ("auto", "numba" or "numpy")."""
    mode = _FORCED if _FORCED is not None else os.environ.get("MFL_BACKEND", "auto")
    if mode not in ("auto", "numba", "numpy"):
        raise ValueError(f"MFL_BACKEND must be auto, numba or numpy, got {mode!r}")
    if mode == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return mode


@njit(cache=True)
def _tilted_rows_numba(Y, nodes, c, logz, mean, second):
    R, k = Y.shape
    M = nodes.shape[0]
    t = np.empty(M)
    for r in range(R):
        tmax = -np.inf
        for m in range(M):
            s = c[m]
            for i in range(k):
                s += Y[r, i] * nodes[m, i]
            t[m] = s
            if s > tmax:
                tmax = s
        for i in range(k):
            mean[r, i] = 0.0
            for j in range(k):
                second[r, i, j] = 0.0
        z = 0.0
        for m in range(M):
            p = np.exp(t[m] - tmax)
            z += p
            for i in range(k):
                pni = p * nodes[m, i]
                mean[r, i] += pni
                for j in range(k):
                    second[r, i, j] += pni * nodes[m, j]
        logz[r] = np.log(z) + tmax
        inv = 1.0 / z
        for i in range(k):
            mean[r, i] *= inv
            for j in range(k):
                second[r, i, j] *= inv


def _tilted_rows_numpy(Y, nodes, c, logz, mean, second, chunk=512):
    M, k = nodes.shape
    pairs = (nodes[:, :, None] * nodes[:, None, :]).reshape(M, k * k)
    for lo in range(0, Y.shape[0], chunk):
        hi = min(lo + chunk, Y.shape[0])
        t = Y[lo:hi] @ nodes.T
        t += c
        tmax = t.max(axis=1)
        t -= tmax[:, None]
        np.exp(t, out=t)
        z = t.sum(axis=1)
        logz[lo:hi] = np.log(z) + tmax
        mean[lo:hi] = (t @ nodes) / z[:, None]
        second[lo:hi] = (t @ pairs).reshape(hi - lo, k, k) / z[:, None, None]


def tilted_batch(Y, nodes, logw, Qtilde):
    """Raw moments of exp(<y,w> - <w,Qt w>/2) rows against a fixed rule.

    Parameters
    ----------
    Y : (R, k) array of tilt vectors, one per row.
    nodes : (M, k) array of quadrature nodes on the simplex.
    logw : (M,) log-weights of the rule (including any reference density).
    Qtilde : (k, k) symmetric quadratic tilt, shared by all rows.

    Returns
    -------
    logz : (R,) log-normalizers relative to the rule's weights.
    mean : (R, k) raw first moments (no sqrt(beta) scaling).
    second : (R, k, k) raw second moments (no beta scaling).
    """
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    R = Y.shape[0]
    k = nodes.shape[1]
    c = logw - 0.5 * np.einsum("mi,ij,mj->m", nodes, Qtilde, nodes)
    logz = np.empty(R)
    mean = np.empty((R, k))
    second = np.empty((R, k, k))
    mode = backend_mode()
    if mode == "auto":
        small = R * nodes.shape[0] <= _AUTO_NUMBA_CUTOFF
        mode = "numba" if (HAS_NUMBA and small) else "numpy"
    if mode == "numba":
        _tilted_rows_numba(Y, nodes, c, logz, mean, second)
    else:
        _tilted_rows_numpy(Y, nodes, c, logz, mean, second)
    return logz, mean, second
