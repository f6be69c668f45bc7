"""Sign-synchronization warm-up: naive mean field on the two-point
model, its TAP correction, Hessian spectra, and coverage bookkeeping.

The data matrix enters only through X with its diagonal zeroed; all
routines use the identity X0 v = X v - diag(X) v so the matrix is never
copied. Free energies are in nats.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

logger = logging.getLogger(__name__)

_DENSE_CUTOFF = 600


def _mvec(m):
    arr = np.asarray(m.m if isinstance(m, Z2State) else m, dtype=float)
    if arr.ndim != 1:
        raise ValueError("m must be a vector")
    if np.max(np.abs(arr)) >= 1.0:
        raise ValueError("mean parameters must lie in (-1, 1)")
    return arr


@dataclass
class Z2State:
    """Mean parameters of the product measure, one per vertex."""

    m: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        if self.m.ndim != 1 or np.max(np.abs(self.m)) >= 1.0:
            raise ValueError("mean parameters must lie in (-1, 1)")


def _binary_entropy(m):
    p = 0.5 * (1.0 + m)
    q = 0.5 * (1.0 - m)
    # xlogx with the 0 log 0 = 0 convention; |m| < 1 keeps us off it
    return -(p * np.log(p) + q * np.log(q))


def z2_nmf_free_energy(m, inst):
    """-lambda/2 <m, X0 m> - sum_i h(m_i)."""
    m = _mvec(m)
    xm = inst.X @ m - np.diag(inst.X) * m
    return float(-0.5 * inst.lam * (m @ xm) - _binary_entropy(m).sum())


def z2_nmf_gradient(m, inst):
    """-lambda X0 m + atanh(m), entrywise."""
    m = _mvec(m)
    xm = inst.X @ m - np.diag(inst.X) * m
    return -inst.lam * xm + np.arctanh(m)


def z2_tap_free_energy(m, inst):
    """Naive free energy with the Onsager term -n lambda^2/4 (1-Q)^2."""
    m = _mvec(m)
    n = m.size
    Q = float(m @ m) / n
    return (z2_nmf_free_energy(m, inst)
            - n * inst.lam**2 / 4.0 * (1.0 - Q) ** 2)


def z2_tap_gradient(m, inst):
    m = _mvec(m)
    Q = float(m @ m) / m.size
    return z2_nmf_gradient(m, inst) + inst.lam**2 * (1.0 - Q) * m


def z2_nmf_step(m, inst):
    """Synchronous update m <- tanh(lambda X0 m)."""
    m = _mvec(m)
    xm = inst.X @ m - np.diag(inst.X) * m
    return Z2State(m=np.tanh(inst.lam * xm))


def run_z2_nmf(inst, iters=200, init_scale=0.01, seed=0, tol=1e-8):
    """Iterate the synchronous update from a small uniform start until
    the iterate movement stalls. Returns (state, steps_taken)."""
    n = inst.X.shape[0]
    rng = np.random.default_rng(seed)
    m = rng.uniform(-init_scale, init_scale, size=n)
    for t in range(iters):
        nxt = z2_nmf_step(m, inst).m
        moved = np.max(np.abs(nxt - m))
        m = nxt
        if moved < tol:
            return Z2State(m=m), t + 1
    return Z2State(m=m), iters


def z2_hessian_min_eig(m, inst, tap=False):
    """Smallest eigenvalue of the analytic Hessian at m.

    Naive: -lambda X0 + diag(1/(1 - m_i^2)). The TAP correction adds
    lambda^2 (1-Q) I - (2 lambda^2 / n) m m^T. Small problems are solved
    densely; larger ones by Lanczos with a dense fallback.
    """
    m = _mvec(m)
    n = m.size
    lam = inst.lam
    d = np.diag(inst.X)
    base = 1.0 / (1.0 - m**2)
    Q = float(m @ m) / n
    if tap:
        base = base + lam**2 * (1.0 - Q)

    def matvec(v):
        v = np.asarray(v).ravel()
        out = -lam * (inst.X @ v - d * v) + base * v
        if tap:
            out = out - (2.0 * lam**2 / n) * m * float(m @ v)
        return out

    if n <= _DENSE_CUTOFF:
        return _dense_min_eig(m, inst, tap, base)
    op = LinearOperator((n, n), matvec=matvec, dtype=float)
    try:
        vals = eigsh(op, k=1, which="SA", tol=1e-6, maxiter=5000,
                     return_eigenvectors=False)
        return float(vals[0])
    except ArpackNoConvergence:
        logger.warning("Lanczos failed to converge at n=%d; "
                       "falling back to a dense solve", n)
        return _dense_min_eig(m, inst, tap, base)


def _dense_min_eig(m, inst, tap, base):
    n = m.size
    H = -inst.lam * inst.X
    np.fill_diagonal(H, 0.0)
    H[np.diag_indices(n)] += base
    if tap:
        H -= (2.0 * inst.lam**2 / n) * np.outer(m, m)
    return float(np.linalg.eigvalsh(H)[0])


def z2_coverage(m, sigma):
    """(actual, claimed) sign-recovery fractions.

    actual counts sign matches against sigma with zeros worth one half;
    claimed is the average posterior confidence (1 + |m_i|)/2.
    """
    m = np.asarray(m.m if isinstance(m, Z2State) else m, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if m.shape != sigma.shape:
        raise ValueError("length mismatch")
    s = np.sign(m)
    actual = float(np.mean(np.where(s == 0.0, 0.5, (s == sigma).astype(float))))
    claimed = float(np.mean(0.5 * (1.0 + np.abs(m))))
    return actual, claimed
