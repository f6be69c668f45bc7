"""Measurement instruments: V-statistics, Binder cumulants, convergence
distance, credible intervals, and the tilted-moment inequality checker.

Everything here is a pure function of its arguments; random noise (the
eta-regularization of the Binder correlations) comes from an explicit
seed, independent of model sampling.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, roots_genlaguerre, roots_jacobi

from .priors import simplex_nodes


@dataclass
class BinderReport:
    B: float
    num_runs: int
    sum_C2: float
    sum_C4: float
    num_skipped: int = 0


@dataclass
class CoverageReport:
    nominal: float
    actual: float
    intervals: list
    mean_width: float


def v_stat(A):
    """(1/sqrt(r)) ||A Pperp||_F where Pperp = I - J/k kills the 1_k direction."""
    A = np.asarray(A, dtype=float)
    r, k = A.shape
    if k < 2:
        raise ValueError("need at least two columns")
    centered = A - A.mean(axis=1, keepdims=True)
    return float(np.linalg.norm(centered) / np.sqrt(r))


def convergence_delta(W_prev, W_cur):
    """min over column permutations of the entrywise max-abs difference."""
    W_prev = np.asarray(W_prev, dtype=float)
    W_cur = np.asarray(W_cur, dtype=float)
    if W_prev.shape != W_cur.shape:
        raise ValueError("shape mismatch")
    k = W_prev.shape[1]
    if k > 5:
        raise ValueError("permutation search enumerates k! and is capped at k=5")
    best = np.inf
    for perm in itertools.permutations(range(k)):
        gap = np.max(np.abs(W_prev[:, perm] - W_cur))
        best = min(best, gap)
    return float(best)


def binder_k2(samples, eta=1e-4, seed=0):
    """Two-topic Binder cumulant from (H, Hhat) sample pairs.

    Per sample, C = <Hhat(e1 - e2) + eta g, H(e1 - e2)> with a fresh
    Gaussian g; the report carries B = 3/2 - E C^4 / (2 (E C^2)^2).
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    c2 = 0.0
    c4 = 0.0
    for H, Hhat in samples:
        if H.shape[1] != 2:
            raise ValueError("binder_k2 requires k=2")
        g = rng.normal(size=H.shape[0])
        hperp = H[:, 0] - H[:, 1]
        c = float((Hhat[:, 0] - Hhat[:, 1] + eta * g) @ hperp)
        c2 += c**2
        c4 += c**4
    n = len(samples)
    e2 = c2 / n
    B = 0.0 if e2 == 0.0 else 1.5 - (c4 / n) / (2.0 * e2**2)
    return BinderReport(B=float(B), num_runs=n, sum_C2=c2, sum_C4=c4)


def binder_general(samples, eta=1e-4, seed=0):
    """General-k Binder cumulant from normalized column correlations.

    C_ij = <(Hhat Pperp)_i + eta g, (H Pperp)_j> / (||.|| ||.||), one g per
    sample; R = E{sum C^4} / E{sum C^2}^2 and B = max(2 - 6R, 0), zeroed
    when E{sum C^2} <= 0.01. Samples with a zero-norm column are skipped.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    c2 = 0.0
    c4 = 0.0
    used = 0
    skipped = 0
    for H, Hhat in samples:
        g = rng.normal(size=H.shape[0])
        hp = H - H.mean(axis=1, keepdims=True)
        hhatp = Hhat - Hhat.mean(axis=1, keepdims=True) + eta * g[:, None]
        nh = np.linalg.norm(hp, axis=0)
        nhh = np.linalg.norm(hhatp, axis=0)
        if nh.min() == 0.0 or nhh.min() == 0.0:
            skipped += 1
            continue
        C = (hhatp.T @ hp) / np.outer(nhh, nh)
        c2 += float(np.sum(C**2))
        c4 += float(np.sum(C**4))
        used += 1
    if used == 0:
        return BinderReport(B=0.0, num_runs=0, sum_C2=0.0, sum_C4=0.0,
                            num_skipped=skipped)
    e2 = c2 / used
    e4 = c4 / used
    if e2 <= 0.01:
        B = 0.0
    else:
        B = max(2.0 - 6.0 * e4 / e2**2, 0.0)
    return BinderReport(B=float(B), num_runs=used, sum_C2=c2, sum_C4=c4,
                        num_skipped=skipped)


def binder_from_sums(sum_c2, sum_c4, num_runs):
    """Recombine per-replicate (sum C^2, sum C^4) aggregates into B."""
    if num_runs < 1:
        raise ValueError("no runs to aggregate")
    e2 = sum_c2 / num_runs
    e4 = sum_c4 / num_runs
    if e2 <= 0.01:
        return 0.0
    return float(max(2.0 - 6.0 * e4 / e2**2, 0.0))


_GRID_CELLS = 2000


def _marginal_log_density(mtilde_a, Qtilde, nu, k, t):
    """Log marginal density (up to a constant) of w_1 at grid points t."""
    if k == 2:
        w = np.column_stack([t, 1.0 - t])
        quad_form = np.einsum("ci,ij,cj->c", w, Qtilde, w)
        return w @ mtilde_a - 0.5 * quad_form + (nu - 1.0) * (
            np.log(t) + np.log1p(-t)
        )
    if k == 3:
        # Inner integral over w_2 = (1-t) s with the Beta(nu, nu) weight
        # absorbed into a Gauss-Jacobi rule.
        x, wt = roots_jacobi(128, nu - 1.0, nu - 1.0)
        s = 0.5 * (x + 1.0)
        out = np.empty(t.size)
        for c, tc in enumerate(t):
            rem = 1.0 - tc
            w = np.column_stack([np.full(s.size, tc), rem * s, rem * (1.0 - s)])
            expo = w @ mtilde_a - 0.5 * np.einsum("ci,ij,cj->c", w, Qtilde, w)
            top = expo.max()
            inner = float(wt @ np.exp(expo - top))
            out[c] = (
                top
                + np.log(inner)
                + (nu - 1.0) * np.log(tc)
                + (2.0 * nu - 1.0) * np.log(rem)
            )
        return out
    raise ValueError("marginal density implemented for k in {2, 3}")


def credible_interval_w1(mtilde_a, Qtilde, params, alpha, quad):
    """Highest-density credible interval for w_{a,1} at level 1 - alpha.

    The marginal density is tabulated on 2000 uniform cells of [0,1];
    cells are accumulated by decreasing mass until they hold 1 - alpha,
    and the smallest interval enclosing them is returned along with the
    marginal mean. A flat marginal (zero tilt at nu=1) ties everywhere;
    the centered interval [alpha/2, 1 - alpha/2] is returned then.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    mtilde_a = np.asarray(mtilde_a, dtype=float)
    t = (np.arange(_GRID_CELLS) + 0.5) / _GRID_CELLS
    logf = _marginal_log_density(mtilde_a, Qtilde, params.nu, params.k, t)
    p = np.exp(logf - logf.max())
    p /= p.sum()
    mean = float(p @ t)
    if p.max() - p.min() < 1e-12 * p.max():
        return alpha / 2.0, 1.0 - alpha / 2.0, mean
    order = np.argsort(p)[::-1]
    csum = np.cumsum(p[order])
    take = int(np.searchsorted(csum, 1.0 - alpha)) + 1
    chosen = order[:take]
    h = 1.0 / _GRID_CELLS
    lo = max(t[chosen.min()] - 0.5 * h, 0.0)
    hi = min(t[chosen.max()] + 0.5 * h, 1.0)
    return float(lo), float(hi), mean


def conjecture_check(q, nu, k, quad, reference="dirichlet"):
    """Check sigma(q) gamma(q) <= 2/q for S = ||w||^2 under the exp(-q S) tilt.

    reference "dirichlet" uses the Dir(nu; k) prior; "gaussian" replaces it
    with the flat-tilt Gaussian for which the product equals 2/q exactly
    (S is then Gamma(k/2, 1/q) distributed), integrated by Gauss-Laguerre
    as a validation of the moment pipeline.
    """
    if not q > 0:
        raise ValueError("q must be positive")
    if reference == "gaussian":
        u, wt = roots_genlaguerre(256, k / 2.0 - 1.0)
        S = u / q
        p = wt / wt.sum()
    elif reference == "dirichlet":
        nodes, logw = simplex_nodes(k, nu, quad)
        S = np.einsum("mi,mi->m", nodes, nodes)
        logp = logw - q * S
        p = np.exp(logp - logp.max())
        p /= p.sum()
    else:
        raise ValueError(f"unknown reference {reference!r}")
    m1 = float(p @ S)
    dev = S - m1
    var = float(p @ dev**2)
    third = float(p @ dev**3)
    sigma = np.sqrt(var)
    gamma = third / sigma**3
    product = sigma * gamma
    bound = 2.0 / q
    return product, bound, bool(product <= bound + 1e-12)
