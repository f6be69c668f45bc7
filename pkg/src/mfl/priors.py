"""Moment and log-partition functions of the tilted priors.

Gaussian side: closed forms. Dirichlet side: quadrature over the
(k-1)-simplex, parametrized by stick-breaking so that the Dir(nu)
density's endpoint singularities (nu < 1) are absorbed exactly into
Gauss-Jacobi weights. For k >= 4 a Monte Carlo rule over Dirichlet
draws replaces the tensor grid.

Conventions: quadratic tilts always enter as exp(-<w, Q w>/2). Public
moments carry the sqrt(beta) / beta scalings; the internal raw helpers
do not.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln, roots_jacobi

from ._kernels import tilted_batch


class QuadratureError(ValueError):
    """Raised when a quadrature rule cannot meet its target tolerance."""


@dataclass(frozen=True)
class QuadratureSpec:
    """How to integrate over the simplex.

    scheme "grid" uses `nodes` Gauss-Jacobi points per simplex dimension;
    "monte_carlo" uses `nodes` Dirichlet draws (fixed internal seed, so
    results are deterministic). `tolerance` is the target relative error
    checked by dir_moments' refinement step.
    """

    scheme: str = "grid"
    nodes: int = 512
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.scheme not in ("grid", "monte_carlo"):
            raise ValueError(f"unknown quadrature scheme {self.scheme!r}")
        if self.scheme == "grid" and self.nodes < 64:
            raise ValueError("grid scheme needs at least 64 nodes per dimension")
        if self.scheme == "monte_carlo" and self.nodes < 10_000:
            raise ValueError("monte_carlo scheme needs at least 10^4 samples")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")

    @classmethod
    def default(cls, k):
        """Sensible rule per number of topics: dense grid for k=2, a
        coarser grid for k=3, Monte Carlo beyond."""
        if k == 2:
            return cls("grid", 512, 1e-8)
        if k == 3:
            return cls("grid", 96, 1e-6)
        return cls("monte_carlo", 100_000, 1e-2)


@dataclass
class TiltedDirichletMoments:
    """First moment (times sqrt(beta)), second moment (times beta), and
    log-partition of an exponentially tilted Dirichlet."""

    mean: np.ndarray
    second: np.ndarray
    log_partition: float


@lru_cache(maxsize=32)
def _rule(k, nu, scheme, nodes):
    """Cached (nodes, logw) quadrature rule for Dir(nu; k).

    Grid scheme: stick-breaking w_i = s_i * prod_{j<i}(1 - s_j). In these
    coordinates the Dirichlet density times the Jacobian factorizes into
    independent Beta(nu, (k-i)nu) weights, one per level, so Gauss-Jacobi
    rules integrate the nu < 1 singularities exactly. Log-weights include
    the Dirichlet normalizer, hence sum_m exp(logw_m) = 1 up to rule
    exactness. Callers must treat the returned arrays as read-only.
    """
    if scheme == "monte_carlo":
        rng = np.random.default_rng(0)
        w = rng.dirichlet(np.full(k, nu), size=nodes)
        logw = np.full(nodes, -np.log(nodes))
        return w, logw
    axes = []
    for i in range(1, k):
        b = (k - i) * nu
        x, wt = roots_jacobi(nodes, b - 1.0, nu - 1.0)
        x01 = 0.5 * (x + 1.0)
        logwt = np.log(wt) - (nu + b - 1.0) * np.log(2.0)
        axes.append((x01, logwt))
    mesh = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    logmesh = np.meshgrid(*[a[1] for a in axes], indexing="ij")
    sticks = [g.ravel() for g in mesh]
    logw = sum(lw.ravel() for lw in logmesh)
    m = sticks[0].size
    w = np.empty((m, k))
    rem = np.ones(m)
    for i in range(k - 1):
        w[:, i] = sticks[i] * rem
        rem = rem * (1.0 - sticks[i])
    w[:, k - 1] = rem
    logw = logw + gammaln(k * nu) - k * gammaln(nu)
    return w, logw


def simplex_nodes(k, nu, quad):
    """Quadrature nodes (M, k) and log-weights (M,) for Dir(nu; k)."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if not nu > 0:
        raise ValueError("nu must be positive")
    nodes, logw = _rule(k, float(nu), quad.scheme, quad.nodes)
    return nodes.copy(), logw.copy()


def gauss_mean(y, Q, beta):
    """sqrt(beta) (I + Q)^{-1} y, the tilted-Gaussian first moment."""
    y = np.asarray(y, dtype=float)
    a = np.eye(y.shape[0]) + Q
    return np.sqrt(beta) * np.linalg.solve(a, y)


def gauss_second(y, Q, beta):
    """beta {(I+Q)^{-1} y y^T (I+Q)^{-1} + (I+Q)^{-1}}."""
    y = np.asarray(y, dtype=float)
    a = np.eye(y.shape[0]) + Q
    ay = np.linalg.solve(a, y)
    return beta * (np.outer(ay, ay) + np.linalg.inv(a))


def gauss_log_partition(m, Q):
    """-1/2 tr log(I+Q) + 1/2 <m, (I+Q)^{-1} m>.

    Raises scipy's LinAlgError when I+Q is not positive definite.
    """
    m = np.asarray(m, dtype=float)
    a = np.eye(m.shape[0]) + Q
    cf = cho_factor(a, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return -0.5 * logdet + 0.5 * float(m @ cho_solve(cf, m))


def _moments_at(ytilde, Qtilde, nu, scheme, n):
    k = ytilde.shape[0]
    nodes, logw = _rule(k, float(nu), scheme, n)
    logz, mean, second = tilted_batch(ytilde[None, :], nodes, logw, Qtilde)
    return float(logz[0]), mean[0], second[0]


def dir_moments(ytilde, Qtilde, beta, nu, quad):
    """Tilted-Dirichlet moments by quadrature, with an error estimate.

    The result at the requested rule is compared against a coarser rule
    (half the nodes); if the difference exceeds quad.tolerance the rule
    is refined once (doubled), and a QuadratureError carrying the
    achieved error is raised if that still is not enough.
    """
    ytilde = np.asarray(ytilde, dtype=float)
    Qtilde = np.asarray(Qtilde, dtype=float)
    if not (np.all(np.isfinite(ytilde)) and np.all(np.isfinite(Qtilde))):
        raise ValueError("non-finite tilt rejected")
    if ytilde.shape[0] < 2:
        raise ValueError("k must be at least 2")
    if not nu > 0:
        raise ValueError("nu must be positive")
    if beta < 0:
        raise ValueError("beta must be nonnegative")

    n = quad.nodes
    logz, mean, second = _moments_at(ytilde, Qtilde, nu, quad.scheme, n)
    coarse = _moments_at(ytilde, Qtilde, nu, quad.scheme, max(n // 2, 64))
    err = _moment_gap((logz, mean, second), coarse)
    if err > quad.tolerance:
        fine = _moments_at(ytilde, Qtilde, nu, quad.scheme, 2 * n)
        err = _moment_gap(fine, (logz, mean, second))
        logz, mean, second = fine
        if err > quad.tolerance:
            raise QuadratureError(
                f"achieved error {err:.3e} exceeds tolerance {quad.tolerance:.1e} "
                f"after refinement to {2 * n} nodes"
            )
    return TiltedDirichletMoments(
        mean=np.sqrt(beta) * mean,
        second=beta * second,
        log_partition=logz,
    )


def _moment_gap(a, b):
    dz = abs(a[0] - b[0]) / (1.0 + abs(a[0]))
    dm = np.max(np.abs(a[1] - b[1]))
    ds = np.max(np.abs(a[2] - b[2]))
    return max(dz, dm, ds)


def e_func(q, nu, k, quad):
    """E(q; nu): second moment of w_1 under the exp(-q ||w||^2 / 2) tilt.

    Decreases from (nu+1)/(k(k nu + 1)) at q=0 toward 1/k^2 as the tilt
    concentrates mass at the barycenter.
    """
    if q < 0:
        raise ValueError("q must be nonnegative")
    nodes, logw = _rule(k, float(nu), quad.scheme, quad.nodes)
    _, _, second = tilted_batch(
        np.zeros((1, k)), nodes, logw, q * np.eye(k)
    )
    return float(second[0, 0, 0])
