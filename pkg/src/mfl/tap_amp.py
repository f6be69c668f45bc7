"""TAP free energy and message passing for the topic model.

The iteration keeps the one-step memory term that distinguishes message
passing from plain mean-field sweeps: the weight-side update subtracts
F-tilde evaluated at the PREVIOUS weight parameters, times the current
topic-side Onsager matrix. The damped variant smooths both natural
parameters and accumulates the moment-map Jacobians geometrically; at
gamma = 1 it reduces to the undamped step exactly.

The TAP free energy is evaluated through partial Legendre transforms:
closed form on the Gaussian side, a damped Newton inversion of the
tilted-Dirichlet mean map on the weight side.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import null_space
from scipy.sparse.linalg import LinearOperator, eigsh

from ._kernels import tilted_batch
from .priors import QuadratureSpec, _rule

logger = logging.getLogger(__name__)

_DENSE_CUTOFF = 2000


class MomentInversionError(RuntimeError):
    """Raised when the weight-side mean map cannot be inverted."""


@dataclass
class AmpState:
    """Natural parameters, their moment images, and the memory terms.

    m, Q and mtilde, Qtilde are the current topic/weight blocks;
    mtilde_prev and qtilde_prev hold the weight parameters consumed by
    the last memory term, ftilde_prev the moment image F-tilde evaluated
    there (what the NEXT step's memory term needs). Omega and OmegaTilde
    are the Onsager matrices of the last step; KH and KW the damped
    Jacobian accumulators. r and rtilde are the estimates Hhat and What.
    """

    m: np.ndarray
    mtilde: np.ndarray
    Q: np.ndarray
    Qtilde: np.ndarray
    mtilde_prev: np.ndarray
    qtilde_prev: np.ndarray
    ftilde_prev: np.ndarray
    Omega: np.ndarray
    OmegaTilde: np.ndarray
    KH: np.ndarray
    KW: np.ndarray
    r: np.ndarray
    rtilde: np.ndarray


@dataclass
class AmpConfig:
    gamma: float = 0.8
    max_iters: int = 300
    min_iters: int = 40
    conv_threshold: float = 0.005
    init_epsilon: float = 0.01
    record_free_energy: bool = False
    quad: QuadratureSpec = field(default_factory=QuadratureSpec)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.conv_threshold <= 0:
            raise ValueError("conv_threshold must be positive")
        if self.min_iters > self.max_iters:
            raise ValueError("min_iters must not exceed max_iters")


def _weight_moments(mtilde, Qtilde, params, quad):
    nodes, logw = _rule(params.k, float(params.nu), quad.scheme, quad.nodes)
    return tilted_batch(mtilde, nodes, logw, Qtilde)


def tap_uninformative(params, X, quad=None):
    """The symmetric stationary state, in closed form.

    Q* = q0 J with q0 = beta delta / k^2, Qtilde* = qt0 J with qt0 read
    off the calibration identity, and the estimate pair is built from the
    data column sums. Every field, including the Onsager matrices and the
    Jacobian accumulators, is exact; no quadrature is needed (the
    argument is accepted for interface symmetry).
    """
    k, d, beta = params.k, params.d, params.beta
    n = X.shape[0]
    delta = params.delta
    sb = np.sqrt(beta)
    q0 = delta * beta / k**2
    scale = k + delta * beta  # equals k (1 + k q0)
    col = X.T @ np.ones(n)
    qt0 = beta**2 * float(col @ col) / (d * scale**2)
    ones_k = np.ones(k)
    r = sb / scale * np.outer(col, ones_k)
    m = sb / k * np.outer(col, ones_k)
    rtilde = np.full((n, k), 1.0 / k)
    ftilde = sb / k * np.ones((n, k))
    mtilde = beta / scale * np.outer(X @ col - np.ones(n), ones_k)
    Q = q0 * np.ones((k, k))
    Qtilde = qt0 * np.ones((k, k))
    omega = sb * (np.eye(k) - q0 / (1.0 + k * q0) * np.ones((k, k)))
    omega_tilde = (delta * sb / (k * (k * params.nu + 1.0))
                   * (np.eye(k) - np.ones((k, k)) / k))
    return AmpState(m=m, mtilde=mtilde, Q=Q, Qtilde=Qtilde,
                    mtilde_prev=mtilde.copy(), qtilde_prev=Qtilde.copy(),
                    ftilde_prev=ftilde, Omega=omega, OmegaTilde=omega_tilde,
                    KH=omega.copy(), KW=omega_tilde.copy(),
                    r=r, rtilde=rtilde)


def amp_step(state, X, params, quad):
    """One message-passing step with the exact time indexing.

    The weight update uses the CURRENT topic moments but the PREVIOUS
    F-tilde in its memory term; both quadratic tilts are then refreshed
    from the calibration sums, never damped.
    """
    k, d, beta = params.k, params.d, params.beta
    sb = np.sqrt(beta)
    inv = np.linalg.inv(np.eye(k) + state.Q)
    F = sb * state.m @ inv
    omega = sb * inv
    mtilde = X @ F - state.ftilde_prev @ omega
    Qtilde = F.T @ F / d
    Qtilde = 0.5 * (Qtilde + Qtilde.T)
    _, mean, second = _weight_moments(mtilde, Qtilde, params, quad)
    ftilde = sb * mean
    omega_tilde = sb / d * (second.sum(axis=0) - mean.T @ mean)
    omega_tilde = 0.5 * (omega_tilde + omega_tilde.T)
    m_next = X.T @ ftilde - F @ omega_tilde
    Q_next = ftilde.T @ ftilde / d
    Q_next = 0.5 * (Q_next + Q_next.T)
    r_next = np.linalg.solve(np.eye(k) + Q_next, m_next.T).T
    return AmpState(m=m_next, mtilde=mtilde, Q=Q_next, Qtilde=Qtilde,
                    mtilde_prev=state.mtilde, qtilde_prev=state.Qtilde,
                    ftilde_prev=ftilde, Omega=omega,
                    OmegaTilde=omega_tilde, KH=state.KH, KW=state.KW,
                    r=r_next, rtilde=mean)


def damped_amp_step(state, X, params, cfg):
    """Smoothed step: natural parameters relax with weight gamma and the
    Onsager terms use the geometric Jacobian accumulators (refreshed
    before use, so gamma = 1 recovers amp_step exactly). The quadratic
    tilts always come from the calibration sums."""
    k, d, beta = params.k, params.d, params.beta
    g = cfg.gamma
    sb = np.sqrt(beta)
    inv = np.linalg.inv(np.eye(k) + state.Q)
    F = sb * state.m @ inv
    omega = sb * inv
    KH = (1.0 - g) * state.KH + omega
    mtilde = ((1.0 - g) * state.mtilde + g * (X @ F)
              - g**2 * state.ftilde_prev @ KH)
    Qtilde = F.T @ F / d
    Qtilde = 0.5 * (Qtilde + Qtilde.T)
    _, mean, second = _weight_moments(mtilde, Qtilde, params, cfg.quad)
    ftilde = sb * mean
    omega_tilde = sb / d * (second.sum(axis=0) - mean.T @ mean)
    omega_tilde = 0.5 * (omega_tilde + omega_tilde.T)
    KW = (1.0 - g) * state.KW + omega_tilde
    m_next = ((1.0 - g) * state.m + g * (X.T @ ftilde) - g**2 * F @ KW)
    Q_next = ftilde.T @ ftilde / d
    Q_next = 0.5 * (Q_next + Q_next.T)
    r_next = np.linalg.solve(np.eye(k) + Q_next, m_next.T).T
    return AmpState(m=m_next, mtilde=mtilde, Q=Q_next, Qtilde=Qtilde,
                    mtilde_prev=state.mtilde, qtilde_prev=state.Qtilde,
                    ftilde_prev=ftilde, Omega=omega,
                    OmegaTilde=omega_tilde, KH=KH, KW=KW,
                    r=r_next, rtilde=mean)


def invert_weight_moments(rtilde, Qtilde, params, quad, tol=1e-8,
                          max_iters=100):
    """Tilt vectors whose mean map reproduces the given estimates.

    Damped Newton on the hyperplane <1, mtilde> = 0, initialized at the
    symmetric tilt; the Jacobian is the projected covariance, strictly
    positive definite for estimates inside the open simplex. Step halving
    guards rows where the full Newton step overshoots.
    """
    rtilde = np.asarray(rtilde, dtype=float)
    n, k = rtilde.shape
    bad = np.nonzero((np.abs(rtilde.sum(axis=1) - 1.0) > 1e-8)
                     | (rtilde.min(axis=1) <= 0.0))[0]
    if bad.size:
        raise ValueError(
            f"estimates outside the open simplex in rows {bad.tolist()}")
    nodes, logw = _rule(params.k, float(params.nu), quad.scheme, quad.nodes)
    U = null_space(np.ones((1, k)))

    def residual(theta):
        _, mean, second = tilted_batch(theta @ U.T, nodes, logw, Qtilde)
        res = (mean - rtilde) @ U
        cov = second - mean[:, :, None] * mean[:, None, :]
        jac = np.einsum("ur,nuv,vs->nrs", U, cov, U)
        return res, jac

    theta = np.zeros((n, k - 1))
    res, jac = residual(theta)
    rnorm = np.abs(res).max(axis=1)
    for _ in range(max_iters):
        if np.all(rnorm < tol):
            return theta @ U.T
        step = np.linalg.solve(jac, res[..., None])[..., 0]
        alpha = np.ones((n, 1))
        for _ in range(30):
            trial = theta - alpha * step
            tres, tjac = residual(trial)
            tnorm = np.abs(tres).max(axis=1)
            ok = (tnorm <= rnorm) | (rnorm < tol)
            if np.all(ok):
                break
            alpha[~ok] *= 0.5
        theta, res, jac, rnorm = trial, tres, tjac, tnorm
    bad = np.nonzero(rnorm >= tol)[0]
    raise MomentInversionError(
        f"mean-map inversion stalled in rows {bad.tolist()}")


def tap_free_energy(r, rtilde, X, params, quad):
    """TAP functional of the estimate pair.

    Both quadratic tilts are rebuilt from the estimates themselves, the
    Gaussian Legendre transform is closed form, and the weight side costs
    one mean-map inversion plus one quadrature pass. The value is
    invariant under shifting any weight tilt along 1_k, so the gauge
    chosen by the inversion is immaterial.
    """
    k, d, beta = params.k, params.d, params.beta
    r = np.asarray(r, dtype=float)
    rtilde = np.asarray(rtilde, dtype=float)
    Q = beta / d * (rtilde.T @ rtilde)
    Qt = beta / d * (r.T @ r)
    mtilde = invert_weight_moments(rtilde, Qt, params, quad)
    nodes, logw = _rule(params.k, float(params.nu), quad.scheme, quad.nodes)
    logz, _, _ = tilted_batch(mtilde, nodes, logw, Qt)
    psi_tilde = float(np.sum(mtilde * rtilde)) - float(logz.sum())
    a = np.eye(k) + Q
    _, logdet = np.linalg.slogdet(a)
    psi = 0.5 * float(np.sum((r @ a) * r)) + 0.5 * d * logdet
    overlap = rtilde @ r.T
    coupling = np.sqrt(beta) * float(np.sum(X * overlap))
    quartic = beta / (2.0 * d) * float(np.sum(overlap**2))
    return psi + psi_tilde - coupling - quartic


def tap_hessian_min_eig(params, X):
    """Smallest eigenvalue of the TAP curvature on the fluctuation
    subspace at the symmetric state.

    The block matrix is explicit in the data: diagonal blocks are scalar
    (topic side) and scalar-minus-rank-one (weight side), the off-
    diagonal block is sqrt(beta) X with its column means recentered.
    Dense solve up to 2000 total rows, Lanczos above.
    """
    k, beta, nu = params.k, params.beta, params.nu
    d = params.d
    n = X.shape[0]
    delta = params.delta
    a = 1.0 + delta * beta / (k * (k * nu + 1.0))
    row = beta + k * (k * nu + 1.0)
    cb = beta / (d * (k + delta * beta))
    cs = beta**2 / (d * (k + delta * beta))
    M = np.sqrt(beta) * X
    off = M - cb * np.outer(np.ones(n), M.sum(axis=0))
    if d + n <= _DENSE_CUTOFF:
        H = np.zeros((d + n, d + n))
        H[:d, :d] = a * np.eye(d)
        H[d:, d:] = row * np.eye(n) - cs
        H[:d, d:] = -off.T
        H[d:, :d] = -off
        return float(np.linalg.eigvalsh(H)[0])
    ones = np.ones(n)

    def mv(v):
        v1, v2 = v[:d], v[d:]
        top = a * v1 - off.T @ v2
        bot = -off @ v1 + row * v2 - cs * float(ones @ v2) * ones
        return np.concatenate([top, bot])

    op = LinearOperator((d + n, d + n), matvec=mv, dtype=float)
    val = eigsh(op, k=1, which="SA", return_eigenvectors=False)
    return float(val[0])


def bbp_singular_value(gamma, alpha_par, alpha_perp, delta):
    """Limiting top singular value of a spiked rectangular ensemble.

    Below the transition the edge of the bulk, alpha_perp (1 + sqrt
    delta); above it the detached value determined by (gamma, alpha_par,
    alpha_perp). The two branches meet continuously at gamma*^2.
    """
    if alpha_perp <= 0:
        raise ValueError("alpha_perp must be positive")
    g2 = gamma**2
    g_star2 = (1.0 + np.sqrt(delta)) * alpha_perp**2 - alpha_par**2
    if g2 > g_star2:
        t = g2 + alpha_par**2
        lam2 = (t * (t - alpha_perp**2 * (1.0 - delta))
                / (t - alpha_perp**2))
    else:
        lam2 = alpha_perp**2 * (1.0 + np.sqrt(delta)) ** 2
    return float(np.sqrt(lam2))


def run_amp(X, params, cfg):
    """Damped iteration from the perturbed symmetric start.

    Initialization mirrors the mean-field runner: Hhat* is nudged by a
    normalized Gaussian direction of relative size epsilon and m is
    recovered through the moment map. The Jacobian accumulators are
    rescaled by 1/gamma so that epsilon = 0 stays put.
    """
    from .diagnostics import convergence_delta, v_stat

    point = tap_uninformative(params, X, cfg.quad)
    rng = np.random.default_rng(cfg.seed)
    hstar = point.r
    eps = cfg.init_epsilon
    if eps > 0:
        G = rng.normal(size=hstar.shape)
        h0 = (1.0 - eps) * hstar + eps * (
            G / np.linalg.norm(G)) * np.linalg.norm(hstar)
    else:
        h0 = hstar
    m0 = h0 @ (np.eye(params.k) + point.Q)
    state = replace(point, m=m0, r=h0,
                    KH=point.KH / cfg.gamma, KW=point.KW / cfg.gamma)
    trajectory = []
    converged = False
    iterations = 0
    prev_w = state.rtilde
    for t in range(cfg.max_iters):
        state = damped_amp_step(state, X, params, cfg)
        iterations = t + 1
        delta_t = convergence_delta(prev_w, state.rtilde)
        prev_w = state.rtilde
        entry = {"iter": iterations}
        if cfg.record_free_energy:
            entry["tap_free_energy"] = tap_free_energy(
                state.r, state.rtilde, X, params, cfg.quad)
        entry.update({
            "V_W": v_stat(state.rtilde),
            "V_H": v_stat(state.r),
            "delta_t": delta_t,
            "tr_Q": float(np.trace(state.Q)),
            "tr_Qtilde": float(np.trace(state.Qtilde)),
        })
        trajectory.append(entry)
        if iterations >= cfg.min_iters and delta_t < cfg.conv_threshold:
            converged = True
            break
    return state, iterations, converged, trajectory
