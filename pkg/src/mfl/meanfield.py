"""Naive mean field: free energy, coordinate-ascent sweeps, the
symmetric stationary point, and the linear-instability criterion.

The variational family factorizes over topic columns and weight rows
with shared quadratic tilts Q (topic side) and Qtilde (weight side).
A sweep alternates two exact block minimizations, so the free energy is
non-increasing along trajectories; the uninformative stationary point
is built in closed form and everything downstream (the instability
constant L, the beta_inst scan, the Jacobian radius probe) hangs off
it.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from ._kernels import tilted_batch
from .priors import QuadratureSpec, _rule, e_func
from .state_evolution import ThresholdNotFound, beta_spect

logger = logging.getLogger(__name__)


@dataclass
class VariationalState:
    """Natural parameters of both factor blocks plus their moment images.

    m is d x k (topic side), mtilde n x k (weight side); Q and Qtilde are
    the shared k x k quadratic tilts. r and rtilde are the posterior-mean
    estimates Hhat and What, kept consistent with (m, Q) and
    (mtilde, Qtilde) by construction.
    """

    m: np.ndarray
    mtilde: np.ndarray
    Q: np.ndarray
    Qtilde: np.ndarray
    r: np.ndarray
    rtilde: np.ndarray


@dataclass
class NmfConfig:
    max_iters: int = 300
    min_iters: int = 40
    conv_threshold: float = 0.005
    init_epsilon: float = 0.01
    quad: QuadratureSpec = field(default_factory=QuadratureSpec)
    seed: int = 0

    def __post_init__(self):
        if self.conv_threshold <= 0:
            raise ValueError("conv_threshold must be positive")
        if self.min_iters > self.max_iters:
            raise ValueError("min_iters must not exceed max_iters")


@dataclass
class UninformativePoint:
    q1: float
    q2: float
    qt1: float
    qt2: float
    state: VariationalState


def _weight_moments(mtilde, Qtilde, params, quad):
    nodes, logw = _rule(params.k, float(params.nu), quad.scheme, quad.nodes)
    return tilted_batch(mtilde, nodes, logw, Qtilde)


def state_from_natural(m, Q, mtilde, Qtilde, params, quad):
    """Assemble a consistent state from the four natural-parameter blocks."""
    m = np.asarray(m, dtype=float)
    mtilde = np.asarray(mtilde, dtype=float)
    k = params.k
    r = np.linalg.solve(np.eye(k) + Q, m.T).T
    _, rtilde, _ = _weight_moments(mtilde, Qtilde, params, quad)
    return VariationalState(m=m, mtilde=mtilde, Q=np.asarray(Q, dtype=float),
                            Qtilde=np.asarray(Qtilde, dtype=float),
                            r=r, rtilde=rtilde)


def solve_q1_star(params, quad):
    """Smallest root of q = k beta delta/(k-1) {E(beta/(1+q); nu) - 1/k^2}.

    The fixed-point map is bounded by beta delta / (k (k nu + 1)) because
    E decreases from its q = 0 value, which gives a guaranteed bracket.
    A 200-point scan logs root multiplicity before the smallest
    sign-change interval is polished.
    """
    k, beta, delta, nu = params.k, params.beta, params.delta, params.nu
    if beta == 0.0:
        return 0.0
    upper = beta * delta / (k * (k * nu + 1.0))

    def g(q):
        e = e_func(beta / (1.0 + q), nu, k, quad)
        return q - k * beta * delta / (k - 1.0) * (e - 1.0 / k**2)

    qs = np.linspace(0.0, upper * (1.0 + 1e-12), 200)
    vals = np.array([g(q) for q in qs])
    signs = np.sign(vals)
    flips = np.nonzero(np.diff(signs) != 0)[0]
    if vals[0] == 0.0:
        return 0.0
    assert flips.size > 0, "bracket failure despite analytic bound"
    if flips.size > 1:
        logger.info("solve_q1_star: %d sign changes on the scan grid; "
                    "taking the smallest root", flips.size)
    lo, hi = qs[flips[0]], qs[flips[0] + 1]
    root = brentq(g, lo, hi, xtol=1e-12, rtol=8.9e-16)
    assert abs(g(root)) < 1e-10
    return float(root)


def uninformative_nmf(params, X, quad):
    """Closed-form symmetric stationary point built on the data at hand.

    The weight-side J-coefficient qt2 is the exact average of the
    topic-side second-moment maps (it only gauges the flat direction of
    the simplex, but carrying the true value makes the point an exact
    fixed point of nmf_step).
    """
    k, d, beta = params.k, params.d, params.beta
    q1 = solve_q1_star(params, quad)
    q2 = (beta * params.delta - k * q1) / k**2
    s = 1.0 + q1 + k * q2
    qt1 = beta / (1.0 + q1)
    col = X.T @ np.ones(X.shape[0])
    qt2 = (beta**2 * float(col @ col) / (d * k**2 * s**2)
           - beta * q2 / ((1.0 + q1) * s))
    m = np.sqrt(beta) / k * np.outer(col, np.ones(k))
    mtilde = beta / (k * s) * np.outer(X @ col, np.ones(k))
    Q = q1 * np.eye(k) + q2 * np.ones((k, k))
    Qtilde = qt1 * np.eye(k) + qt2 * np.ones((k, k))
    state = state_from_natural(m, Q, mtilde, Qtilde, params, quad)
    return UninformativePoint(q1=q1, q2=q2, qt1=qt1, qt2=qt2, state=state)


def nmf_step(state, X, params, quad):
    """One full coordinate sweep: weight block given (m, Q), then topic
    block given the refreshed (mtilde, Qtilde)."""
    k, d, beta = params.k, params.d, params.beta
    sb = np.sqrt(beta)
    inv = np.linalg.inv(np.eye(k) + state.Q)
    F = sb * state.m @ inv
    mtilde = X @ F
    Qtilde = F.T @ F / d + beta * inv
    Qtilde = 0.5 * (Qtilde + Qtilde.T)
    _, mean, second = _weight_moments(mtilde, Qtilde, params, quad)
    Ftilde = sb * mean
    m_next = X.T @ Ftilde
    Q_next = beta / d * second.sum(axis=0)
    Q_next = 0.5 * (Q_next + Q_next.T)
    r_next = np.linalg.solve(np.eye(k) + Q_next, m_next.T).T
    return VariationalState(m=m_next, mtilde=mtilde, Q=Q_next, Qtilde=Qtilde,
                            r=r_next, rtilde=mean)


def nmf_free_energy(state, X, params, quad):
    """Variational free energy of a consistent state (additive constants
    dropped).

    Both entropic terms are Legendre transforms evaluated at the state's
    own conjugate parameters; the topic-side sums collapse to closed
    forms, the weight side needs one quadrature pass.
    """
    k, d, beta = params.k, params.d, params.beta
    a = np.eye(k) + state.Q
    sign, logdet = np.linalg.slogdet(a)
    if sign <= 0:
        raise np.linalg.LinAlgError("I + Q not positive definite")
    r = state.r
    omega_sum = r.T @ r + d * np.linalg.inv(a)
    psi_topic = (0.5 * float(np.sum(r * state.m))
                 - 0.5 * float(np.sum(omega_sum * state.Q))
                 + 0.5 * d * logdet)
    logz, mean, second = _weight_moments(state.mtilde, state.Qtilde,
                                         params, quad)
    omega_tilde_sum = second.sum(axis=0)
    psi_weight = (float(np.sum(mean * state.mtilde))
                  - 0.5 * float(np.sum(omega_tilde_sum * state.Qtilde))
                  - float(logz.sum()))
    coupling = np.sqrt(beta) * float(np.sum((X @ r) * mean))
    cross = beta / (2.0 * d) * float(np.sum(omega_sum * omega_tilde_sum))
    return psi_topic + psi_weight - coupling + cross


def run_nmf(X, params, cfg):
    """Iterate sweeps from the perturbed symmetric start until the
    permutation-matched estimate distance falls under the threshold.

    The start perturbs the estimate Hhat (not m): the Gaussian direction
    is scaled to epsilon times the Frobenius norm of Hhat*, and m is
    recovered by inverting the moment map, m = Hhat (I + Q*).
    """
    from .diagnostics import convergence_delta, v_stat

    point = uninformative_nmf(params, X, cfg.quad)
    rng = np.random.default_rng(cfg.seed)
    hstar = point.state.r
    eps = cfg.init_epsilon
    if eps > 0:
        G = rng.normal(size=hstar.shape)
        h0 = (1.0 - eps) * hstar + eps * (
            G / np.linalg.norm(G)) * np.linalg.norm(hstar)
    else:
        h0 = hstar
    m0 = h0 @ (np.eye(params.k) + point.state.Q)
    state = state_from_natural(m0, point.state.Q, point.state.mtilde,
                               point.state.Qtilde, params, cfg.quad)
    trajectory = []
    converged = False
    iterations = 0
    prev_w = state.rtilde
    for t in range(cfg.max_iters):
        state = nmf_step(state, X, params, cfg.quad)
        iterations = t + 1
        delta_t = convergence_delta(prev_w, state.rtilde)
        prev_w = state.rtilde
        trajectory.append({
            "iter": iterations,
            "free_energy": nmf_free_energy(state, X, params, cfg.quad),
            "delta_t": delta_t,
            "V_W": v_stat(state.rtilde),
            "V_H": v_stat(state.r),
        })
        if iterations >= cfg.min_iters and delta_t < cfg.conv_threshold:
            converged = True
            break
    return state, iterations, converged, trajectory


def instability_L(params, quad):
    """The local-instability constant L; the uninformative point loses
    naive-mean-field stability where L crosses 1."""
    k, beta, delta = params.k, params.beta, params.delta
    if beta == 0.0:
        return 0.0
    q1 = solve_q1_star(params, quad)
    q2 = (beta * delta - k * q1) / k**2
    s = 1.0 + q1 + k * q2
    bracket = q2 / s * (1.0 / (delta * beta) + 1.0 / k) - 1.0 / k**2
    return (beta * (1.0 + np.sqrt(delta)) ** 2 / (1.0 + q1)
            * (q1 / (delta * beta) + k * max(bracket, 0.0)))


def beta_inst(k, delta, nu, quad):
    """First crossing of L through 1, bracketed to 1e-4 by bisection.

    Scans 64 points up to twice the spectral threshold; raises
    ThresholdNotFound when L never reaches 1 there.
    """
    bs = beta_spect(k, delta, nu)
    from .model import ModelParams

    def lval(beta):
        if beta <= 0.0:
            return -1.0
        p = ModelParams.from_delta(k, 100, delta, beta, nu)
        return instability_L(p, quad) - 1.0

    grid = np.linspace(0.0, 2.0 * bs, 64)
    vals = [lval(b) for b in grid]
    hit = None
    for i in range(len(grid) - 1):
        if vals[i] < 0.0 <= vals[i + 1]:
            hit = (grid[i], grid[i + 1])
            break
    if hit is None:
        raise ThresholdNotFound("no instability below 2 beta_spect")
    return float(brentq(lval, hit[0], hit[1], xtol=1e-4))


def nmf_jacobian_radius(state, X, params, quad, seed=0):
    """Spectral radius of the estimate map m -> m' linearized at a fixed
    point, with the quadratic tilt held at its stationary value.

    Power iteration on central finite differences of the composite
    m -> X^T Ftilde(X F(m; Q); Qtilde(m; Q)); a stall is logged with the
    last two Rayleigh quotients rather than raised.
    """
    k, d, beta = params.k, params.d, params.beta
    sb = np.sqrt(beta)
    inv = np.linalg.inv(np.eye(k) + state.Q)
    nodes, logw = _rule(k, float(params.nu), quad.scheme, quad.nodes)
    h = 1e-6

    def sweep_m(m):
        F = sb * m @ inv
        Qtilde = F.T @ F / d + beta * inv
        _, mean, _ = tilted_batch(X @ F, nodes, logw,
                                  0.5 * (Qtilde + Qtilde.T))
        return (X.T @ (sb * mean)).ravel()

    m0 = state.m
    rng = np.random.default_rng(seed)
    v = rng.normal(size=m0.size)
    v /= np.linalg.norm(v)
    radius = 0.0
    prev = None
    for step in range(100):
        dv = v.reshape(m0.shape)
        jv = (sweep_m(m0 + h * dv) - sweep_m(m0 - h * dv)) / (2.0 * h)
        norm = np.linalg.norm(jv)
        if norm == 0.0:
            return 0.0
        prev, radius = radius, float(norm)
        v = jv / norm
        if step > 0 and abs(radius - prev) < 1e-6 * radius:
            return radius
    logger.warning("jacobian radius power iteration stalled; "
                   "last two estimates %.8f, %.8f", prev, radius)
    return radius
