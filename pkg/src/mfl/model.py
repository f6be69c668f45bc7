"""Model parameters, synthetic data generation, and dataset I/O.

The observation model is X = (sqrt(beta)/d) W H^T + Z with W rows drawn
from Dir(nu; k), H entries standard normal, and Z entries N(0, 1/d).
The symmetric companion problem is X = (lambda/n) sigma sigma^T + Z with
Z drawn from the GOE.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

_MAGIC = b"MFL1"


@dataclass(frozen=True)
class ModelParams:
    """Problem dimensions and signal strength (k, d, n, beta, nu)."""

    k: int
    d: int
    n: int
    beta: float
    nu: float = 1.0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.d < 1 or self.n < 1:
            raise ValueError("d and n must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not self.nu > 0:
            raise ValueError("nu must be positive")

    @property
    def delta(self):
        return self.n / self.d

    @classmethod
    def from_delta(cls, k, d, delta, beta, nu=1.0):
        """Construct with n rounded to delta * d."""
        return cls(k=k, d=d, n=int(round(delta * d)), beta=beta, nu=nu)


@dataclass
class Dataset:
    X: np.ndarray
    W: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        n, d = self.X.shape
        k = self.W.shape[1]
        if self.W.shape != (n, k) or self.H.shape != (d, k):
            raise ValueError("inconsistent dataset shapes")
        rows = self.W.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > 1e-12 or self.W.min() < 0:
            raise ValueError("W rows must lie on the probability simplex")


@dataclass
class Z2Instance:
    """Symmetric rank-one spike: X = (lam/n) sigma sigma^T + GOE noise."""

    X: np.ndarray
    sigma: np.ndarray
    lam: float


def sample_lda(params, seed):
    """Draw a Dataset from the model, deterministically in the seed."""
    rng = np.random.default_rng(seed)
    W = rng.dirichlet(np.full(params.k, params.nu), size=params.n)
    H = rng.normal(size=(params.d, params.k))
    Z = rng.normal(scale=1.0 / np.sqrt(params.d), size=(params.n, params.d))
    X = (np.sqrt(params.beta) / params.d) * (W @ H.T) + Z
    return Dataset(X=X, W=W, H=H)


def sample_z2(n, lam, seed):
    """Draw a Z2Instance: sigma uniform on {-1,+1}^n, Z GOE(n)."""
    if n < 1:
        raise ValueError("n must be positive")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    rng = np.random.default_rng(seed)
    sigma = 2 * rng.integers(0, 2, size=n) - 1
    Z = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    Z[iu] = rng.normal(scale=1.0 / np.sqrt(n), size=iu[0].size)
    Z = Z + Z.T
    Z[np.diag_indices(n)] = rng.normal(scale=np.sqrt(2.0 / n), size=n)
    X = (lam / n) * np.outer(sigma, sigma) + Z
    return Z2Instance(X=X, sigma=sigma.astype(float), lam=float(lam))


def trivial_estimator(X, params):
    """Rank-one baseline c 1_n (X^T 1_n)^T with c = sqrt(beta)/(k + beta delta)."""
    n, d = X.shape
    if (n, d) != (params.n, params.d):
        raise ValueError("X shape does not match params")
    c = np.sqrt(params.beta) / (params.k + params.beta * params.delta)
    return c * np.outer(np.ones(n), X.sum(axis=0))


def save_dataset(dataset, path):
    """Binary dump: magic MFL1, u32 n, d, k, then X, W, H as '<f8' row-major."""
    n, d = dataset.X.shape
    k = dataset.W.shape[1]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", n, d, k))
        fh.write(np.ascontiguousarray(dataset.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.H, dtype="<f8").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != _MAGIC:
            raise ValueError(f"{path}: not a dataset dump (bad header)")
        n, d, k = struct.unpack("<III", head[4:])
        body = np.frombuffer(fh.read(), dtype="<f8")
    want = n * d + n * k + d * k
    if body.size != want:
        raise ValueError(f"{path}: truncated dump ({body.size} of {want} values)")
    X = body[: n * d].reshape(n, d).copy()
    W = body[n * d : n * d + n * k].reshape(n, k).copy()
    H = body[n * d + n * k :].reshape(d, k).copy()
    return Dataset(X=X, W=W, H=H)


def save_x_csv(X, path):
    """Write X in sparse triplet form with header i,j,value (row-major)."""
    n, d = X.shape
    ii, jj = np.meshgrid(np.arange(n), np.arange(d), indexing="ij")
    table = np.column_stack([ii.ravel(), jj.ravel(), X.ravel()])
    np.savetxt(path, table, fmt="%d,%d,%.17g", header="i,j,value", comments="")
