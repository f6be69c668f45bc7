"""Experiment runner behind the command-line interface.

Phase-diagram sweeps, coverage experiments, and threshold tables fan
replicates out over a process pool and funnel rows back through an
ordered writer, so file contents do not depend on the worker count.
Per-replicate seeds are derived by hashing the grid indices into the
base seed; the data, the initialization, and the Binder noise each get
their own stream. Wall time is the one measured (hence nondeterministic)
column in the per-run CSV; every statistic is reproducible bit for bit.
"""

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from hashlib import blake2b
from pathlib import Path

import numpy as np

from .diagnostics import credible_interval_w1, v_stat
from .meanfield import NmfConfig, beta_inst, run_nmf
from .model import ModelParams, sample_lda
from .priors import QuadratureSpec
from .state_evolution import Thresholds, beta_bayes, beta_spect
from .tap_amp import AmpConfig, run_amp

logger = logging.getLogger(__name__)

SCHEMA_LINE = "# schema=1"

RUN_COLUMNS = [
    "run_id", "k", "d", "n", "delta", "beta", "nu", "seed", "algorithm",
    "iterations", "converged", "V_W", "V_H", "C2_sum_H", "C4_sum_H",
    "C2_sum_W", "C4_sum_W", "guard_pass", "free_energy_final", "wall_ms",
]

PHASE_COLUMNS = ["delta", "beta", "frac_V_ge_eps", "B_H", "B_W"]

COVERAGE_COLUMNS = ["delta", "beta", "replicate", "seed", "coverage",
                    "mean_width"]

V_EPSILON = {"nmf": 1e-4, "amp": 5e-3}

BINDER_ETA = 1e-4

_FAIL_ERRORS = (ValueError, RuntimeError, ArithmeticError,
                np.linalg.LinAlgError)


@dataclass
class ExperimentConfig:
    algorithm: str = "nmf"
    k: int = 2
    d: int = 400
    nu: float = 1.0
    delta_grid: list = field(default_factory=lambda: [1.0])
    beta_grid: list = field(default_factory=lambda: [1.0])
    replicates: int = 20
    base_seed: int = 0
    quad: QuadratureSpec | None = None
    nmf_cfg: dict = field(default_factory=dict)
    amp_cfg: dict = field(default_factory=dict)
    output_dir: str = "."

    def __post_init__(self):
        if self.algorithm not in ("nmf", "amp"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not self.delta_grid or not self.beta_grid:
            raise ValueError("grids must be nonempty")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.quad is None:
            self.quad = QuadratureSpec.default(self.k)


def replicate_seed(base_seed, di, bi, ri, stream=""):
    """Collision-free per-replicate seed from the grid position.

    A keyed hash rather than Python's salted hash, so the derivation is
    stable across processes and sessions.
    """
    tag = f"{di},{bi},{ri},{stream}".encode()
    h = int.from_bytes(blake2b(tag, digest_size=8).digest(), "little")
    return (int(base_seed) ^ h) & 0x7FFFFFFFFFFFFFFF


def _check_seed_collisions(cfg):
    seeds = [replicate_seed(cfg.base_seed, di, bi, ri)
             for di in range(len(cfg.delta_grid))
             for bi in range(len(cfg.beta_grid))
             for ri in range(cfg.replicates)]
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("replicate seed collision across the grid")


def _binder_terms(A, Ahat, eta, rng):
    """Per-replicate Binder ingredients (sum C^2, sum C^4, usable)."""
    k = A.shape[1]
    g = rng.normal(size=A.shape[0])
    if k == 2:
        c = float((Ahat[:, 0] - Ahat[:, 1] + eta * g) @ (A[:, 0] - A[:, 1]))
        return c**2, c**4, True
    ap = A - A.mean(axis=1, keepdims=True)
    ahp = Ahat - Ahat.mean(axis=1, keepdims=True) + eta * g[:, None]
    na = np.linalg.norm(ap, axis=0)
    nah = np.linalg.norm(ahp, axis=0)
    if na.min() == 0.0 or nah.min() == 0.0:
        return 0.0, 0.0, False
    C = (ahp.T @ ap) / np.outer(nah, na)
    return float(np.sum(C**2)), float(np.sum(C**4)), True


def _binder_from_rows(k, c2s, c4s):
    """Recombine per-replicate sums with the k-appropriate cumulant."""
    if not c2s:
        return 0.0
    e2 = sum(c2s) / len(c2s)
    e4 = sum(c4s) / len(c4s)
    if k == 2:
        return 0.0 if e2 == 0.0 else float(1.5 - e4 / (2.0 * e2**2))
    if e2 <= 0.01:
        return 0.0
    return float(max(2.0 - 6.0 * e4 / e2**2, 0.0))


def _phase_replicate(task):
    (algorithm, k, d, nu, delta, beta, di, bi, ri, base_seed, quad,
     overrides) = task
    params = ModelParams.from_delta(k, d, delta, beta, nu)
    seed = replicate_seed(base_seed, di, bi, ri)
    row = {
        "run_id": f"{algorithm}-d{di}-b{bi}-r{ri}",
        "k": k, "d": d, "n": params.n, "delta": delta, "beta": beta,
        "nu": nu, "seed": seed, "algorithm": algorithm,
        "iterations": 0, "converged": False,
        "V_W": float("nan"), "V_H": float("nan"),
        "C2_sum_H": float("nan"), "C4_sum_H": float("nan"),
        "C2_sum_W": float("nan"), "C4_sum_W": float("nan"),
        "guard_pass": False, "free_energy_final": float("nan"),
        "wall_ms": 0.0,
    }
    t0 = time.perf_counter()
    try:
        ds = sample_lda(params, seed)
        init_seed = replicate_seed(base_seed, di, bi, ri, "init")
        if algorithm == "nmf":
            cfg = NmfConfig(quad=quad, seed=init_seed, **overrides)
            state, iters, conv, traj = run_nmf(ds.X, params, cfg)
            fe = traj[-1]["free_energy"]
        else:
            cfg = AmpConfig(quad=quad, seed=init_seed, **overrides)
            state, iters, conv, traj = run_amp(ds.X, params, cfg)
            fe = traj[-1].get("tap_free_energy", float("nan"))
        hhat = np.asarray(state.r)
        what = np.asarray(state.rtilde)
        brng = np.random.default_rng(
            replicate_seed(base_seed, di, bi, ri, "binder"))
        c2h, c4h, okh = _binder_terms(ds.H, hhat, BINDER_ETA, brng)
        c2w, c4w, okw = _binder_terms(ds.W, what, BINDER_ETA, brng)
        row.update(iterations=iters, converged=conv,
                   V_W=v_stat(what), V_H=v_stat(hhat),
                   C2_sum_H=c2h, C4_sum_H=c4h, C2_sum_W=c2w,
                   C4_sum_W=c4w, guard_pass=okh and okw,
                   free_energy_final=fe)
    except _FAIL_ERRORS as exc:
        logger.warning("replicate %s failed: %s", row["run_id"], exc)
    row["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
    return row


def _fan_out(worker, tasks, threads):
    if threads <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, tasks))


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def run_phase_diagram(cfg, threads=1):
    """Sweep the (delta, beta) grid; write per-run and aggregate CSVs.

    Returns the aggregate path; the per-run rows land next to it in
    runs_<algorithm>.csv. Failures become rows with NaN statistics and
    are excluded from the aggregates.
    """
    _check_seed_collisions(cfg)
    overrides = cfg.nmf_cfg if cfg.algorithm == "nmf" else cfg.amp_cfg
    tasks = [(cfg.algorithm, cfg.k, cfg.d, cfg.nu, delta, beta, di, bi,
              ri, cfg.base_seed, cfg.quad, overrides)
             for di, delta in enumerate(cfg.delta_grid)
             for bi, beta in enumerate(cfg.beta_grid)
             for ri in range(cfg.replicates)]
    rows = _fan_out(_phase_replicate, tasks, threads)
    rows.sort(key=lambda r: r["run_id"])
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs_path = out / f"runs_{cfg.algorithm}.csv"
    _write_csv(runs_path, RUN_COLUMNS, rows)

    eps = V_EPSILON[cfg.algorithm]
    agg_rows = []
    for delta in cfg.delta_grid:
        for beta in cfg.beta_grid:
            cell = [r for r in rows
                    if r["delta"] == delta and r["beta"] == beta
                    and np.isfinite(r["V_W"])]
            if cell:
                frac = float(np.mean([r["V_W"] >= eps for r in cell]))
            else:
                frac = float("nan")
            used = [r for r in cell if r["guard_pass"]]
            agg_rows.append({
                "delta": delta, "beta": beta, "frac_V_ge_eps": frac,
                "B_H": _binder_from_rows(cfg.k,
                                         [r["C2_sum_H"] for r in used],
                                         [r["C4_sum_H"] for r in used]),
                "B_W": _binder_from_rows(cfg.k,
                                         [r["C2_sum_W"] for r in used],
                                         [r["C4_sum_W"] for r in used]),
            })
    agg_path = out / f"phase_{cfg.algorithm}.csv"
    _write_csv(agg_path, PHASE_COLUMNS, agg_rows)
    return agg_path


def binder_json_from_runs(runs_csv, out_path=None):
    """Recombine a per-run CSV into one Binder record per grid cell."""
    with open(runs_csv, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema="):
            raise ValueError(f"{runs_csv}: missing schema line")
        rows = list(csv.DictReader(fh))
    cells = {}
    for r in rows:
        key = (float(r["delta"]), float(r["beta"]))
        cells.setdefault(key, []).append(r)
    records = []
    for (delta, beta), cell in sorted(cells.items()):
        k = int(cell[0]["k"])
        used = [r for r in cell if r["guard_pass"] == "True"]
        records.append({
            "beta": beta, "delta": delta,
            "B_H": _binder_from_rows(
                k, [float(r["C2_sum_H"]) for r in used],
                [float(r["C4_sum_H"]) for r in used]),
            "B_W": _binder_from_rows(
                k, [float(r["C2_sum_W"]) for r in used],
                [float(r["C4_sum_W"]) for r in used]),
            "num_runs": len(used),
        })
    text = json.dumps(records, indent=2, sort_keys=True)
    if out_path is not None:
        Path(out_path).write_text(text + "\n")
    return records


def _coverage_replicate(task):
    (k, d, nu, delta, beta, di, bi, ri, base_seed, quad, overrides,
     alpha) = task
    params = ModelParams.from_delta(k, d, delta, beta, nu)
    seed = replicate_seed(base_seed, di, bi, ri)
    row = {"delta": delta, "beta": beta, "replicate": ri, "seed": seed,
           "coverage": float("nan"), "mean_width": float("nan")}
    try:
        ds = sample_lda(params, seed)
        cfg = NmfConfig(quad=quad,
                        seed=replicate_seed(base_seed, di, bi, ri, "init"),
                        **overrides)
        state, _, _, _ = run_nmf(ds.X, params, cfg)
        crng = np.random.default_rng(
            replicate_seed(base_seed, di, bi, ri, "coverage"))
        coords = crng.choice(params.n, size=min(100, params.n),
                             replace=False)
        hits = []
        widths = []
        for a in coords:
            lo, hi, _ = credible_interval_w1(
                np.asarray(state.mtilde)[a], np.asarray(state.Qtilde),
                params, alpha, quad)
            hits.append(lo <= ds.W[a, 0] <= hi)
            widths.append(hi - lo)
        row.update(coverage=float(np.mean(hits)),
                   mean_width=float(np.mean(widths)))
    except _FAIL_ERRORS as exc:
        logger.warning("coverage replicate (%s, %s, %s) failed: %s",
                       delta, beta, ri, exc)
    return row


def run_coverage(cfg, alpha, threads=1):
    """Credible-interval coverage of the first weight coordinate.

    Mean-field posteriors only; 100 coordinates sampled per replicate.
    Emits per-replicate rows plus a per-cell aggregate with the nominal
    level alongside the achieved mean.
    """
    if cfg.k != 2:
        raise ValueError("coverage experiment requires k = 2")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    _check_seed_collisions(cfg)
    tasks = [(cfg.k, cfg.d, cfg.nu, delta, beta, di, bi, ri,
              cfg.base_seed, cfg.quad, cfg.nmf_cfg, alpha)
             for di, delta in enumerate(cfg.delta_grid)
             for bi, beta in enumerate(cfg.beta_grid)
             for ri in range(cfg.replicates)]
    rows = _fan_out(_coverage_replicate, tasks, threads)
    rows.sort(key=lambda r: (r["delta"], r["beta"], r["replicate"]))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "coverage_runs.csv", COVERAGE_COLUMNS, rows)
    agg_rows = []
    for delta in cfg.delta_grid:
        for beta in cfg.beta_grid:
            cell = [r for r in rows
                    if r["delta"] == delta and r["beta"] == beta
                    and np.isfinite(r["coverage"])]
            agg_rows.append({
                "delta": delta, "beta": beta,
                "coverage": (float(np.mean([r["coverage"] for r in cell]))
                             if cell else float("nan")),
                "mean_width": (float(np.mean([r["mean_width"]
                                              for r in cell]))
                               if cell else float("nan")),
                "nominal": 1.0 - alpha,
            })
    agg_path = out / "coverage.csv"
    _write_csv(agg_path, ["delta", "beta", "coverage", "mean_width",
                          "nominal"], agg_rows)
    return agg_path


def threshold_rows(k_list, delta_list, nu, quad=None, mc_samples=100_000,
                   seed=0):
    """Thresholds records for every (k, delta) combination."""
    records = []
    for k in k_list:
        q = quad if quad is not None else QuadratureSpec.default(k)
        for delta in delta_list:
            records.append(Thresholds(
                beta_spect=beta_spect(k, delta, nu),
                beta_inst=beta_inst(k, delta, nu, q),
                beta_bayes=beta_bayes(k, delta, nu, q, mc_samples,
                                      seed=seed),
                k=k, delta=delta, nu=nu))
    return records


def run_threshold_table(k_list, delta_list, nu, output_dir=".",
                        quad=None, mc_samples=100_000, seed=0):
    records = threshold_rows(k_list, delta_list, nu, quad=quad,
                             mc_samples=mc_samples, seed=seed)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "thresholds.json"
    path.write_text(json.dumps([asdict(r) for r in records], indent=2,
                               sort_keys=True) + "\n")
    return path


def load_config(path):
    """Flat key=value lines or a JSON object; keys as ExperimentConfig."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        values[key.strip()] = _coerce(raw.strip())
    return values


def _coerce(raw):
    if "," in raw:
        return [_coerce(part) for part in raw.split(",") if part.strip()]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw
