"""Render figures from sweep output files.

This package consumes the documented file formats only: aggregate CSVs
whose leading comment lines start with "#", a thresholds JSON (either
one {beta_inst, beta_bayes, beta_spect} object or a list of per-(k,
delta) records), and per-coordinate interval CSVs. It never recomputes
statistics; whatever the files say is what gets drawn.

Three figure kinds, configured by the x/y/z column names of a
FigureSpec:

* "curve": one line of y against x per distinct value in the z column.
* "heatmap": z pivoted onto the (x, y) grid. With overlay_thresholds
  the threshold values are drawn over the map, as curves across x when
  the JSON records carry a delta per row and as horizontal lines
  otherwise.
* "interval_strip": one vertical segment per row spanning [y, z], with
  the x column marking the true value. Segments whose interval misses
  the truth are drawn in red.

Rendering is deterministic: fixed geometry, fixed colors, and no
output metadata that varies between runs, so rerendering a spec
reproduces the image byte for byte.
"""

import csv
import json
from dataclasses import dataclass, fields
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

KINDS = ("curve", "heatmap", "interval_strip")

THRESHOLD_STYLES = {
    "beta_inst": ("#ff7f0e", "--"),
    "beta_bayes": ("#d62728", "-"),
    "beta_spect": ("#17becf", ":"),
}

FIGSIZE = (6.4, 4.8)
DPI = 150
COVERED_COLOR = "#4878cf"
MISSED_COLOR = "#d62728"


class SchemaError(Exception):
    """An input file lacks the columns a spec refers to."""


@dataclass(frozen=True)
class FigureSpec:
    """One figure: what to read, which columns mean what, where to write."""

    kind: str
    input_csv: Path
    x: str
    y: str
    z: str
    output: Path
    overlay_thresholds: bool = False
    thresholds_json: Path = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.overlay_thresholds and self.thresholds_json is None:
            raise ValueError("overlay_thresholds requires thresholds_json")

    @classmethod
    def from_mapping(cls, payload, base_dir=None):
        """Build a spec from a parsed JSON object.

        Unknown keys are rejected by name. Relative paths resolve
        against base_dir (the spec file's directory, for the CLI).
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"unknown spec keys: {', '.join(unknown)}")
        missing = sorted({"kind", "input_csv", "x", "y", "z", "output"}
                         - set(payload))
        if missing:
            raise ValueError(f"spec is missing keys: {', '.join(missing)}")
        values = dict(payload)
        for key in ("input_csv", "output", "thresholds_json"):
            if values.get(key) is not None:
                path = Path(values[key])
                if base_dir is not None and not path.is_absolute():
                    path = Path(base_dir) / path
                values[key] = path
        return cls(**values)


def read_table(path, needed):
    """Rows of a sweep CSV as column -> float arrays, comments skipped.

    Raises SchemaError when any needed column is absent (the message
    names both the missing and the available ones) and ValueError when
    no data rows remain, before anything is written anywhere.
    """
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    have = reader.fieldnames or []
    missing = sorted(set(needed) - set(have))
    if missing:
        raise SchemaError(
            f"{path} is missing columns: {', '.join(missing)} "
            f"(has: {', '.join(have)})")
    rows = list(reader)
    if not rows:
        raise ValueError(f"{path} has no data rows")
    return {col: np.array([float(r[col]) for r in rows]) for col in needed}


def _threshold_series(payload, name):
    """(delta, value) pairs for one threshold, from either JSON shape."""
    records = [payload] if isinstance(payload, dict) else list(payload)
    pairs = [(float(rec.get("delta", np.nan)), float(rec[name]))
             for rec in records if rec.get(name) is not None]
    pairs.sort(key=lambda p: p[0])
    return pairs


def _draw_overlays(ax, spec, orientation):
    payload = json.loads(Path(spec.thresholds_json).read_text())
    for name, (color, style) in THRESHOLD_STYLES.items():
        pairs = _threshold_series(payload, name)
        if not pairs:
            continue
        deltas = [p[0] for p in pairs]
        values = [p[1] for p in pairs]
        if orientation == "horizontal":
            # Heatmap: threshold as a function of the x (delta) axis,
            # or a flat line when there is only one grid column.
            if len(set(deltas)) > 1 and not np.isnan(deltas).any():
                ax.plot(deltas, values, style, color=color, label=name,
                        linewidth=1.6)
            else:
                ax.axhline(values[0], color=color, linestyle=style,
                           label=name, linewidth=1.6)
        else:
            # Curve: the x axis is beta, so thresholds are vertical.
            for i, value in enumerate(dict.fromkeys(values)):
                ax.axvline(value, color=color, linestyle=style,
                           label=name if i == 0 else None, linewidth=1.2)


def _render_curve(ax, spec):
    data = read_table(spec.input_csv, [spec.x, spec.y, spec.z])
    for level in np.unique(data[spec.z]):
        sel = data[spec.z] == level
        order = np.argsort(data[spec.x][sel], kind="stable")
        ax.plot(data[spec.x][sel][order], data[spec.y][sel][order],
                marker="o", markersize=3.5, linewidth=1.4,
                label=f"{spec.z}={level:g}")
    if spec.overlay_thresholds:
        _draw_overlays(ax, spec, orientation="vertical")
    ax.set_xlabel(spec.x)
    ax.set_ylabel(spec.y)
    ax.legend(loc="best", fontsize=8)


def _cell_edges(centers):
    """Midpoint cell edges; a lone coordinate gets a unit-wide cell."""
    if centers.size == 1:
        return np.array([centers[0] - 0.5, centers[0] + 0.5])
    mids = 0.5 * (centers[1:] + centers[:-1])
    first = 2.0 * centers[0] - mids[0]
    last = 2.0 * centers[-1] - mids[-1]
    return np.concatenate([[first], mids, [last]])


def _render_heatmap(ax, spec):
    data = read_table(spec.input_csv, [spec.x, spec.y, spec.z])
    xs = np.unique(data[spec.x])
    ys = np.unique(data[spec.y])
    grid = np.full((ys.size, xs.size), np.nan)
    xi = np.searchsorted(xs, data[spec.x])
    yi = np.searchsorted(ys, data[spec.y])
    grid[yi, xi] = data[spec.z]
    mesh = ax.pcolormesh(_cell_edges(xs), _cell_edges(ys), grid,
                         cmap="viridis")
    ax.figure.colorbar(mesh, ax=ax, label=spec.z)
    if spec.overlay_thresholds:
        _draw_overlays(ax, spec, orientation="horizontal")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel(spec.x)
    ax.set_ylabel(spec.y)


def _render_interval_strip(ax, spec):
    data = read_table(spec.input_csv, [spec.x, spec.y, spec.z])
    truth, lo, hi = data[spec.x], data[spec.y], data[spec.z]
    idx = np.arange(truth.size)
    covered = (lo <= truth) & (truth <= hi)
    for sel, color in ((covered, COVERED_COLOR), (~covered, MISSED_COLOR)):
        if sel.any():
            ax.vlines(idx[sel], lo[sel], hi[sel], color=color, linewidth=1.2)
    ax.plot(idx, truth, ".", color="black", markersize=3)
    ax.set_xlabel("coordinate")
    ax.set_ylabel(spec.x)


_RENDERERS = {
    "curve": _render_curve,
    "heatmap": _render_heatmap,
    "interval_strip": _render_interval_strip,
}


def render(spec):
    """Draw one figure and write it where the spec says.

    Inputs are validated (and the whole figure composed) before the
    output path is touched, so a schema error or an empty input leaves
    no file behind. Returns the output path.
    """
    fig, ax = plt.subplots(figsize=FIGSIZE, dpi=DPI)
    try:
        _RENDERERS[spec.kind](ax, spec)
        out = Path(spec.output)
        metadata = {"Software": None} if out.suffix == ".png" else None
        fig.savefig(out, dpi=DPI, metadata=metadata)
    finally:
        plt.close(fig)
    return Path(spec.output)
