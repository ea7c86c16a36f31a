"""File outputs for runs and comparisons, and plot emission from saved traces.

CSV files use ``,`` separators, ``\\n`` line endings and UTF-8; floats carry 17
significant digits so a file round-trips to the exact doubles.  Every file
belongs to a schema whose version is listed in the directory's manifest.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path

import numpy as np

from .driver import TRACE_COLUMNS, RunTrace
from .mesh import node_times
from .problem import DynamicFeasibilityProblem

SCHEMA_VERSION = 1
SCHEMAS = {
    "iterations.csv": "irmesh.iterations",
    "trajectory.csv": "irmesh.trajectory",
    "summary.json": "irmesh.summary",
    "mesh.json": "irmesh.mesh",
    "comparison.csv": "irmesh.comparison",
    "convergence.csv": "irmesh.convergence",
    "plot_evals.csv": "irmesh.plot-evals",
    "plot_convergence.csv": "irmesh.plot-convergence",
    "evals.svg": "irmesh.figure",
    "convergence.svg": "irmesh.figure",
}
TRAJECTORY_SAMPLES = 1000
COMPARISON_COLUMNS = (
    "strategy",
    "status",
    "total_jacobian_evals",
    "total_residual_evals",
    "overhead_residual_evals",
    "wall_time_s",
    "trials",
    "final_f_m",
    "final_n_h",
    "final_n_q",
)
CONVERGENCE_COLUMNS = ("strategy", "row", "iteration", "event", "cumulative_jacobian_evals", "f_m")


class InputError(OSError):
    """A saved run is missing or unreadable."""


class EmptyTraceError(InputError):
    """A trace without optimisation rows cannot be plotted."""


def fmt(value) -> str:
    """Serialise one CSV cell."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(value)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def json_text(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n"


def write_files(directory: Path, files: dict[str, str | bytes], manifest_extra: dict | None = None):
    """Write all ``files`` plus a manifest, each through a temporary name.

    Content is fully prepared before anything touches the disk, so a failure
    while serialising leaves no partial outputs behind.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / "manifest.json"
    manifest = {"schema_version": SCHEMA_VERSION, "files": {}}
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            pass
    manifest.setdefault("files", {})
    for name in files:
        manifest["files"][name] = {"schema": SCHEMAS.get(name, "irmesh.other"), "version": SCHEMA_VERSION}
    if manifest_extra:
        manifest.update(manifest_extra)
    all_files = dict(files)
    all_files["manifest.json"] = json_text(manifest)
    written = []
    try:
        for name, content in all_files.items():
            tmp = directory / f".{name}.tmp"
            data = content.encode("utf-8") if isinstance(content, str) else content
            with open(tmp, "wb") as fh:
                fh.write(data)
            written.append((tmp, directory / name))
        for tmp, final in written:
            os.replace(tmp, final)
    finally:
        for tmp, _ in written:
            if tmp.exists():
                tmp.unlink()


def iterations_csv(trace: RunTrace) -> str:
    return csv_text(TRACE_COLUMNS, (r.as_tuple() for r in trace.rows))


def trajectory_csv(problem: DynamicFeasibilityProblem, trace: RunTrace) -> str:
    traj = trace.final_trajectory
    mesh = traj.mesh
    dom = problem.domain
    n_x, n_u = problem.n_x, problem.n_u
    header = ["kind", "interval", "t"] + [f"x{j + 1}" for j in range(n_x)] + [f"u{j + 1}" for j in range(n_u)]
    rows = []
    s = np.linspace(0.0, 1.0, TRAJECTORY_SAMPLES)
    idx, _ = traj.locate(s)
    xs, us = traj.evaluate(s)
    for k in range(s.size):
        rows.append(["sample", idx[k], dom.t0 + s[k] * dom.duration, *xs[k], *us[k]])
    sx = node_times(mesh, mesh.x_basis)
    d = mesh.x_basis.degree
    for i in range(mesh.n_h):
        for p in range(d + 1):
            if i > 0 and p == 0:
                continue  # shared with the previous interval's last node
            rows.append(["x-node", i, dom.t0 + sx[i, p] * dom.duration, *traj.x_coeffs[i, p], *([None] * n_u)])
    su = node_times(mesh, mesh.u_basis)
    for i in range(mesh.n_h):
        for p in range(mesh.u_basis.size):
            rows.append(["u-node", i, dom.t0 + su[i, p] * dom.duration, *([None] * n_x), *traj.u_coeffs[i, p]])
    return csv_text(header, rows)


def mesh_json(problem: DynamicFeasibilityProblem, trace: RunTrace) -> str:
    info = trace.final_mesh.describe()
    info["t0"] = problem.domain.t0
    info["tf"] = problem.domain.tf
    return json_text(info)


def summary_dict(trace: RunTrace, config: dict | None = None, trials: int = 1, wall_time=None) -> dict:
    out = trace.summary()
    out["trials"] = trials
    if wall_time is not None:
        out["wall_time_s"] = wall_time
    out["success"] = trace.success
    if config is not None:
        out["config"] = config
    return out


def run_files(problem, trace: RunTrace, config: dict | None = None, trials: int = 1, wall_time=None):
    return {
        "summary.json": json_text(summary_dict(trace, config, trials, wall_time)),
        "iterations.csv": iterations_csv(trace),
        "trajectory.csv": trajectory_csv(problem, trace),
        "mesh.json": mesh_json(problem, trace),
    }


def comparison_csv(summaries: list[dict]) -> str:
    return csv_text(COMPARISON_COLUMNS, ([s.get(c) for c in COMPARISON_COLUMNS] for s in summaries))


def convergence_rows(strategy: str, rows) -> list[tuple]:
    """``(strategy, row, iteration, event, cumulative_jacobian_evals, f_m)`` per trace row."""
    out, it = [], 0
    for r in rows:
        if r["event"] == "optimize":
            it += 1
        out.append((strategy, r["row"], it, r["event"], r["cumulative_jacobian_evals"], r["f_m"]))
    return out


def convergence_csv(series: dict[str, list[dict]]) -> str:
    rows = []
    for strategy, trace_rows in series.items():
        rows.extend(convergence_rows(strategy, trace_rows))
    return csv_text(CONVERGENCE_COLUMNS, rows)


_INT_COLUMNS = {
    "row", "block", "step", "n_h", "n_q", "n", "jacobian_evals", "residual_evals",
    "overhead_residual_evals", "cumulative_jacobian_evals", "cumulative_residual_evals",
}


def read_iterations(path: Path) -> list[dict]:
    if not Path(path).is_file():
        raise InputError(f"{path} not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRACE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        try:
            for raw in reader:
                rows.append(
                    {
                        k: raw[k] if k == "event" else (int(raw[k]) if k in _INT_COLUMNS else float(raw[k]))
                        for k in TRACE_COLUMNS
                    }
                )
        except (TypeError, ValueError) as exc:
            raise InputError(f"{path}: malformed row {reader.line_num}: {exc}") from None
    return rows


def plot_series(rows: list[dict]):
    """Per-iteration Jacobian evaluations and f_M with refinement marks.

    Evaluations spent outside optimisation steps (the initial gradient and the
    one after each refinement) are charged to the following step, so the
    series sums to the run total.  Returns ``(evals, convergence)`` lists.
    """
    evals, conv = [], []
    pending, it, refined = 0, 0, False
    for r in rows:
        pending += r["jacobian_evals"]
        if r["event"] == "optimize":
            it += 1
            evals.append((it, pending))
            conv.append((it, r["f_m"], int(refined)))
            pending, refined = 0, False
        elif r["event"].startswith("refine"):
            refined = True
    if not evals:
        raise EmptyTraceError("trace has no optimisation steps")
    if pending:
        last_it, last_n = evals[-1]
        evals[-1] = (last_it, last_n + pending)
    return evals, conv


def _svg(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def plot_files(runs: dict[str, list[dict]]) -> dict[str, str | bytes]:
    """Plot data and SVG renderings for one or more named traces."""
    series = {name: plot_series(rows) for name, rows in runs.items()}

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "irmesh"
    evals_rows, conv_rows = [], []
    fig_e, ax_e = plt.subplots(figsize=(6, 3.5))
    fig_c, ax_c = plt.subplots(figsize=(6, 3.5))
    for name, (evals, conv) in series.items():
        evals_rows.extend((name, it, n) for it, n in evals)
        conv_rows.extend((name, it, f, mark) for it, f, mark in conv)
        it_e = np.array([e[0] for e in evals])
        n_e = np.array([e[1] for e in evals])
        ax_e.fill_between(it_e, n_e, step="mid", alpha=0.35, label=name)
        ax_e.step(it_e, n_e, where="mid", linewidth=0.8)
        it_c = np.array([c[0] for c in conv])
        f_c = np.array([c[1] for c in conv])
        (line,) = ax_c.loglog(it_c, f_c, label=name)
        marks = np.array([c[2] for c in conv], dtype=bool)
        if marks.any():
            ax_c.loglog(it_c[marks], f_c[marks], "o", color=line.get_color(), markersize=4)
    ax_e.set_xlabel("iteration")
    ax_e.set_ylabel("Jacobian evaluations")
    ax_e.legend()
    ax_c.set_xlabel("iteration")
    ax_c.set_ylabel("f_M")
    ax_c.legend()
    fig_e.tight_layout()
    fig_c.tight_layout()
    files = {
        "plot_evals.csv": csv_text(("strategy", "iteration", "jacobian_evals"), evals_rows),
        "plot_convergence.csv": csv_text(("strategy", "iteration", "f_m", "refinement"), conv_rows),
        "evals.svg": _svg(fig_e),
        "convergence.svg": _svg(fig_c),
    }
    plt.close(fig_e)
    plt.close(fig_c)
    return files
