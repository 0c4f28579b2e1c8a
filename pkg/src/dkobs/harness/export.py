"""Trace files: per-step CSV and a JSON run summary.

CSV columns (exact header)::

    k,err_state_norm,err_corr_norm,lyapunov_v,dist_qeq,solver,seed

Floats are written with 17 significant digits so they re-parse to the same
doubles. The summary (``summary.json``) has this layout, schema tag
``dkobs.summary/1``::

    {
      "schema": "dkobs.summary/1",
      "config": {...every ScenarioConfig field...},
      "config_hash": "<16 hex chars>",
      "solver": "admm", "seed": 0, "steps": 6000, "attempt": 0,
      "initial_err_norm": float,
      "final": {"err_state_norm": float|null, "err_corr_norm": ...,
                "lyapunov_v": ..., "dist_qeq": ..., "baseline_err_norm": ...},
      "max_err_corr_norm": float|null,
      "wall_time": float,
      "analysis": {...} | null
    }

``final`` entries are ``null`` for a zero-step run. ``analysis`` holds the
report written by ``dkobs analyze`` when the summary is regenerated there.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from ..errors import InternalInvariantViolation, IoError
from .config import ScenarioConfig, format_config, load_config
from .simulate import SimTrace

SCHEMA = "dkobs.summary/1"
CSV_HEADER = ("k", "err_state_norm", "err_corr_norm", "lyapunov_v", "dist_qeq", "solver", "seed")
TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.json"
CONFIG_FILE = "config.cfg"


def _fmt(x: float) -> str:
    return "%.17g" % x


def trace_rows(trace: SimTrace):
    """CSV rows (header first) as lists of strings."""
    yield list(CSV_HEADER)
    solver, seed = trace.solver, str(trace.seed)
    cols = (trace.err_state_norm, trace.err_corr_norm, trace.lyapunov_v, trace.dist_qeq)
    for k in range(trace.steps):
        yield [str(k), *(_fmt(c[k]) for c in cols), solver, seed]


def _check_finite(trace: SimTrace) -> None:
    for name in ("err_state_norm", "err_corr_norm", "lyapunov_v", "dist_qeq"):
        if not np.all(np.isfinite(getattr(trace, name))):
            raise InternalInvariantViolation(f"refusing to export non-finite {name}")


def write_trace_csv(trace: SimTrace, path: str | Path) -> Path:
    _check_finite(trace)
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(trace_rows(trace))
    except OSError as exc:
        raise IoError(f"cannot write trace '{path}': {exc.strerror or exc}") from exc
    return path


def read_trace_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a trace CSV back into column arrays."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read trace '{path}': {exc.strerror or exc}") from exc
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise IoError(f"'{path}' does not start with the trace header")
    body = rows[1:]
    out: dict[str, np.ndarray] = {"k": np.array([int(r[0]) for r in body], dtype=int)}
    for j, name in enumerate(CSV_HEADER[1:5], start=1):
        out[name] = np.array([float(r[j]) for r in body])
    out["solver"] = np.array([r[5] for r in body], dtype=object)
    out["seed"] = np.array([int(r[6]) for r in body], dtype=np.uint64)
    return out


def _last(a: np.ndarray | None):
    if a is None or len(a) == 0:
        return None
    return float(a[-1])


def summarize(trace: SimTrace, analysis: dict | None = None) -> dict:
    cfg = trace.config
    return {
        "schema": SCHEMA,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "solver": trace.solver,
        "seed": trace.seed,
        "steps": trace.steps,
        "attempt": trace.attempt,
        "initial_err_norm": trace.initial_err_norm,
        "final": {
            "err_state_norm": _last(trace.err_state_norm),
            "err_corr_norm": _last(trace.err_corr_norm),
            "lyapunov_v": _last(trace.lyapunov_v),
            "dist_qeq": _last(trace.dist_qeq),
            "baseline_err_norm": _last(trace.baseline_err_norm),
        },
        "max_err_corr_norm": float(np.max(trace.err_corr_norm)) if trace.steps else None,
        "wall_time": trace.wall_time,
        "analysis": analysis,
    }


def _json_safe(obj):
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def write_json(data: dict, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(_json_safe(data), indent=2, sort_keys=True, allow_nan=False) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write '{path}': {exc.strerror or exc}") from exc
    return path


def read_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read '{path}': {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"'{path}' is not valid JSON: {exc}") from exc


def export(trace: SimTrace, out_dir: str | Path, analysis: dict | None = None) -> dict[str, Path]:
    """Write ``trace.csv``, ``summary.json`` and the echoed ``config.cfg`` into ``out_dir``.

    Raises
    ------
    IoError
        If the directory cannot be created or a file cannot be written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory '{out}': {exc.strerror or exc}") from exc
    paths = {
        "trace": write_trace_csv(trace, out / TRACE_FILE),
        "summary": write_json(summarize(trace, analysis), out / SUMMARY_FILE),
    }
    try:
        (out / CONFIG_FILE).write_text(format_config(trace.config))
    except OSError as exc:
        raise IoError(f"cannot write '{out / CONFIG_FILE}': {exc.strerror or exc}") from exc
    paths["config"] = out / CONFIG_FILE
    return paths


def load_run_config(trace_dir: str | Path) -> ScenarioConfig:
    """Configuration echoed next to an exported trace."""
    return load_config(Path(trace_dir) / CONFIG_FILE)
