"""Command-line entry point: ``dkobs simulate | analyze | sweep``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DkobsError, IoError
from .config import SOLVERS, ScenarioConfig, coerce_value, load_config
from .export import SUMMARY_FILE, export, load_run_config, read_json, write_json
from .report import analyze_run, verdict
from .simulate import run

# friendlier names accepted by ``sweep --param``
PARAM_ALIASES = {"H_iters": "h_iters", "H": "h_iters", "epsilon": "eps", "alpha_R": "alpha_r"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dkobs", description="Distributed information-form observer experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{simulate,analyze,sweep}")

    s = sub.add_parser("simulate", help="run one scenario and export its trace")
    s.add_argument("--config", type=Path, help="scenario file (key = value); built-in defaults if omitted")
    s.add_argument("--solver", choices=SOLVERS)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--out", type=Path, default=Path("dkobs-run"), help="output directory (default: %(default)s)")

    a = sub.add_parser("analyze", help="re-run an exported trace with recording and apply the checkers")
    a.add_argument("--trace", type=Path, required=True, help="directory written by 'simulate'")
    a.add_argument("--steps", type=int, default=1000, help="analyse the first N steps (default: %(default)s)")
    a.add_argument("--operators", type=int, default=40, help="frozen operators to sample (default: %(default)s)")

    w = sub.add_parser("sweep", help="run one scenario per parameter value and tabulate the results")
    w.add_argument("--param", required=True, help="configuration key, e.g. h_iters, eps, rho")
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--config", type=Path)
    w.add_argument("--steps", type=int)
    w.add_argument("--out", type=Path, help="write sweep.csv into this directory")
    return p


def _base_config(path: Path | None) -> ScenarioConfig:
    return load_config(path) if path is not None else ScenarioConfig()


def _cmd_simulate(args) -> int:
    cfg = _base_config(args.config).with_overrides(solver=args.solver, seed=args.seed, steps=args.steps)
    trace = run(cfg)
    paths = export(trace, args.out)
    final = trace.err_state_norm[-1] if trace.steps else float("nan")
    print(
        f"{cfg.solver} seed={cfg.seed} steps={trace.steps} "
        f"final |x~|={final:.6g} wall={trace.wall_time:.2f}s -> {paths['trace']}"
    )
    return 0


def _cmd_analyze(args) -> int:
    cfg = load_run_config(args.trace)
    report, trace = analyze_run(cfg, steps=args.steps, n_operators=args.operators)
    write_json(report, args.trace / "analysis.json")
    summary_path = args.trace / SUMMARY_FILE
    if summary_path.exists():
        summary = read_json(summary_path)
        summary["analysis"] = verdict(report)
        write_json(summary, summary_path)
    ly = report.get("lyapunov", {})
    print(f"analysed {trace.steps} steps of {cfg.solver}: lyapunov max ratio {ly.get('max_ratio', float('nan')):.6g}"
          f" (gamma {ly.get('gamma', float('nan')):.6g})")
    for key, val in verdict(report).items():
        print(f"  {key}: {val}")
    return 0


def _cmd_sweep(args) -> int:
    base = _base_config(args.config).with_overrides(steps=args.steps)
    name = PARAM_ALIASES.get(args.param, args.param)
    if name not in base.to_dict():
        raise ConfigError(f"unknown sweep parameter '{args.param}'")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    header = (name, "final_err_state_norm", "mean_err_corr_norm", "final_dist_qeq", "wall_time")
    rows = []
    for raw in values:
        cfg = base.with_overrides(**{name: coerce_value(name, raw)})
        tr = run(cfg)
        tail = tr.err_corr_norm[100:] if tr.steps > 100 else tr.err_corr_norm
        rows.append(
            (
                raw,
                "%.6g" % (tr.err_state_norm[-1] if tr.steps else float("nan")),
                "%.6g" % (np.mean(tail) if len(tail) else float("nan")),
                "%.6g" % (tr.dist_qeq[-1] if tr.steps else float("nan")),
                "%.2f" % tr.wall_time,
            )
        )
    widths = [max(len(str(r[j])) for r in (header, *rows)) for j in range(len(header))]
    for r in (header, *rows):
        print("  ".join(str(c).rjust(wd) for c, wd in zip(r, widths)))
    if args.out is not None:
        try:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "sweep.csv").write_text("\n".join(",".join(r) for r in (header, *rows)) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write sweep table to '{args.out}': {exc.strerror or exc}") from exc
    return 0


COMMANDS = {"simulate": _cmd_simulate, "analyze": _cmd_analyze, "sweep": _cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    """Run the CLI and return the exit status (2 for usage errors)."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return COMMANDS[args.command](args)
    except DkobsError as exc:
        print(f"dkobs {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
