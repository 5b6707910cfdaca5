"""Command-line front end: ``waitermpc {min-mu,simulate,compare-modes}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
from pydantic import ValidationError

from .minmu import MinMuError, MinMuProblem, solve_min_mu
from .ocp import Mode
from .scenario import load_scenario
from .simworld import run_scenario

log = logging.getLogger("waitermpc")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DROP = 2
EXIT_ABORT = 3
LOG_ENV = "WAITERMPC_LOG"


def _load(path):
    try:
        return load_scenario(path)
    except ValidationError as exc:
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            print(f"{path}: {loc}: {err['msg']}", file=sys.stderr)
        return None
    except (OSError, ValueError) as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return None


def cmd_min_mu(args) -> int:
    scn = _load(args.scenario)
    if scn is None:
        return EXIT_ERROR
    arr = scn.build_arrangement()
    if arr is None:
        print(f"{args.scenario}: scenario has no arrangement", file=sys.stderr)
        return EXIT_ERROR
    t0 = time.perf_counter()
    try:
        sol = solve_min_mu(MinMuProblem(arr))
    except MinMuError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    report = {
        "scenario": scn.name,
        "mu": dict(zip(arr.groups, np.round(sol.mu, 9).tolist())),
        "tilt_deg": {"roll": float(np.rad2deg(sol.theta[0])), "pitch": float(np.rad2deg(sol.theta[1]))},
        "object_tilt_deg": dict(zip([o.name for o in arr.objects], np.rad2deg(sol.object_tilts(arr)).tolist())),
        "witness_forces": np.asarray(sol.xi).reshape(-1, 3).tolist(),
        "objective": sol.objective,
        "kkt_residual": sol.kkt_residual,
        "converged": bool(sol.converged),
        "runtime_s": time.perf_counter() - t0,
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK if sol.converged else EXIT_ERROR


def _exit_code(run) -> int:
    if run.status == "abort":
        return EXIT_ABORT
    if run.drops:
        return EXIT_DROP
    return EXIT_OK


def cmd_simulate(args) -> int:
    scn = _load(args.scenario)
    if scn is None:
        return EXIT_ERROR
    try:
        cfg = scn.to_config(mode=args.mode, seed=args.seed, duration=args.duration, timing=args.timing)
    except ValueError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    run = run_scenario(cfg)
    csv_path, json_path = run.write(args.out, timing=args.timing)
    summary = run.summary()
    print(json.dumps({"csv": csv_path, "summary": json_path, "status": run.status, "drops": summary["drops"],
                      "convergence_time": summary["convergence_time"]}, indent=2))
    return _exit_code(run)


_TABLE_COLUMNS = ("mode", "status", "dropped", "convergence_time", "mean_compute_ms", "max_compute_ms", "max_fric_util")


def compare_modes(scn, seed=None, duration=None, out=None, timing=True) -> list[dict]:
    """Run every balancing mode on one scenario; errors end up in the rows."""
    rows = []
    for mode in Mode:
        row = {"mode": mode.value}
        try:
            cfg = scn.to_config(mode=mode, seed=seed, duration=duration, timing=timing)
            cfg.name = f"{scn.name}.{mode.value}"
            run = run_scenario(cfg)
            s = run.summary()
            if out is not None:
                run.write(out, timing=timing)
            row.update(
                status=run.status,
                dropped=bool(run.drops),
                drops=s["drops"],
                convergence_time=s["convergence_time"],
                mean_compute_ms=s["mean_compute_ms"],
                max_compute_ms=s["max_compute_ms"],
                max_fric_util=s["max_fric_util"],
                mean_fric_util=s["mean_fric_util"],
            )
        except Exception as exc:  # reported in the table, the other modes still run
            log.exception("mode %s failed", mode.value)
            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


def format_table(rows) -> str:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, bool):
            return "yes" if v else "no"
        if isinstance(v, float):
            return f"{v:.3f}"
        return str(v)

    cells = [list(_TABLE_COLUMNS)] + [[fmt(r.get(c)) for c in _TABLE_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(_TABLE_COLUMNS))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells)


def cmd_compare_modes(args) -> int:
    scn = _load(args.scenario)
    if scn is None:
        return EXIT_ERROR
    rows = compare_modes(scn, seed=args.seed, duration=args.duration, out=args.out, timing=not args.no_timing)
    print(format_table(rows))
    print(json.dumps(rows, indent=2))
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"{scn.name}.modes.json"), "w") as fh:
            json.dump(rows, fh, indent=2)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="waitermpc", description="Balancing MPC simulator for the waiter's problem.")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("min-mu", help="minimum statically-feasible friction of an arrangement")
    q.add_argument("scenario")
    q.set_defaults(func=cmd_min_mu)

    q = sub.add_parser("simulate", help="closed-loop run; writes <name>.csv and <name>.summary.json")
    q.add_argument("scenario")
    q.add_argument("--mode", choices=[m.value for m in Mode])
    q.add_argument("--seed", type=int)
    q.add_argument("--out", default=".")
    q.add_argument("--duration", type=float)
    q.add_argument("--timing", action="store_true", help="write wall-clock compute times (breaks byte-identical output)")
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("compare-modes", help="run all four balancing modes and tabulate")
    q.add_argument("scenario")
    q.add_argument("--seed", type=int)
    q.add_argument("--out")
    q.add_argument("--duration", type=float)
    q.add_argument("--no-timing", action="store_true")
    q.set_defaults(func=cmd_compare_modes)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
