"""Command-line front end: ``stochbc <command> [--config FILE] [--out DIR] ...``.

Exit status is 0 when the run meets its targets, 2 when it ran but missed
a target, and 1 on any usage, configuration or runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__, config, harness
from .noise import build_tree, sample_ensemble

logger = logging.getLogger("stochbc")

COMMANDS = ("solve", "converge-tau", "converge-h", "converge-noise", "duality-check", "tree-vs-mc")
EXIT_OK, EXIT_ERROR, EXIT_MISSED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stochbc", description="Stochastic Neumann boundary control: solver and rate studies.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="TOML config file (defaults are used when omitted)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="override noise.seed")
    p.add_argument("--threads", type=int, help="cap on BLAS/worker threads")
    p.add_argument("--strict", action="store_true", help="reject unknown config keys instead of warning")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def _f(x) -> str:
    return repr(float(x))


def _cmd_solve(cfg, out: Path) -> tuple[bool, dict]:
    spec = harness._noise_spec(cfg)
    J = cfg["problem.J"]
    tau = cfg["problem.T"] / J
    if cfg["ce.kind"] == "tree":
        noise = build_tree(spec, J, tau, cfg["tree.m"], cfg["tree.budget"]).as_ensemble()
    else:
        noise = sample_ensemble(spec, J, tau, cfg["noise.samples"], cfg["noise.seed"])
    problem = harness.make_problem(cfg, cfg["problem.mesh_n"], J, noise, spec)
    U, report = harness.solve_problem(cfg, problem)
    _write_csv(out / "solve.csv", ["iteration", "cost", "residual"],
               [[k, _f(c), _f(r)] for k, (c, r) in enumerate(zip(report.costs, report.residuals))])
    mean = noise.mean(np.moveaxis(U.values, 1, 0))
    s = problem.ops.mesh.boundary_arclength
    _write_csv(out / "control_mean.csv", ["step", "dof", "s", "value"],
               [[j, k, _f(s[k]), _f(mean[j, k])] for j in range(J) for k in range(problem.ops.nb)])
    info = {"iterations": report.iterations, "cost": report.cost, "residual": report.residual,
            "step": report.step, "converged": report.converged}
    return report.converged, info


def _cmd_rates(tables, out: Path) -> tuple[bool, dict]:
    harness.write_rate_tables(tables, out)
    info = {t.study: {"fitted_order": t.fitted_order, "target_order": t.target_order, "pass": t.passed,
                      "flags": t.flags, "seconds": [r.seconds for r in t.rows]} for t in tables}
    return all(t.passed for t in tables), info


def _cmd_duality(cfg, out: Path) -> tuple[bool, dict]:
    rep = harness.duality_check(cfg)
    _write_csv(out / "duality.csv", ["mesh_n", "J", "pair", "lhs", "rhs", "relative_gap"],
               [[n, J, k, _f(a), _f(b), _f(g)] for n, J, k, a, b, g in rep["rows"]])
    return rep["passed"], {"max_relative_gap": rep["max_relative_gap"]}


def _cmd_tree(cfg, out: Path) -> tuple[bool, dict]:
    rep = harness.tree_vs_mc(cfg)
    _write_csv(out / "tree_vs_mc.csv", ["case", "samples", "gap"],
               [[c, n, _f(g)] for c, n, g in rep["rows"]])
    return rep["passed"], {"checks": rep["checks"], "tree_iterations": rep["tree_iterations"],
                           "tree_residual": rep["tree_residual"]}


def run(command: str, cfg: dict, out: Path) -> tuple[bool, dict]:
    """Execute ``command`` with a resolved config; returns (targets met, summary)."""
    out.mkdir(parents=True, exist_ok=True)
    if command == "solve":
        return _cmd_solve(cfg, out)
    if command == "converge-h":
        return _cmd_rates(harness.converge_control(cfg, "h"), out)
    if command == "converge-tau":
        return _cmd_rates(harness.converge_control(cfg, "tau"), out)
    if command == "converge-noise":
        return _cmd_rates([harness.converge_noise(cfg, "h"), harness.converge_noise(cfg, "tau")], out)
    if command == "duality-check":
        return _cmd_duality(cfg, out)
    if command == "tree-vs-mc":
        return _cmd_tree(cfg, out)
    raise UsageError(f"unknown command {command!r}")


def _resolve(args) -> dict:
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = config.load(args.config, strict=args.strict)
    else:
        cfg = config.resolve({}, strict=args.strict)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg["noise.seed"] = args.seed
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be at least 1")
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"stochbc: usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        started = datetime.now(timezone.utc).isoformat()
        t0 = time.perf_counter()
        with threadpool_limits(limits=args.threads):
            passed, summary = run(args.command, cfg, args.out)
        meta = {
            "command": args.command,
            "config": cfg,
            "seed": cfg["noise.seed"],
            "passed": passed,
            "summary": summary,
            "versions": {"stochbc": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "started": started,
            "seconds": time.perf_counter() - t0,
        }
        with open(args.out / "run.json", "w") as fh:
            json.dump(meta, fh, indent=2, default=str)
    except UsageError as exc:
        print(f"stochbc: usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (config.ConfigError, ValueError, FileNotFoundError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"stochbc: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if not passed:
        logger.warning("%s finished but missed its target; see %s", args.command, args.out / "run.json")
        return EXIT_MISSED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
