"""Command line entry point: ``eddymag run | study | oracle``.

Heavy imports are deferred until the thread count is fixed, so ``--threads``
and ``--deterministic`` reach the BLAS and PARDISO thread pools.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "MKL_NUM_THREADS", "OPENBLAS_NUM_THREADS")


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eddymag", description="Two-step eddy-current solver for conductor cylinders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="configuration file")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--threads", type=int, default=None, help="thread count for BLAS and the sparse factorization")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, byte-reproducible output")

    run = sub.add_parser("run", parents=[common], help="run one case")
    run.add_argument("--periods", type=int, default=None, help="override the number of periods")

    study = sub.add_parser("study", parents=[common], help="refinement study over several levels")
    study.add_argument("--levels", default="0,1,2", help="comma-separated refinement levels")

    orc = sub.add_parser("oracle", help="radial profile of the analytic cylinder solution")
    orc.add_argument("--material", choices=("iron", "copper"), default="iron")
    orc.add_argument("--frequency", type=float, default=50.0)
    orc.add_argument("--current", type=float, default=1.0)
    orc.add_argument("--points", type=int, default=201)
    orc.add_argument("--out", default=None, help="CSV file (default: stdout)")
    return p


def _fail(stage: str, exc: Exception) -> int:
    msg = {"status": "error", "stage": stage, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(msg), file=sys.stderr)
    return 2 if stage == "config" else 1


def _load(path: str):
    from .config import parse_config

    return parse_config(Path(path).read_text(encoding="utf-8"))


def _cmd_run(args) -> int:
    from .cases import run_case

    try:
        cfg = _load(args.config)
    except (OSError, ValueError) as exc:
        return _fail("config", exc)
    try:
        res = run_case(cfg, args.out, periods=args.periods)
    except Exception as exc:  # reported, not swallowed: nonzero exit
        return _fail("run", exc)
    summary = {"status": "ok", "run": cfg.name, "dir": str(res.out_dir), "elements": res.n_elements, "steps": len(res.records)}
    if res.volume_errors:
        summary["rel_l2"] = res.relative_error("l2")
        summary["rel_curl"] = res.relative_error("curl")
    print(json.dumps(summary))
    return 0


def _cmd_study(args) -> int:
    from dataclasses import replace

    from .cases import convergence_study
    from .config import preset_config

    try:
        base = _load(args.config)
        levels = [int(v) for v in args.levels.split(",") if v.strip()]
        if base.preset != "1":
            raise ValueError("a convergence study needs preset 1 (the oracle covers the whole domain)")
    except (OSError, ValueError) as exc:
        return _fail("config", exc)

    def make(level):
        cfg = preset_config("1", level)
        return replace(cfg, excitation=base.excitation, solver=base.solver, materials=base.materials)

    try:
        table = convergence_study(make, levels, args.out)
    except Exception as exc:
        return _fail("study", exc)
    print(json.dumps({"status": "ok", "slope_l2": table.slope_l2, "slope_curl": table.slope_curl,
                      "table": str(Path(args.out) / "convergence.csv")}))
    return 0


def _cmd_oracle(args) -> int:
    import numpy as np

    from .analytic import EddyCylinderSolution, radial_profile
    from .config import default_materials, MATERIAL_NAMES
    from .mesh import CylinderSpec

    geom = CylinderSpec()
    mat = default_materials()[MATERIAL_NAMES[args.material]]
    sol = EddyCylinderSolution(geom.core_radius, mat.mu, mat.sigma, 2 * np.pi * args.frequency, args.current)
    table = radial_profile(sol, geom.outer_radius, args.points)
    header = "r,re_j,im_j,abs_j,re_B,im_B,abs_B"
    if args.out:
        np.savetxt(args.out, table, delimiter=",", header=header, comments="", fmt="%.17g")
    else:
        np.savetxt(sys.stdout, table, delimiter=",", header=header, comments="", fmt="%.17g")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command != "oracle":
        _set_threads(1 if args.deterministic else args.threads)
    return {"run": _cmd_run, "study": _cmd_study, "oracle": _cmd_oracle}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
