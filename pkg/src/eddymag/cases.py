"""Run one configured case end to end, and refinement studies over several levels.

Layout of a run directory::

    <out>/<run name>/records.csv      one row per time step
    <out>/<run name>/errors.csv       per-step oracle errors (if enabled)
    <out>/<run name>/config.ini       the fully expanded configuration
    <out>/<run name>/snapshots/*.vtk  cell fields at the requested times
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .analytic import EddyCylinderSolution, StaticCylinderSolution
from .config import RunConfig, serialize_config
from .driver import StepRecord, StepState, TwoStepSolver
from .fem import Discretization
from .mesh import MU0, Mesh, build_cylinder_mesh
from .post import (
    CrossSection,
    CylinderOracle,
    ErrorReport,
    cell_fields,
    convergence_slope,
    cross_section_error,
    curl_seminorm_error,
    period_average,
    volume_error_l2,
    write_csv,
    write_vtk,
)

log = logging.getLogger(__name__)


@dataclass
class CaseResult:
    config: RunConfig
    mesh: Mesh
    records: list[StepRecord]
    times: np.ndarray
    volume_errors: dict = field(default_factory=dict)  # name -> (err, ref) arrays
    plane_errors: dict = field(default_factory=dict)  # plane name -> (err, ref) arrays
    snapshots: dict = field(default_factory=dict)
    out_dir: Path | None = None

    @property
    def n_elements(self) -> int:
        return self.mesh.n_tets

    def integrated_error(self, name: str) -> tuple[float, float]:
        """Last-period ``sqrt(int e^2 dt)`` of the error and of the reference."""
        err, ref = self.volume_errors[name]
        period = self.config.excitation.time_unit
        return _integrate(err, self.times, period), _integrate(ref, self.times, period)

    def relative_error(self, name: str) -> float:
        e, r = self.integrated_error(name)
        return e / r

    def plane_error(self, plane: str, relative: bool = True) -> float:
        """Last-period average of the cross-section error."""
        err, ref = self.plane_errors[plane]
        e = err / ref if relative else err
        return period_average(e, self.times, self.config.excitation.time_unit)

    def report(self) -> ErrorReport:
        el2, nl2 = self.integrated_error("l2")
        ec, nc = self.integrated_error("curl")
        return ErrorReport(self.config.name, self.n_elements, el2, ec, nl2, nc)


def _integrate(values, times, period):
    v = np.asarray(values)
    t = np.asarray(times)
    sel = t >= t[-1] - period * (1 + 1e-9)
    return math.sqrt(float(np.trapezoid(v[sel] ** 2, t[sel])))


def _segment_at(cfg: RunConfig, z: float, side: str):
    edges = np.cumsum([0.0] + [s.length for s in cfg.geometry.segments])
    probe = z + 1e-9 * edges[-1] * (1 if side == "above" else -1)
    k = int(np.clip(np.searchsorted(edges, probe) - 1, 0, len(cfg.geometry.segments) - 1))
    return cfg.geometry.segments[k]


def segment_oracle(cfg: RunConfig, segment) -> CylinderOracle:
    """Analytic reference for an infinite cylinder made of ``segment``'s material."""
    mat = cfg.materials[segment.material_id]
    exc = cfg.excitation
    radius = cfg.geometry.core_radius
    if segment.eddy and exc.frequency > 0:
        # I1(t) = Re(-I0 exp(i w t))
        sol = EddyCylinderSolution(radius, mat.mu, mat.sigma, exc.omega, -exc.amplitude, mu_out=MU0)
        return CylinderOracle(sol, exc.omega)
    sol = StaticCylinderSolution(radius, mat.mu, 1.0, mu_out=MU0)
    return CylinderOracle(sol, current_at=exc.current)


class _ErrorObserver:
    def __init__(self, disc: Discretization, cfg: RunConfig):
        self.disc = disc
        self.volume = {}
        self.planes = {}
        self.sections = {}
        segs = cfg.geometry.segments
        self.volume_oracle = segment_oracle(cfg, segs[0]) if len(segs) == 1 else None
        for name, z in cfg.outputs.planes:
            sec = CrossSection(disc, z)
            side = "above" if np.any(disc.mesh.centroids()[sec.cells, 2] > sec.z) else "below"
            self.sections[name] = (sec, segment_oracle(cfg, _segment_at(cfg, sec.z, side)))
            self.planes[name] = ([], [])
        if self.volume_oracle is not None:
            self.volume = {"l2": ([], []), "curl": ([], [])}

    def __call__(self, state: StepState) -> None:
        if self.volume_oracle is not None:
            for key, fn in (("l2", volume_error_l2), ("curl", curl_seminorm_error)):
                e, r = fn(self.disc, state, self.volume_oracle)
                self.volume[key][0].append(e)
                self.volume[key][1].append(r)
        for name, (sec, oracle) in self.sections.items():
            e, r = cross_section_error(sec, state, oracle)
            self.planes[name][0].append(e)
            self.planes[name][1].append(r)

    @staticmethod
    def _arrays(d):
        return {k: (np.array(e), np.array(r)) for k, (e, r) in d.items()}


def _write_errors(path: Path, times, volume: dict, planes: dict) -> None:
    cols = ["t"]
    data = [times]
    for k, (e, r) in volume.items():
        cols += [f"e_{k}", f"norm_{k}"]
        data += [e, r]
    for k, (e, r) in planes.items():
        cols += [f"e_{k}", f"norm_{k}"]
        data += [e, r]
    with path.open("w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in zip(*data):
            w.writerow([f"{v:.17g}" for v in row])


def run_case(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    periods: int | None = None,
    observers: tuple = (),
) -> CaseResult:
    """Mesh, discretize, march and post-process one configuration.

    ``periods`` overrides the configured number of periods (quick runs).  With
    ``out_dir`` the files listed in the module docstring are written under
    ``out_dir / cfg.name``.
    """
    if periods is not None:
        cfg = replace(cfg, excitation=replace(cfg.excitation, periods=periods))
    mesh = build_cylinder_mesh(cfg.geometry, cfg.materials)
    disc = Discretization(mesh, cfg.materials)
    solver = TwoStepSolver(mesh, cfg.materials, cfg.excitation, cfg.solver, disc=disc)
    errs = _ErrorObserver(disc, cfg) if cfg.outputs.oracle else None
    obs = list(observers) + ([errs] if errs else [])
    log.info("%s: %d tets, %d edges, %d steps", cfg.name, mesh.n_tets, mesh.n_edges, cfg.excitation.n_steps)
    records, snaps = solver.run(observers=obs, snapshot_times=cfg.outputs.vtk_times)
    times = np.array([r.t for r in records])
    res = CaseResult(cfg, mesh, records, times, snapshots=snaps)
    if errs:
        res.volume_errors = errs._arrays(errs.volume)
        res.plane_errors = errs._arrays(errs.planes)
    if out_dir is not None:
        run_dir = Path(out_dir) / cfg.name
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.ini").write_text(serialize_config(cfg), encoding="ascii")
        write_csv(records, run_dir / cfg.outputs.csv)
        if errs and (res.volume_errors or res.plane_errors):
            _write_errors(run_dir / cfg.outputs.errors, times, res.volume_errors, res.plane_errors)
        if snaps:
            snap_dir = run_dir / "snapshots"
            snap_dir.mkdir(exist_ok=True)
            for t, state in sorted(snaps.items()):
                write_vtk(
                    mesh,
                    snap_dir / f"step_{state.n:05d}.vtk",
                    vectors=cell_fields(disc, state),
                    sigma=disc.sigma,
                    title=f"{cfg.name} t={t:.9g}",
                )
        res.out_dir = run_dir
    return res


@dataclass
class ConvergenceTable:
    reports: list[ErrorReport]
    slope_l2: float | None
    slope_curl: float | None

    def write(self, path) -> None:
        with Path(path).open("w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mesh_id", "n_elements", "e_l2", "e_curl", "rel_l2", "rel_curl"])
            for r in self.reports:
                w.writerow([r.mesh_id, r.n_elements] + [f"{v:.17g}" for v in (r.e_l2, r.e_curl, r.rel_l2, r.rel_curl)])
            fmt = lambda s: "unavailable" if s is None else f"{s:.6f}"
            w.writerow(["slope", "", "", "", fmt(self.slope_l2), fmt(self.slope_curl)])


def _slopes(reports):
    if len(reports) < 2:
        return None, None
    n = [r.n_elements for r in reports]
    return convergence_slope(n, [r.rel_l2 for r in reports]), convergence_slope(n, [r.rel_curl for r in reports])


def convergence_study(
    make_config: Callable[[int], RunConfig],
    levels,
    out_dir: str | Path | None = None,
    runner: Callable[[RunConfig], ErrorReport] | None = None,
) -> ConvergenceTable:
    """Run every level and fit ``log(rel. error)`` against ``log N``.

    ``runner`` replaces the full simulation (it maps a config to an
    :class:`ErrorReport`).  The table is rewritten after each level, so a
    failing level leaves the completed rows on disk before the error propagates.
    """
    reports = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for level in levels:
        cfg = make_config(level)
        if runner is None:
            res = run_case(cfg, out)
            rep = res.report()
        else:
            rep = runner(cfg)
        reports.append(rep)
        table = ConvergenceTable(reports, *_slopes(reports))
        if out is not None:
            table.write(out / "convergence.csv")
    return ConvergenceTable(reports, *_slopes(reports))
