"""Error norms against the cylinder oracles, slopes, and CSV/VTK output.

The oracle current flows along the outward normal of Port1 (``-z``): a positive
Port1 current is current leaving the domain there.  All volume integrals use
the quadratic-exact 4-point rule, cross-section integrals the 3-point
triangle rule.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analytic import EddyCylinderSolution, StaticCylinderSolution, time_sample
from .driver import RECORD_COLUMNS, StepState
from .fem import Discretization
from .mesh import CLASS_NAMES, Mesh

AXIS = np.array([0.0, 0.0, -1.0])
TRI3 = np.full((3, 3), 1.0 / 6.0) + np.eye(3) * 0.5


class CylinderOracle:
    """Time-domain vector fields of an analytic cylinder solution.

    ``solution`` is an :class:`EddyCylinderSolution` (phasor current) or a
    :class:`StaticCylinderSolution`; the static one is scaled by the
    instantaneous Port1 current ``current_at(t)``.
    """

    def __init__(self, solution, omega: float = 0.0, current_at=None):
        self.solution = solution
        self.omega = omega
        self.current_at = current_at
        if isinstance(solution, StaticCylinderSolution) and current_at is None:
            raise ValueError("a static oracle needs the instantaneous current")

        self._cache = {}

    def _profile(self, r):
        # the same quadrature points are queried every step
        key = (r.shape, hash(r.tobytes()))
        hit = self._cache.get(key)
        if hit is None:
            if len(self._cache) > 8:
                self._cache.clear()
            hit = self._cache[key] = self.solution.fields(r)
        return hit

    def _radial(self, r, t):
        j, b = self._profile(r)
        if isinstance(self.solution, EddyCylinderSolution):
            return time_sample(j, self.omega, t), time_sample(b, self.omega, t)
        scale = self.current_at(t) / self.solution.current
        return j * scale, b * scale

    def fields(self, x: np.ndarray, t: float):
        """Current density and flux density vectors at points ``x (..., 3)``."""
        r = np.hypot(x[..., 0], x[..., 1])
        j, b = self._radial(r, t)
        jv = j[..., None] * AXIS
        safe = np.where(r > 0, r, 1.0)
        rhat = np.stack([x[..., 0] / safe, x[..., 1] / safe, np.zeros_like(r)], axis=-1)
        bv = b[..., None] * np.cross(AXIS, rhat)
        return jv, bv


@dataclass
class ErrorReport:
    mesh_id: str
    n_elements: int
    e_l2: float
    e_curl: float
    norm_l2: float
    norm_curl: float

    @property
    def rel_l2(self) -> float:
        return self.e_l2 / self.norm_l2

    @property
    def rel_curl(self) -> float:
        return self.e_curl / self.norm_curl


def _cells(disc: Discretization, region):
    if region is None:
        return np.arange(disc.mesh.n_tets)
    if isinstance(region, str) and region == "conductor":
        return np.flatnonzero(disc.sigma > 0)
    cells = np.asarray(region)
    if cells.dtype == bool:
        cells = np.flatnonzero(cells)
    return cells


def volume_error_l2(disc: Discretization, state: StepState, oracle: CylinderOracle, region="conductor", t=None):
    """``(||j_h - j||, ||j||)`` over ``region`` (default: conductive cells).

    ``state=None`` compares a zero field against the oracle at time ``t``.
    """
    cells = _cells(disc, region)
    if len(cells) == 0:
        raise ValueError("empty region")
    t = state.t if t is None else t
    x = disc.quad_points(cells)
    je, _ = oracle.fields(x, t)
    jh = disc.current_density(state.phi, state.dadt)[cells] if state is not None else np.zeros_like(je)
    w = disc.vol[cells][:, None] / 4.0
    err = math.sqrt(float(np.sum(w * np.sum((jh - je) ** 2, axis=-1))))
    ref = math.sqrt(float(np.sum(w * np.sum(je**2, axis=-1))))
    return err, ref


def curl_seminorm_error(disc: Discretization, state: StepState, oracle: CylinderOracle, region=None, t=None):
    """``(||curl A_h - B||, ||B||)``; by default over the whole domain."""
    cells = _cells(disc, region)
    if len(cells) == 0:
        raise ValueError("empty region")
    t = state.t if t is None else t
    bh = disc.cell_curl(state.a)[cells][:, None, :]
    x = disc.quad_points(cells)
    _, be = oracle.fields(x, t)
    w = disc.vol[cells][:, None] / 4.0
    err = math.sqrt(float(np.sum(w * np.sum((bh - be) ** 2, axis=-1))))
    ref = math.sqrt(float(np.sum(w * np.sum(be**2, axis=-1))))
    return err, ref


def period_integrated_error(errors, times, period: float) -> float:
    """``sqrt(int e(t)^2 dt)`` over the last ``period`` by the trapezoidal rule."""
    e = np.asarray(errors, dtype=float)
    t = np.asarray(times, dtype=float)
    if len(t) < 2 or t[-1] - t[0] < period * (1 - 1e-9):
        raise ValueError("fewer samples than one full period")
    sel = t >= t[-1] - period * (1 + 1e-9)
    return math.sqrt(float(np.trapezoid(e[sel] ** 2, t[sel])))


def period_average(values, times, period: float) -> float:
    v = np.asarray(values, dtype=float)
    t = np.asarray(times, dtype=float)
    if len(t) < 2 or t[-1] - t[0] < period * (1 - 1e-9):
        raise ValueError("fewer samples than one full period")
    sel = t >= t[-1] - period * (1 + 1e-9)
    return float(np.trapezoid(v[sel], t[sel]) / period)


class CrossSection:
    """Conductor faces lying on an axial plane, with their owning cells on one side."""

    def __init__(self, disc: Discretization, z: float, side: str = "auto"):
        mesh = disc.mesh
        planes = mesh.z_planes
        k = int(np.argmin(np.abs(planes - z)))
        if abs(planes[k] - z) > 1e-9 * (planes[-1] - planes[0]):
            raise ValueError(f"plane z = {z:g} is not aligned with a layer interface")
        z0 = planes[k]
        if side == "auto":
            side = "above" if k < len(planes) - 1 else "below"
        tol = 1e-9 * (planes[-1] - planes[0])
        on = np.abs(mesh.nodes[mesh.tets, 2] - z0) <= tol  # (m, 4)
        zc = mesh.centroids()[:, 2]
        pick = (on.sum(axis=1) == 3) & (disc.sigma > 0)
        pick &= zc > z0 if side == "above" else zc < z0
        self.cells = np.flatnonzero(pick)
        onp = on[self.cells]
        # barycentric coordinates of the face quadrature points in each cell
        bary = np.zeros((len(self.cells), 3, 4))
        face_nodes = np.zeros((len(self.cells), 3), dtype=int)
        for i, row in enumerate(onp):
            loc = np.flatnonzero(row)
            bary[i][:, loc] = TRI3
            face_nodes[i] = mesh.tets[self.cells[i], loc]
        p = mesh.nodes[face_nodes]
        self.area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
        self.bary = bary
        self.points = np.einsum("eqv,evk->eqk", bary, mesh.nodes[mesh.tets[self.cells]])
        self.z = z0
        self.disc = disc

    def current_density(self, state: StepState) -> np.ndarray:
        d = self.disc
        c = self.cells
        gp = np.einsum("ei,eik->ek", state.phi[d.mesh.tets[c]], d.grads[c])[:, None, :]
        da = d.edge_field_at(state.dadt, self.bary, c)
        da = np.where(d.eddy_cells[c][:, None, None], da, 0.0)
        return -d.sigma[c][:, None, None] * (gp + da)


def cross_section_error(section: CrossSection, state: StepState, oracle: CylinderOracle, t=None):
    """``(||j_h - j||, ||j||)`` over the conductor disk of the section plane."""
    t = state.t if t is None else t
    jh = section.current_density(state)
    je, _ = oracle.fields(section.points, t)
    w = section.area[:, None] / 3.0
    err = math.sqrt(float(np.sum(w * np.sum((jh - je) ** 2, axis=-1))))
    ref = math.sqrt(float(np.sum(w * np.sum(je**2, axis=-1))))
    return err, ref


def normalized_voltage(voltage, layers: int):
    if layers < 1:
        raise ValueError("layer count must be at least 1")
    return np.asarray(voltage) / layers if np.ndim(voltage) else voltage / layers


def convergence_slope(n_elements, errors) -> float:
    """Least-squares slope of ``log e`` against ``log N``."""
    n = np.asarray(n_elements, dtype=float)
    e = np.asarray(errors, dtype=float)
    if len(n) < 2:
        raise ValueError("need at least two points for a slope")
    if len(np.unique(n)) != len(n):
        raise ValueError("duplicate element counts")
    slope, _ = np.polyfit(np.log(n), np.log(e), 1)
    return float(slope)


def _fmt(v) -> str:
    return f"{v:.17g}"


def write_csv(records, path, columns=RECORD_COLUMNS) -> None:
    """Write step records (or any objects with the named attributes) as CSV."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for rec in records:
                w.writerow([_fmt(getattr(rec, c)) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> dict:
    with open(path, newline="", encoding="ascii") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(header)}


ERROR_COLUMNS = ("mesh_id", "n_elements", "e_l2", "e_curl", "rel_l2", "rel_curl")


def write_error_csv(reports, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ERROR_COLUMNS)
        for r in reports:
            w.writerow([r.mesh_id, r.n_elements] + [_fmt(getattr(r, c)) for c in ERROR_COLUMNS[2:]])


def cell_fields(disc: Discretization, state: StepState) -> dict:
    """Cell-centred j and B for export."""
    centre = np.full((1, 4), 0.25)
    return {
        "j": disc.current_density(state.phi, state.dadt, centre)[:, 0, :],
        "B": disc.cell_curl(state.a),
    }


def write_vtk(mesh: Mesh, path, vectors: dict | None = None, sigma: np.ndarray | None = None, title: str = "eddymag") -> None:
    """Legacy ASCII unstructured grid with tetrahedra (type 10) and cell data."""
    path = Path(path)
    n, m = mesh.n_nodes, mesh.n_tets
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.nodes]
    lines.append(f"CELLS {m} {5 * m}")
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.tets]
    lines.append(f"CELL_TYPES {m}")
    lines += ["10"] * m
    lines.append(f"CELL_DATA {m}")
    if mesh.cell_class is not None:
        lines += ["SCALARS region int 1", "LOOKUP_TABLE default"]
        lines += [str(int(c)) for c in mesh.cell_class]
    if sigma is not None:
        lines += ["SCALARS sigma double 1", "LOOKUP_TABLE default"]
        lines += [_fmt(s) for s in sigma]
    for name, vec in (vectors or {}).items():
        lines.append(f"VECTORS {name} double")
        lines += [f"{a:.17g} {b:.17g} {c:.17g}" for a, b, c in vec]
    try:
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def region_legend() -> str:
    return ", ".join(f"{k} = {v}" for k, v in CLASS_NAMES.items())
