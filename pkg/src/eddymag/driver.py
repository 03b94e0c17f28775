"""Time loop of the two-step scheme.

Each step first solves the stationary conduction problem for the scalar
potential with the full port current imposed, then the vector-potential
correction with zero port current, backward Euler on the first step and BDF2
afterwards.  Port potentials, fluxes and powers are extracted per step.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields
from typing import Callable, Iterable

import numpy as np

from .fem import Discretization
from .mesh import INSULATOR, PORT1, PORT2, MaterialTable, Mesh
from .solvers import KernelProjector, SolverError, SPDFactor, cg_solve, regularized_factor

log = logging.getLogger(__name__)

ZERO_CROSSING_MASK = 0.05


@dataclass(frozen=True)
class ExcitationSpec:
    """``I1(t) = I0 cos(w t + pi)``; with ``frequency = 0`` the current is the constant ``-I0``.

    For a constant excitation ``period`` sets the time unit that replaces the
    period (end time ``periods * period``, step ``period / steps_per_period``).
    """

    amplitude: float = 1.0
    frequency: float = 50.0
    periods: int = 7
    steps_per_period: int = 50
    period: float | None = None

    def __post_init__(self):
        if self.frequency < 0:
            raise ValueError("frequency must be non-negative")
        if self.periods < 1 or self.steps_per_period < 1:
            raise ValueError("need at least one period and one step per period")
        if self.frequency == 0 and not self.period:
            raise ValueError("a constant excitation needs an explicit period")

    @property
    def omega(self) -> float:
        return 2 * np.pi * self.frequency

    @property
    def time_unit(self) -> float:
        return self.period if self.period else 1.0 / self.frequency

    @property
    def dt(self) -> float:
        return self.time_unit / self.steps_per_period

    @property
    def n_steps(self) -> int:
        return self.periods * self.steps_per_period

    @property
    def end_time(self) -> float:
        return self.periods * self.time_unit

    def current(self, t):
        return self.amplitude * np.cos(self.omega * np.asarray(t) + np.pi)


@dataclass
class SolverOptions:
    method: str = "cg"
    tol: float = 1e-10
    max_iter: int = 500
    precond: str = "factorized"
    regularization: float = 1e-10

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"solver tolerance must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.method not in ("cg",):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.precond not in ("factorized", "diagonal", "symmetric-sweep", "none"):
            raise ValueError(f"unknown preconditioner {self.precond!r}")


@dataclass
class StepRecord:
    t: float
    I1: float
    I1_dc: float
    I1_ec: float
    V1_dc: float
    V1_ec: float
    U_sum: float
    P_ohm: float
    P_mag: float
    P_total: float
    U_power: float  # nan where masked
    I2_dc: float = 0.0
    W1: float = 0.0
    cg_iterations: int = 0
    kernel_norm: float = 0.0

    @property
    def V1(self) -> float:
        return self.V1_dc + self.V1_ec


RECORD_COLUMNS = ("t", "I1", "I1_dc", "I1_ec", "V1_dc", "V1_ec", "U_sum", "P_ohm", "P_mag", "P_total", "U_power")


@dataclass
class StepState:
    """Fields after step ``n``; edge vectors are full (unconstrained) coefficients."""

    n: int
    t: float
    current: float
    phi: np.ndarray
    v1_dc: float
    a: np.ndarray
    dadt: np.ndarray
    w1: float
    v1_ec: float


def bdf_weights(step: int, dt: float):
    """Coefficients ``(c0, c1, c2)`` of ``dX/dt ~ c0 X^n + c1 X^{n-1} + c2 X^{n-2}``.

    The first step (``step == 1``) is backward Euler, later steps BDF2.
    """
    if step < 1:
        raise ValueError("time derivative needs at least one history value")
    if step == 1:
        return 1.0 / dt, -1.0 / dt, 0.0
    return 1.5 / dt, -2.0 / dt, 0.5 / dt


def v_ec(w_history: Iterable[float], dt: float) -> float:
    """Port-1 correction voltage as the time derivative of W1.

    ``w_history`` holds ``W^0 .. W^n`` (``W^0`` being the initial value); the
    same BE/BDF2 switch as for the fields is applied.
    """
    w = list(w_history)
    n = len(w) - 1
    c0, c1, c2 = bdf_weights(n, dt)
    out = c0 * w[-1] + c1 * w[-2]
    if n > 1:
        out += c2 * w[-3]
    return out


def reconstruct_voltage(p_total, current, amplitude: float, threshold: float = ZERO_CROSSING_MASK):
    """``P_total / I1`` where ``|I1| >= threshold * I0``, NaN otherwise."""
    p = np.asarray(p_total, dtype=float)
    i = np.asarray(current, dtype=float)
    ok = np.abs(i) >= threshold * abs(amplitude)
    out = np.full(np.broadcast(p, i).shape, np.nan)
    np.divide(p, i, out=out, where=ok)
    return out if out.ndim else float(out)


class TwoStepSolver:
    """Holds the discretization, factorizations and histories of one run."""

    def __init__(
        self,
        mesh: Mesh,
        materials: MaterialTable,
        excitation: ExcitationSpec,
        options: SolverOptions | None = None,
        disc: Discretization | None = None,
    ):
        self.mesh = mesh
        self.materials = materials
        self.excitation = excitation
        self.options = options or SolverOptions()
        self.disc = disc or Discretization(mesh, materials)
        self._unit_phi = None
        self._step2 = {}
        self._projector = None
        air = mesh.cell_class == INSULATOR
        edges_touching_conductor = np.zeros(mesh.n_edges, dtype=bool)
        edges_touching_conductor[mesh.tet_edges[~air].ravel()] = True
        self._air_edges = ~edges_touching_conductor

    # -- step 1 -------------------------------------------------------------
    def unit_dc_solution(self):
        """Potential and Port1 value for a 1 A Port1 current (factorized once)."""
        if self._unit_phi is None:
            d = self.disc
            mat = d.step1_matrix()
            try:
                x = SPDFactor(mat).solve(d.step1_rhs(1.0))
            except SolverError as exc:
                raise SolverError(f"DC-conduction system is singular: {exc}") from exc
            self._unit_phi = (d.nodal.expand(x), float(x[-1]))
        return self._unit_phi

    def dc_step(self, t: float):
        phi, v1 = self.unit_dc_solution()
        current = float(self.excitation.current(t))
        return current * phi, current * v1

    # -- step 2 -------------------------------------------------------------
    def _step2_operator(self, c0: float):
        key = round(c0 * self.excitation.dt, 12)
        if key not in self._step2:
            mat = self.disc.step2_matrix(c0)
            opts = self.options
            if opts.precond == "factorized":
                pre = regularized_factor(mat, opts.regularization)
            else:
                pre = opts.precond
            self._step2[key] = (mat, self.projector.wrap(pre, mat, commuting=opts.precond == "factorized"))
        return self._step2[key]

    @property
    def projector(self) -> KernelProjector:
        if self._projector is None:
            self._projector = KernelProjector(self.disc.step2_kernel())
        return self._projector

    def ec_step(self, n: int, phi: np.ndarray, history: list):
        """Solve the correction for step ``n`` given full edge vectors ``A^{n-1}, A^{n-2}``.

        Returns the reduced solution, the full edge vector and ``dA/dt``.
        """
        dt = self.excitation.dt
        c0, c1, c2 = bdf_weights(n, dt)
        hist = c1 * history[-1]
        if n > 1:
            hist = hist + c2 * history[-2]
        mat, pre = self._step2_operator(c0)
        # the exact load is orthogonal to the null space; drop the round-off part
        rhs = self.projector(self.disc.step2_source(phi) - self.disc.step2_history(hist))
        z, report = cg_solve(mat, rhs, tol=self.options.tol, precond=pre, max_iter=self.options.max_iter)
        a = self.disc.full_edge(z)
        return z, a, c0 * a + hist, report

    # -- post ---------------------------------------------------------------
    def powers(self, state: StepState):
        d = self.disc
        p_ohm = d.ohmic_power(state.phi, state.dadt)
        p_mag = d.magnetic_power(state.a, state.dadt)
        return p_ohm, p_mag, p_ohm + p_mag

    def run(
        self,
        observers: Iterable[Callable[[StepState], None]] = (),
        snapshot_times: Iterable[float] = (),
    ):
        """March over all steps; returns the records and ``{t: StepState}`` snapshots."""
        exc = self.excitation
        dt = exc.dt
        observers = list(observers)
        snap_steps = {int(round(ts / dt)) for ts in snapshot_times}
        d = self.disc
        history = [np.zeros(self.mesh.n_edges)]
        w_hist = [0.0]
        records = []
        snapshots = {}
        t_start = time.perf_counter()
        for n in range(1, exc.n_steps + 1):
            t = n * dt
            phi, v1_dc = self.dc_step(t)
            try:
                z, a, dadt, report = self.ec_step(n, phi, history)
            except SolverError as err:
                raise SolverError(f"step {n} (t = {t:.6g} s): {err}", err.report) from err
            w1 = float(z[-1])
            w_hist.append(w1)
            v1_ec = v_ec(w_hist, dt)
            state = StepState(n, t, float(exc.current(t)), phi, v1_dc, a, dadt, w1, v1_ec)
            p_ohm, p_mag, p_tot = self.powers(state)
            u_sum = -(v1_dc + v1_ec)  # Port2 is grounded
            rec = StepRecord(
                t=t,
                I1=state.current,
                I1_dc=d.port_flux_dc(phi, PORT1),
                I1_ec=d.port_flux_ec(dadt, PORT1),
                V1_dc=v1_dc,
                V1_ec=v1_ec,
                U_sum=u_sum,
                P_ohm=p_ohm,
                P_mag=p_mag,
                P_total=p_tot,
                U_power=reconstruct_voltage(p_tot, state.current, exc.amplitude),
                I2_dc=d.port_flux_dc(phi, PORT2),
                W1=w1,
                cg_iterations=report.iterations,
                kernel_norm=float(np.max(np.abs(a[self._air_edges]), initial=0.0)),
            )
            records.append(rec)
            for obs in observers:
                obs(state)
            if n in snap_steps:
                snapshots[t] = state
            history = [history[-1], a]
            w_hist = w_hist[-2:]
        log.info("%d steps in %.1f s", exc.n_steps, time.perf_counter() - t_start)
        return records, snapshots


def records_array(records: list[StepRecord], columns=RECORD_COLUMNS) -> dict:
    return {c: np.array([getattr(r, c) for r in records]) for c in columns}


def record_fields() -> tuple:
    return tuple(f.name for f in fields(StepRecord))
