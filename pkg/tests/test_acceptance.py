"""Acceptance criteria 1-8, each at its stated tolerance.

Every test prints one ``CRITERION n: PASS|FAIL`` line.  The full simulations
(three refinement levels of three test cases) take roughly 45 minutes on one
core; they are cached per module so each configuration runs once.
"""
import math

import mpmath
import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import roots_legendre

from eddymag.analytic import EddyCylinderSolution, bessel_j0, bessel_j1
from eddymag.cases import run_case
from eddymag.config import preset_config
from eddymag.driver import ExcitationSpec, TwoStepSolver, records_array
from eddymag.fem import Discretization
from eddymag.mesh import IRON_ID, MU0, build_cylinder_mesh
from eddymag.post import convergence_slope
from eddymag.solvers import SPDFactor

pytestmark = pytest.mark.slow

LEVELS = (0, 1, 2)
_cases = {}


def case(preset, level, cylinder=None):
    key = (preset, level, cylinder)
    if key not in _cases:
        _cases[key] = run_case(preset_config(preset, level, cylinder))
    return _cases[key]


@pytest.fixture
def verdict(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return say


def final_period(res):
    t = res.times
    return t >= t[-1] - res.config.excitation.time_unit * (1 + 1e-9)


def rms(x):
    return math.sqrt(float(np.mean(np.square(x))))


def test_criterion1_spatial_convergence(verdict):
    runs = [case(1, k) for k in LEVELS]
    n = [r.n_elements for r in runs]
    rel_l2 = [r.relative_error("l2") for r in runs]
    rel_curl = [r.relative_error("curl") for r in runs]
    s_l2 = convergence_slope(n, rel_l2)
    s_curl = convergence_slope(n, rel_curl)
    ok = -0.45 <= s_l2 <= -0.22 and -0.45 <= s_curl <= -0.22
    verdict(1, ok, f"N={n} slope_l2={s_l2:.3f} slope_curl={s_curl:.3f} (band [-0.45, -0.22])")


def test_criterion2_oracle_integrity(verdict):
    mpmath.mp.dps = 40
    rng = np.random.default_rng(2024)
    z = 15 * np.sqrt(rng.random(50)) * np.exp(2j * np.pi * rng.random(50))
    worst = 0.0
    for zz in z:
        for fn, order in ((bessel_j0, 0), (bessel_j1, 1)):
            ref = complex(mpmath.besselj(order, mpmath.mpc(zz.real, zz.imag)))
            worst = max(worst, abs(fn(zz) - ref) / abs(ref))

    R, w = 3e-3, 2 * math.pi * 50
    x, wq = roots_legendre(200)
    r = 0.5 * R * (x + 1)
    cur_err = h_err = 0.0
    for mu, sigma in ((1500 * MU0, 1e7), (MU0, 6e7)):
        sol = EddyCylinderSolution(R, mu, sigma, w, 1.0, mu_out=MU0)
        total = 0.5 * R * np.sum(wq * sol.fields(r)[0] * 2 * math.pi * r)
        cur_err = max(cur_err, abs(total - 1.0))
        _, b_in = sol.fields(R)
        _, b_out = sol.fields(R * (1 + 1e-15))
        # closed form on both sides is I / (2 pi R)
        h_err = max(h_err, abs(b_in / mu - 1 / (2 * math.pi * R)) * 2 * math.pi * R)
        h_err = max(h_err, abs(b_out / MU0 - b_in / mu) / abs(b_in / mu))
    ok = worst <= 1e-10 and cur_err <= 1e-8 and h_err <= 1e-12
    verdict(2, ok, f"bessel {worst:.1e} <= 1e-10, current {cur_err:.1e} <= 1e-8, H jump {h_err:.1e} <= 1e-12")


def test_criterion3_power_identity(verdict):
    worst = 0.0
    for k in LEVELS:
        res = case(1, k)
        r = records_array(res.records, ("P_total", "U_sum", "I1"))
        sel = final_period(res)
        i0 = res.config.excitation.amplitude
        keep = sel & (np.abs(r["I1"]) >= 0.05 * abs(i0))
        gap = np.abs(r["P_total"] - r["U_sum"] * r["I1"])[keep]
        worst = max(worst, gap.max() / np.abs(r["P_total"][sel]).max())
    verdict(3, worst <= 0.01, f"max |P_total - U_sum I1| / max|P_total| = {worst:.2e} <= 1e-2")


def test_criterion4_voltage_reconstruction(verdict):
    tc2 = case(2, 2, 2)
    tc3 = case(3, 2, 2)
    a = records_array(tc2.records, ("U_sum",))
    b = records_array(tc3.records, ("U_sum", "U_power"))
    sel = final_period(tc2)
    ref = rms(a["U_sum"][sel])
    keep = sel & ~np.isnan(b["U_power"])
    dev = rms((b["U_power"] - a["U_sum"])[keep]) / rms(a["U_sum"][keep])
    naive = rms((b["U_sum"] - a["U_sum"])[sel]) / ref
    ok = dev <= 0.05 and naive > 0.20
    verdict(4, ok, f"U_power(tc3) vs U_sum(tc2) {dev:.3f} <= 0.05; naive U_sum(tc3) differs by {naive:.3f} > 0.20")


def test_criterion5_cross_sections(verdict):
    # Copper eddy currents induced at the iron/copper planes decay axially over
    # about R / 3.83, so the copper mid-plane of C1 and C2 (2 and 4 mm from the
    # interfaces) still sees them.  The length comparison uses C3 and C4.
    lines, ok = [], True
    for preset in (2, 3):
        for plane in ("iron_port", "copper_mid"):
            errs = [case(preset, k, 2).plane_error(plane) for k in LEVELS]
            dec = all(b < a for a, b in zip(errs, errs[1:]))
            ok &= dec
            short = case(preset, 0, 3).plane_error(plane)
            long_ = case(preset, 0, 4).plane_error(plane)
            agree = abs(short - long_) <= 0.10 * max(short, long_)
            ok &= agree
            lines.append(
                f"tc{preset} {plane} C2 L0-L2 " + ">".join(f"{e:.4f}" for e in errs)
                + f", L0 C3/C4 {short:.4f}/{long_:.4f} (C2 {errs[0]:.4f})"
            )
    verdict(5, ok, "; ".join(lines))


def test_criterion6_structural_invariants(verdict):
    cfg1, cfg3 = preset_config(1), preset_config(3)
    d1 = Discretization(build_cylinder_mesh(cfg1.geometry), cfg1.materials)
    d3 = Discretization(build_cylinder_mesh(cfg3.geometry), cfg3.materials)
    rng = np.random.default_rng(6)
    checks = {}

    g = d1.edge.gradient @ rng.normal(size=d1.mesh.n_nodes)
    checks["curl grad"] = np.abs(d1.curlcurl @ g).max() / (abs(d1.curlcurl).max() * np.abs(g).max())

    a = d1.edge.constraint @ rng.normal(size=d1.edge.n_constrained)
    n = d1.mesh.n_nodes
    key = {e: k for k, e in enumerate(d1.mesh.edges[:, 0] * n + d1.mesh.edges[:, 1])}
    circ = 0.0
    for f in d1.mesh.boundary_faces:
        p, q, s = sorted(f)
        circ = max(circ, abs(a[key[p * n + q]] + a[key[q * n + s]] - a[key[p * n + s]]))
    checks["boundary circulation"] = circ / np.abs(a).max()

    comp = 0.0
    for d in (d1, d3):
        x = SPDFactor(d.step1_matrix()).solve(d.step1_rhs(1.0))
        b = d.step2_source(d.nodal.expand(x))
        k = d.step2_kernel()
        comp = max(comp, (np.abs(k.T @ b) / (sp.linalg.norm(k, axis=0) * np.linalg.norm(b))).max())
    checks["rhs compatibility"] = comp

    alt = rng.random(d3.mesh.n_nodes)
    alt[d3.nodal.port1], alt[d3.nodal.port2] = 1.0, 0.0
    d3b = Discretization(d3.mesh, cfg3.materials, phi1=alt)
    x0 = SPDFactor(d3.step1_matrix()).solve(d3.step1_rhs(1.0))
    x1 = SPDFactor(d3b.step1_matrix()).solve(d3b.step1_rhs(1.0))
    p0, p1 = d3.nodal.expand(x0), d3b.nodal.expand(x1)
    seen = np.zeros(d3.mesh.n_nodes, dtype=bool)
    seen[d3.mesh.tets[d3.sigma > 0].ravel()] = True
    checks["phi1 invariance"] = max(abs(x1[-1] - x0[-1]) / abs(x0[-1]), np.abs(p1 - p0)[seen].max() / np.abs(p0).max())

    def run(d, amp):
        exc = ExcitationSpec(amplitude=amp, periods=1, steps_per_period=20)
        states = []
        recs, _ = TwoStepSolver(d.mesh, d.materials, exc, disc=d).run(observers=[states.append])
        return recs, states

    rp, sp_ = run(d1, 1.0)
    rn, sn = run(d1, -1.0)
    rs, ss = run(d1, 3.0)
    checks["charge"] = max(abs(r.I1_dc + r.I2_dc) for r in rp)
    scale = max(np.abs(s.a).max() for s in sp_)
    checks["sign flip"] = max(np.abs(a.a + b.a).max() for a, b in zip(sp_, sn)) / scale
    checks["scaling"] = max(np.abs(c.a - 3 * a.a).max() for a, c in zip(sp_, ss)) / (3 * scale)

    limits = {
        "curl grad": 1e-12,
        "boundary circulation": 1e-13,
        "rhs compatibility": 1e-10,
        "phi1 invariance": 1e-10,
        "charge": 1e-9,
        # solver tolerance is 1e-10 relative residual
        "sign flip": 1e-8,
        "scaling": 1e-8,
    }
    ok = all(checks[k] <= v for k, v in limits.items())
    verdict(6, ok, ", ".join(f"{k} {checks[k]:.1e}<={limits[k]:.0e}" for k in limits))


def test_criterion7_temporal_order(verdict):
    cfg = preset_config(1, 0)
    d = Discretization(build_cylinder_mesh(cfg.geometry), cfg.materials)

    def w_at_period_end(spp):
        exc = ExcitationSpec(periods=1, steps_per_period=spp)
        recs, _ = TwoStepSolver(d.mesh, cfg.materials, exc, disc=d).run()
        return recs[-1].W1

    coarse, fine, ref = (w_at_period_end(n) for n in (20, 40, 160))
    order = math.log2(abs(coarse - ref) / abs(fine - ref))
    verdict(7, order >= 1.7, f"W1(T) order {order:.2f} >= 1.7 (dt = T/20, T/40, reference T/160)")


def test_criterion8_static_limit(verdict):
    cfg = preset_config(1, 0)
    d = Discretization(build_cylinder_mesh(cfg.geometry), cfg.materials)
    iron = cfg.materials[IRON_ID]
    tau = iron.mu * iron.sigma * cfg.geometry.core_radius**2
    exc = ExcitationSpec(frequency=0.0, period=tau, periods=5, steps_per_period=50)
    last = []
    recs, _ = TwoStepSolver(d.mesh, cfg.materials, exc, disc=d).run(observers=[lambda s: last[:1].clear() or last.append(s)])
    st = last[-1]
    full = d.current_density(st.phi, st.dadt)
    dc = d.current_density(st.phi, np.zeros_like(st.dadt))
    w = d.vol[:, None] / 4.0
    rel = math.sqrt(np.sum(w * np.sum((full - dc) ** 2, -1)) / np.sum(w * np.sum(dc**2, -1)))
    r_dc = -recs[-1].V1_dc / recs[-1].I1
    p_gap = abs(recs[-1].P_ohm - recs[-1].I1 ** 2 * r_dc) / recs[-1].P_ohm
    ok = rel <= 1e-3 and p_gap <= 1e-3
    verdict(8, ok, f"||j - j_dc|| / ||j_dc|| = {rel:.1e} <= 1e-3 after 5 tau; P_ohm vs I^2 R_dc {p_gap:.1e}")
