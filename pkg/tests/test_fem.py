import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from eddymag.fem import (
    Discretization,
    assemble_step1,
    assemble_step2,
    elem_curlcurl,
    elem_edge_grad,
    elem_edge_mass,
    elem_p1_stiffness,
    tet_geometry,
)
from eddymag.mesh import (
    DEFAULT_MATERIALS,
    EDDY,
    INSULATOR,
    IRON_ID,
    COPPER_ID,
    PORT1,
    PORT2,
    STATIC,
    CylinderSpec,
    Material,
    MaterialTable,
    MeshError,
    Segment,
    build_cylinder_mesh,
)
from eddymag.solvers import SPDFactor

REF = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def duffy_rule(n=6):
    """Tensor Gauss rule on the unit tet via the collapsed-cube map."""
    x, w = np.polynomial.legendre.leggauss(n)
    x, w = 0.5 * (x + 1), 0.5 * w
    u, v, t = np.meshgrid(x, x, x, indexing="ij")
    wu, wv, wt = np.meshgrid(w, w, w, indexing="ij")
    px = u
    py = v * (1 - u)
    pz = t * (1 - u) * (1 - v)
    jac = (1 - u) ** 2 * (1 - v)
    return np.stack([px, py, pz], -1).reshape(-1, 3), (wu * wv * wt * jac).ravel()


def oracle_matrices(coords):
    """Mass and curl-curl by brute-force quadrature with explicitly written shape functions."""
    d = coords[1:] - coords[0]
    pts, wts = duffy_rule()
    phys = coords[0] + pts @ d
    jac = abs(np.linalg.det(d))
    # barycentric coordinates from the affine inverse
    lam123 = np.linalg.solve(d.T, (phys - coords[0]).T).T
    lam = np.column_stack([1 - lam123.sum(1), lam123])
    # lambda_i = c_i . (x, y, z, 1): gradients are the first rows of the inverse vertex matrix
    grad = np.linalg.inv(np.column_stack([coords, np.ones(4)]))[:3].T
    w = np.stack([lam[:, a, None] * grad[b] - lam[:, b, None] * grad[a] for a, b in PAIRS], 1)
    curl = np.stack([2 * np.cross(grad[a], grad[b]) for a, b in PAIRS])
    mass = jac * np.einsum("q,qik,qjk->ij", wts, w, w)
    cc = jac * wts.sum() * curl @ curl.T
    return mass, cc, grad, jac / 6


def test_p1_stiffness_reference():
    k = elem_p1_stiffness(REF, 1.0)
    expected = np.array([[3, -1, -1, -1], [-1, 1, 0, 0], [-1, 0, 1, 0], [-1, 0, 0, 1]]) / 6.0
    assert np.allclose(k, expected, rtol=0, atol=1e-16)
    assert np.all(elem_p1_stiffness(REF, 0.0) == 0)


@pytest.mark.parametrize("coords", [REF, REF * [1.0, 2.0, 0.5] + [0.3, -1, 2], np.array([[0.1, 0.2, 0], [1.3, 0, 0.2], [0.2, 0.9, 0.1], [0.3, 0.4, 1.7]])])
def test_edge_mass_and_curlcurl_oracle(coords):
    mass, cc, _, _ = oracle_matrices(coords)
    m = elem_edge_mass(coords, 1.0)
    c = elem_curlcurl(coords, 1.0)
    assert np.max(np.abs(m - mass)) <= 1e-14 * np.max(np.abs(mass))
    assert np.max(np.abs(c - cc)) <= 1e-14 * np.max(np.abs(cc))
    assert np.all(elem_edge_mass(coords, 0.0) == 0)


def test_edge_grad_oracle():
    coords = REF * [1.0, 2.0, 0.5]
    pts, wts = duffy_rule()
    grads, vol = tet_geometry(coords)
    d = coords[1:] - coords[0]
    # reference coordinates are the barycentrics of the affine image
    lam = np.column_stack([1 - pts.sum(1), pts])
    w = np.stack([lam[:, a, None] * grads[b] - lam[:, b, None] * grads[a] for a, b in PAIRS], 1)
    oracle = abs(np.linalg.det(d)) * np.einsum("q,qik,jk->ij", wts, w, grads)
    assert np.allclose(elem_edge_grad(coords, 1.0), oracle, rtol=0, atol=1e-14 * np.abs(oracle).max())


def test_curlcurl_kills_local_gradients():
    rng = np.random.default_rng(3)
    c = elem_curlcurl(REF, 2.0)
    v = rng.normal(size=4)
    grad_coef = np.array([v[b] - v[a] for a, b in PAIRS])
    assert np.max(np.abs(c @ grad_coef)) <= 1e-14 * np.abs(c).max() * np.abs(grad_coef).max()


def test_element_errors():
    with pytest.raises(MeshError):
        tet_geometry(REF[[1, 0, 2, 3]])
    with pytest.raises(ValueError):
        elem_curlcurl(REF, 0.0)


def spec_tc(kind, level=0):
    if kind == 1:
        return CylinderSpec(segments=(Segment(4e-3, IRON_ID),), radial_level=level)
    segs = (Segment(2e-3, IRON_ID), Segment(4e-3, COPPER_ID, kind == 2), Segment(2e-3, IRON_ID))
    return CylinderSpec(segments=segs, radial_level=level)


@pytest.fixture(scope="module")
def tc1():
    mesh = build_cylinder_mesh(spec_tc(1))
    return Discretization(mesh, DEFAULT_MATERIALS)


@pytest.fixture(scope="module")
def tc3():
    mesh = build_cylinder_mesh(spec_tc(3))
    return Discretization(mesh, DEFAULT_MATERIALS)


def test_matrices_bitwise_symmetric(tc1, tc3):
    for d in (tc1, tc3):
        for m in (d.stiffness, d.curlcurl, d.mass_eddy, d.step1_matrix(), d.step2_matrix(3750.0)):
            diff = m - m.T
            assert diff.nnz == 0 or np.all(diff.data == 0)


def test_discrete_gradient_kernel(tc1):
    rng = np.random.default_rng(0)
    v = rng.normal(size=tc1.mesh.n_nodes)
    g = tc1.edge.gradient @ v
    out = tc1.curlcurl @ g
    assert np.max(np.abs(out)) <= 1e-12 * abs(tc1.curlcurl).max() * np.abs(g).max()


def test_boundary_circulation_vanishes(tc1):
    rng = np.random.default_rng(1)
    z = rng.normal(size=tc1.edge.n_constrained)
    a = tc1.edge.constraint @ z
    mesh = tc1.mesh
    n = mesh.n_nodes
    key = {e: k for k, e in enumerate(mesh.edges[:, 0] * n + mesh.edges[:, 1])}
    worst = 0.0
    for f in mesh.boundary_faces:
        p, q, r = sorted(f)
        circ = a[key[p * n + q]] + a[key[q * n + r]] - a[key[p * n + r]]
        worst = max(worst, abs(circ))
    assert worst <= 1e-13 * np.abs(a).max()


def test_step2_kernel_is_null_space(tc1, tc3):
    for d in (tc1, tc3):
        k = d.step2_kernel()
        a = d.step2_matrix(2500.0)
        assert abs(a @ k).max() <= 1e-13 * abs(a).max()
    # two iron pieces not joined by eddy cells: the Port1 group is a null vector
    k3 = tc3.step2_kernel()
    assert np.any(k3[-1].toarray() != 0)
    assert tc1.step2_kernel()[-1].nnz == 0


def test_step2_load_compatible(tc1, tc3):
    for d in (tc1, tc3):
        phi, _ = solve_step1(d, 1.0)
        b = d.step2_source(phi)
        k = d.step2_kernel()
        kn = sp.linalg.norm(k, axis=0)
        comp = np.abs(k.T @ b) / (kn * np.linalg.norm(b))
        assert comp.max() <= 1e-10


def solve_step1(d, current):
    x = SPDFactor(d.step1_matrix()).solve(d.step1_rhs(current))
    return d.nodal.expand(x), x[-1]


def test_step1_zero_current(tc1):
    phi, v1 = solve_step1(tc1, 0.0)
    assert np.all(phi == 0) and v1 == 0


def test_step1_resistance_of_prism_stack(tc1):
    phi, v1 = solve_step1(tc1, 1.0)
    # uniform axial current through the polygonal cross-section
    area = tc1.vol[tc1.sigma > 0].sum() / 4e-3
    assert v1 == pytest.approx(-4e-3 / (1e7 * area), rel=1e-10)
    assert tc1.port_flux_dc(phi, PORT1) == pytest.approx(1.0, rel=1e-12)
    assert tc1.port_flux_dc(phi, PORT2) == pytest.approx(-1.0, rel=1e-12)


def test_step1_sigma_scaling():
    mesh = build_cylinder_mesh(spec_tc(2))
    d1 = Discretization(mesh, DEFAULT_MATERIALS)
    scaled = MaterialTable({k: Material(m.sigma * 3.0, m.mu_r) for k, m in DEFAULT_MATERIALS.materials.items()})
    d3 = Discretization(mesh, scaled)
    p1, v1 = solve_step1(d1, 2.0)
    p3, v3 = solve_step1(d3, 2.0)
    assert v3 == pytest.approx(v1 / 3, rel=1e-10)
    assert np.allclose(p3, p1 / 3, rtol=0, atol=1e-10 * np.abs(p1).max())
    assert d3.port_flux_dc(p3, PORT1) == pytest.approx(d1.port_flux_dc(p1, PORT1), rel=1e-10)


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_phi1_choice_invariance(seed, tc3):
    mesh = tc3.mesh
    rng = np.random.default_rng(seed)
    alt = rng.random(mesh.n_nodes)
    alt[tc3.nodal.port1] = 1.0
    alt[tc3.nodal.port2] = 0.0
    d_alt = Discretization(mesh, DEFAULT_MATERIALS, phi1=alt)
    p0, v0 = solve_step1(tc3, 1.0)
    p1, v1 = solve_step1(d_alt, 1.0)
    # compare where the potential is defined (nodes seen by a conductor)
    seen = np.zeros(mesh.n_nodes, dtype=bool)
    seen[mesh.tets[tc3.sigma > 0].ravel()] = True
    assert abs(v1 - v0) <= 1e-10 * abs(v0)
    assert np.max(np.abs(p1 - p0)[seen]) <= 1e-10 * np.max(np.abs(p0))


def test_phi1_must_match_ports(tc1):
    bad = np.zeros(tc1.mesh.n_nodes)
    with pytest.raises(ValueError):
        Discretization(tc1.mesh, DEFAULT_MATERIALS, phi1=bad)


def test_static_retag_changes_only_mass():
    spec = spec_tc(1)
    eddy = build_cylinder_mesh(spec)
    static = build_cylinder_mesh(CylinderSpec(segments=(Segment(4e-3, IRON_ID, False),)))
    de = Discretization(eddy, DEFAULT_MATERIALS)
    ds = Discretization(static, DEFAULT_MATERIALS)
    assert np.all(static.cell_class[de.sigma > 0] == STATIC)
    c = 1.5 / 4e-4
    diff = de.step2_matrix(c) - ds.step2_matrix(c)
    q = de.q_map
    expected = q.T @ (c * de.mass_eddy) @ q
    assert abs(diff - expected).max() <= 1e-12 * abs(expected).max()
    assert ds.mass_eddy.nnz == 0 or abs(ds.mass_eddy).max() == 0


def test_step2_zero_source():
    mesh = build_cylinder_mesh(spec_tc(1))
    a, b = assemble_step2(mesh, DEFAULT_MATERIALS, np.zeros(mesh.n_nodes), 2500.0)
    assert np.all(b == 0)
    mats = MaterialTable({0: Material(0.0), IRON_ID: Material(1e7, 1500.0)})
    d = Discretization(build_cylinder_mesh(CylinderSpec(segments=(Segment(4e-3, IRON_ID, False),))), mats)
    assert abs(d.step2_matrix(2500.0) - d.q_map.T @ d.curlcurl @ d.q_map).max() <= 1e-9 * abs(d.curlcurl).max()


def test_assemble_step1_wrapper():
    mesh = build_cylinder_mesh(spec_tc(1))
    a, b = assemble_step1(mesh, DEFAULT_MATERIALS, 2.0)
    assert b[-1] == -2.0 and np.count_nonzero(b) == 1
    assert a.shape == (len(b), len(b))


def test_uniform_flux_through_port(tc1):
    # phi = -z / (sigma A) gives j_z = 1 / A everywhere in the conductor
    mesh = tc1.mesh
    area = tc1.vol[tc1.sigma > 0].sum() / 4e-3
    phi = -mesh.nodes[:, 2] / (1e7 * area) * 2.5
    # outward at Port1 (z = 0) the current leaves against +z
    assert tc1.port_flux_dc(phi, PORT1) == pytest.approx(-2.5, rel=1e-12)


def test_interface_no_assembled_terms(tc3):
    # the copper/iron interface is natural: the matrices equal the plain element sums
    mesh = tc3.mesh
    ref = sp.csr_matrix((mesh.n_edges, mesh.n_edges))
    coords = mesh.nodes[mesh.tets]
    cc = elem_curlcurl(coords, tc3.nu)
    s = mesh.tet_edge_signs
    te = mesh.tet_edges
    vals = cc * s[:, :, None] * s[:, None, :]
    ref = sp.coo_matrix((vals.ravel(), (te[:, :, None].repeat(6, 2).ravel(), te[:, None, :].repeat(6, 1).ravel())), shape=ref.shape).tocsr()
    assert abs(ref - tc3.curlcurl).max() <= 1e-12 * abs(ref).max()


def test_cell_classes(tc3):
    assert set(np.unique(tc3.mesh.cell_class)) == {EDDY, STATIC, INSULATOR}
    assert np.all(tc3.sigma_eddy[tc3.mesh.cell_class != EDDY] == 0)
