"""First-order nodal and edge elements on tetrahedra, with port constraints.

Local edge ``k`` of a tet joins local nodes ``LOCAL_EDGES[k]`` and carries the
Whitney function ``l_a grad l_b - l_b grad l_a``.  Global edges point from the
lower to the higher node id; ``Mesh.tet_edge_signs`` flips the local functions
at scatter time.

Both steps are posed on constrained spaces:

* nodal: values on Port1 and Port2 are removed from the unknowns, the Port1
  potential re-enters through the indicator ``phi1`` and one extra unknown;
* edge: circulations on boundary edges are replaced by differences of an
  auxiliary boundary potential ``eta`` that vanishes on both ports, so the
  tangential trace on the boundary is a surface gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .mesh import EDDY, LOCAL_EDGES, PORT1, PORT2, Mesh, MaterialTable, MeshError

QUAD4_A = 0.5854101966249685
QUAD4_B = 0.1381966011250105
# barycentric coordinates of the quadratic-exact 4-point rule, weights 1/4
QUAD4 = np.full((4, 4), QUAD4_B) + np.eye(4) * (QUAD4_A - QUAD4_B)
CENTROID = np.full((1, 4), 0.25)


def tet_geometry(coords: np.ndarray):
    """Barycentric gradients ``(..., 4, 3)`` and volumes of tetrahedra ``(..., 4, 3)``."""
    coords = np.asarray(coords, dtype=float)
    d = coords[..., 1:, :] - coords[..., :1, :]
    vol = np.einsum("...j,...j->...", d[..., 0, :], np.cross(d[..., 1, :], d[..., 2, :])) / 6.0
    if np.any(vol <= 0):
        raise MeshError("degenerate or inverted tetrahedron")
    # rows of inv(d)^T are the gradients of l1..l3
    g123 = np.swapaxes(np.linalg.inv(d), -1, -2)
    g0 = -g123.sum(axis=-2, keepdims=True)
    return np.concatenate([g0, g123], axis=-2), vol


def _whitney(bary: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Edge functions at barycentric points: ``(..., q, 6, 3)``."""
    a, b = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
    la = bary[:, a]  # (q, 6)
    lb = bary[:, b]
    ga = grads[..., None, a, :]  # (..., 1, 6, 3)
    gb = grads[..., None, b, :]
    return la[..., None] * gb - lb[..., None] * ga


def _curls(grads: np.ndarray) -> np.ndarray:
    a, b = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
    return 2.0 * np.cross(grads[..., a, :], grads[..., b, :])


def elem_p1_stiffness(coords, sigma) -> np.ndarray:
    grads, vol = tet_geometry(coords)
    w = np.asarray(sigma, dtype=float) * vol
    return w[..., None, None] * np.einsum("...ik,...jk->...ij", grads, grads)


def elem_edge_mass(coords, sigma) -> np.ndarray:
    grads, vol = tet_geometry(coords)
    w = _whitney(QUAD4, grads)
    m = np.einsum("...qik,...qjk->...ij", w, w) / 4.0
    return (np.asarray(sigma, dtype=float) * vol)[..., None, None] * m


def elem_curlcurl(coords, nu) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 0):
        raise ValueError("reluctivity must be positive")
    grads, vol = tet_geometry(coords)
    c = _curls(grads)
    return (nu * vol)[..., None, None] * np.einsum("...ik,...jk->...ij", c, c)


def elem_edge_grad(coords, sigma) -> np.ndarray:
    """``sigma * int w_i . grad l_j`` (6 x 4); the integrand is linear, so the centroid rule is exact."""
    grads, vol = tet_geometry(coords)
    w = _whitney(CENTROID, grads)[..., 0, :, :]
    return (np.asarray(sigma, dtype=float) * vol)[..., None, None] * np.einsum("...ik,...jk->...ij", w, grads)


def _scatter(rows, cols, vals, shape) -> sp.csr_matrix:
    mat = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()
    mat.sum_duplicates()
    return mat


def _sym(mat: sp.spmatrix) -> sp.csr_matrix:
    mat = sp.csr_matrix(mat)
    out = ((mat + mat.T) * 0.5).tocsr()
    out.sort_indices()
    return out


@dataclass
class NodalDofSystem:
    free: np.ndarray  # node ids of the unknowns: off the ports, touching a conductor
    port1: np.ndarray
    port2: np.ndarray
    phi1: np.ndarray  # full nodal vector, 1 on Port1
    phi2: np.ndarray
    prolong: sp.csr_matrix  # (n_nodes, n_free + 1): [free identity | phi1]

    @classmethod
    def build(cls, mesh: Mesh, sigma: np.ndarray, phi1: np.ndarray | None = None) -> "NodalDofSystem":
        n = mesh.n_nodes
        p1 = mesh.port_nodes(PORT1)
        p2 = mesh.port_nodes(PORT2)
        if np.intersect1d(p1, p2).size:
            raise MeshError("the two ports touch")
        ports = np.zeros(n, dtype=bool)
        ports[p1] = True
        ports[p2] = True
        # the potential is left at zero where no conductive cell can see it
        conductive = np.zeros(n, dtype=bool)
        conductive[mesh.tets[sigma > 0].ravel()] = True
        free = np.flatnonzero(~ports & conductive)
        ind1 = np.zeros(n)
        ind1[p1] = 1.0
        ind2 = np.zeros(n)
        ind2[p2] = 1.0
        if phi1 is None:
            phi1 = ind1
        else:
            phi1 = np.asarray(phi1, dtype=float)
            if not (np.allclose(phi1[p1], 1.0, atol=0) and np.allclose(phi1[p2], 0.0, atol=0)):
                raise ValueError("phi1 must be 1 on Port1 and 0 on Port2")
        nf = len(free)
        ident = sp.csr_matrix((np.ones(nf), (free, np.arange(nf))), shape=(n, nf))
        prolong = sp.hstack([ident, sp.csr_matrix(phi1[:, None])]).tocsr()
        return cls(free, p1, p2, phi1, ind2, prolong)

    @property
    def n_unknowns(self) -> int:
        return len(self.free) + 1

    def expand(self, x: np.ndarray) -> np.ndarray:
        return self.prolong @ x


@dataclass
class EdgeDofSystem:
    interior: np.ndarray  # edge ids of free circulations
    eta_nodes: np.ndarray  # boundary, non-port nodes
    constraint: sp.csr_matrix  # (n_edges, n_interior + n_eta)
    gradient: sp.csr_matrix  # (n_edges, n_nodes)

    @classmethod
    def build(cls, mesh: Mesh) -> "EdgeDofSystem":
        n, ne = mesh.n_nodes, mesh.n_edges
        grad = sp.csr_matrix(
            (
                np.r_[-np.ones(ne), np.ones(ne)],
                (np.r_[np.arange(ne), np.arange(ne)], np.r_[mesh.edges[:, 0], mesh.edges[:, 1]]),
            ),
            shape=(ne, n),
        )
        bnodes = mesh.boundary_nodes()
        on_bnd = np.zeros(n, dtype=bool)
        on_bnd[bnodes] = True
        port = np.zeros(n, dtype=bool)
        port[mesh.port_nodes(PORT1)] = True
        port[mesh.port_nodes(PORT2)] = True
        eta_nodes = np.flatnonzero(on_bnd & ~port)

        bf = mesh.boundary_faces
        fe = np.sort(np.concatenate([bf[:, [0, 1]], bf[:, [1, 2]], bf[:, [0, 2]]]), axis=1)
        bkey = np.unique(fe[:, 0] * n + fe[:, 1])
        ekey = mesh.edges[:, 0] * n + mesh.edges[:, 1]
        is_bnd_edge = np.isin(ekey, bkey)
        interior = np.flatnonzero(~is_bnd_edge)
        bedges = np.flatnonzero(is_bnd_edge)

        ni = len(interior)
        eta_col = np.full(n, -1)
        eta_col[eta_nodes] = ni + np.arange(len(eta_nodes))
        rows = [interior]
        cols = [np.arange(ni)]
        vals = [np.ones(ni)]
        for end, sign in ((1, 1.0), (0, -1.0)):
            nodes = mesh.edges[bedges, end]
            keep = eta_col[nodes] >= 0
            rows.append(bedges[keep])
            cols.append(eta_col[nodes[keep]])
            vals.append(np.full(keep.sum(), sign))
        cmap = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ne, ni + len(eta_nodes)),
        )
        return cls(interior, eta_nodes, cmap, grad)

    @property
    def n_constrained(self) -> int:
        return self.constraint.shape[1]


class Discretization:
    """Global matrices of one mesh/material pair, assembled once and reused."""

    def __init__(self, mesh: Mesh, materials: MaterialTable, phi1: np.ndarray | None = None):
        if not mesh.is_tagged:
            raise MeshError("mesh must be classified before discretization")
        self.mesh = mesh
        self.materials = materials
        self.sigma = materials.sigma_of(mesh.cell_material)
        self.nu = 1.0 / materials.mu_of(mesh.cell_material)
        self.eddy_cells = mesh.cell_class == EDDY
        self.sigma_eddy = np.where(self.eddy_cells, self.sigma, 0.0)
        coords = mesh.nodes[mesh.tets]
        self.grads, self.vol = tet_geometry(coords)
        self.curls = _curls(self.grads)
        self.nodal = NodalDofSystem.build(mesh, self.sigma, phi1)
        self.edge = EdgeDofSystem.build(mesh)

        n, ne = mesh.n_nodes, mesh.n_edges
        s = mesh.tet_edge_signs
        te, tn = mesh.tet_edges, mesh.tets
        ss = s[:, :, None] * s[:, None, :]

        ke = self.sigma[:, None, None] * self.vol[:, None, None] * np.einsum(
            "eik,ejk->eij", self.grads, self.grads
        )
        self.stiffness = _sym(_scatter(tn[:, :, None].repeat(4, 2), tn[:, None, :].repeat(4, 1), ke, (n, n)))

        cc = (self.nu * self.vol)[:, None, None] * np.einsum("eik,ejk->eij", self.curls, self.curls)
        self.curlcurl = _sym(_scatter(te[:, :, None].repeat(6, 2), te[:, None, :].repeat(6, 1), cc * ss, (ne, ne)))

        w4 = _whitney(QUAD4, self.grads)
        mass_unit = self.vol[:, None, None] * np.einsum("eqik,eqjk->eij", w4, w4) / 4.0
        me = self.sigma_eddy[:, None, None] * mass_unit
        self.mass_eddy = _sym(_scatter(te[:, :, None].repeat(6, 2), te[:, None, :].repeat(6, 1), me * ss, (ne, ne)))
        self._mass_unit = mass_unit

        wc = _whitney(CENTROID, self.grads)[:, 0]
        dg = self.vol[:, None, None] * np.einsum("eik,ejk->eij", wc, self.grads) * s[:, :, None]
        rows, cols = te[:, :, None].repeat(4, 2), tn[:, None, :].repeat(6, 1)
        self.coupling_all = _scatter(rows, cols, self.sigma[:, None, None] * dg, (ne, n))
        self.coupling_eddy = _scatter(rows, cols, self.sigma_eddy[:, None, None] * dg, (ne, n))

        self.grad_phi1 = self.edge.gradient @ self.nodal.phi1
        self.q_map = sp.hstack([self.edge.constraint, sp.csr_matrix(self.grad_phi1[:, None])]).tocsr()

    # -- step 1 -------------------------------------------------------------
    def step1_matrix(self) -> sp.csr_matrix:
        p = self.nodal.prolong
        return _sym(p.T @ self.stiffness @ p)

    def step1_rhs(self, current: float) -> np.ndarray:
        b = np.zeros(self.nodal.n_unknowns)
        b[-1] = -current
        return b

    # -- step 2 -------------------------------------------------------------
    def step2_matrix(self, mass_coeff: float) -> sp.csr_matrix:
        """``Q^T (K_curl + c M_eddy) Q`` for unknowns (constrained A, W1)."""
        q = self.q_map
        return _sym(q.T @ (self.curlcurl + mass_coeff * self.mass_eddy) @ q)

    def step2_source(self, phi: np.ndarray) -> np.ndarray:
        """Reduced load ``(-sigma grad phi, A')`` over the whole domain; zero in the W1 slot."""
        f = -(self.coupling_all @ phi)
        return np.r_[self.edge.constraint.T @ f, 0.0]

    def step2_history(self, hist_edge: np.ndarray) -> np.ndarray:
        """Reduced ``(sigma h, A' + W' grad phi1)_{eddy}`` for a full edge vector ``h``."""
        return self.q_map.T @ (self.mass_eddy @ hist_edge)

    def step2_kernel(self) -> sp.csr_matrix:
        """Reduced-coordinate basis of the Step-2 null space (independent of the mass coefficient).

        The null space consists of gradients of nodal functions that are
        constant on every connected piece of the eddy region: hat functions of
        nodes away from eddy cells and ports, the indicator of each eddy piece
        touching no port, and one function equal to 1 on Port1 and on the eddy
        pieces attached to it (absent when such a piece also reaches Port2).
        """
        mesh = self.mesh
        n = mesh.n_nodes
        cond = self.eddy_cells & (self.sigma > 0)
        in_eddy = np.zeros(n, dtype=bool)
        in_eddy[mesh.tets[cond].ravel()] = True
        p1 = np.zeros(n, dtype=bool)
        p1[self.nodal.port1] = True
        p2 = np.zeros(n, dtype=bool)
        p2[self.nodal.port2] = True

        free = np.flatnonzero(~in_eddy & ~p1 & ~p2)
        cols = [sp.csr_matrix((np.ones(len(free)), (free, np.arange(len(free)))), shape=(n, len(free)))]
        # connected pieces of the eddy region, through shared nodes
        et = mesh.tets[cond]
        rows = np.repeat(et[:, 0], 3)
        nbrs = et[:, 1:].ravel()
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, nbrs)), shape=(n, n))
        _, label = connected_components(adj, directed=False)
        def indicator(mask):
            idx = np.flatnonzero(mask)
            return sp.csr_matrix((np.ones(len(idx)), (idx, np.zeros(len(idx), dtype=int))), shape=(n, 1))

        group1 = p1.copy()
        bridged = False
        for lab in np.unique(label[in_eddy]):
            nodes = in_eddy & (label == lab)
            at1, at2 = np.any(nodes & p1), np.any(nodes & p2)
            bridged |= at1 and at2
            if at1:
                group1 |= nodes
            elif not at2:
                cols.append(indicator(nodes))
        if not bridged:
            cols.append(indicator(group1))
        v = sp.hstack(cols).tocsr()  # nodal generators
        w = np.asarray(v[self.nodal.port1[0]].todense()).ravel()  # value on Port1
        u = v - sp.csr_matrix(self.nodal.phi1[:, None]) @ sp.csr_matrix(w[None, :])
        gu = self.edge.gradient @ u
        reduced = sp.vstack([gu[self.edge.interior], u[self.edge.eta_nodes], sp.csr_matrix(w[None, :])])
        return reduced.tocsr()

    def full_edge(self, z: np.ndarray) -> np.ndarray:
        """Full edge coefficients of ``A~ + W1 grad phi1`` from the reduced vector."""
        return self.q_map @ z

    # -- fields ---------------------------------------------------------------
    def cell_curl(self, a: np.ndarray) -> np.ndarray:
        coef = a[self.mesh.tet_edges] * self.mesh.tet_edge_signs
        return np.einsum("ei,eik->ek", coef, self.curls)

    def cell_grad(self, phi: np.ndarray) -> np.ndarray:
        return np.einsum("ei,eik->ek", phi[self.mesh.tets], self.grads)

    def edge_field_at(self, a: np.ndarray, bary: np.ndarray, cells: np.ndarray | None = None) -> np.ndarray:
        """Edge field at barycentric points, ``(n_cells, q, 3)``."""
        if cells is None:
            cells = np.arange(self.mesh.n_tets)
        coef = a[self.mesh.tet_edges[cells]] * self.mesh.tet_edge_signs[cells]
        if bary.ndim == 2:
            w = _whitney(bary, self.grads[cells])
            return np.einsum("ei,eqik->eqk", coef, w)
        # per-cell points (n_cells, q, 4)
        a_, b_ = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
        g = self.grads[cells]
        w = bary[:, :, a_, None] * g[:, None, b_, :] - bary[:, :, b_, None] * g[:, None, a_, :]
        return np.einsum("ei,eqik->eqk", coef, w)

    def quad_points(self, cells: np.ndarray | None = None) -> np.ndarray:
        if cells is None:
            cells = np.arange(self.mesh.n_tets)
        x = self.mesh.nodes[self.mesh.tets[cells]]
        return np.einsum("qi,eik->eqk", QUAD4, x)

    def current_density(self, phi: np.ndarray, dadt: np.ndarray, bary: np.ndarray = QUAD4) -> np.ndarray:
        """``j = -sigma (grad phi + dA/dt)`` in eddy cells, ``-sigma grad phi`` elsewhere."""
        gp = self.cell_grad(phi)[:, None, :]
        da = self.edge_field_at(dadt, bary)
        da = np.where(self.eddy_cells[:, None, None], da, 0.0)
        return -self.sigma[:, None, None] * (gp + da)

    # -- powers ---------------------------------------------------------------
    def ohmic_power(self, phi: np.ndarray, dadt: np.ndarray) -> float:
        return float(
            phi @ (self.stiffness @ phi)
            + 2.0 * dadt @ (self.coupling_eddy @ phi)
            + dadt @ (self.mass_eddy @ dadt)
        )

    def magnetic_power(self, a: np.ndarray, dadt: np.ndarray) -> float:
        return float(a @ (self.curlcurl @ dadt))

    # -- ports ----------------------------------------------------------------
    def _port_geometry(self, tag: int):
        mesh = self.mesh
        if tag not in (PORT1, PORT2):
            raise ValueError(f"unknown port tag {tag}")
        sel = np.flatnonzero(mesh.boundary_tags == tag)
        faces = mesh.boundary_faces[sel]
        cells = mesh.boundary_tets[sel]
        p = mesh.nodes[faces]
        nvec = 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        centre = mesh.nodes[mesh.tets[cells]].mean(axis=1)
        flip = np.einsum("ij,ij->i", nvec, p[:, 0] - centre) < 0
        nvec[flip] *= -1
        return faces, cells, nvec  # nvec: outward normal times face area

    def port_flux_dc(self, phi: np.ndarray, tag: int) -> float:
        """Outward flux of ``-sigma grad phi`` through a port (one point per face)."""
        _, cells, nvec = self._port_geometry(tag)
        g = np.einsum("ei,eik->ek", phi[self.mesh.tets[cells]], self.grads[cells])
        return float(-np.sum(self.sigma[cells] * np.einsum("ij,ij->i", g, nvec)))

    def port_flux_ec(self, dadt: np.ndarray, tag: int) -> float:
        """Outward flux of ``-sigma dA/dt`` over eddy cells at a port (three points per face)."""
        faces, cells, nvec = self._port_geometry(tag)
        tets = self.mesh.tets[cells]
        # barycentric coordinates of the face points inside their tet
        loc = (tets[:, :, None] == faces[:, None, :]).astype(float)  # (nf, 4, 3)
        tri = np.full((3, 3), 1.0 / 6.0) + np.eye(3) * 0.5
        bary = np.einsum("evk,qk->eqv", loc, tri)
        f = self.edge_field_at(dadt, bary, cells)  # (nf, 3, 3)
        fn = np.einsum("eqk,ek->e", f, nvec) / 3.0
        return float(-np.sum(self.sigma_eddy[cells] * fn))

    def port_flux(self, tag: int, phi: np.ndarray | None = None, dadt: np.ndarray | None = None) -> float:
        total = 0.0
        if phi is not None:
            total += self.port_flux_dc(phi, tag)
        if dadt is not None:
            total += self.port_flux_ec(dadt, tag)
        return total


def assemble_step1(mesh: Mesh, materials: MaterialTable, current: float, disc: Discretization | None = None):
    disc = disc or Discretization(mesh, materials)
    return disc.step1_matrix(), disc.step1_rhs(current)


def assemble_step2(
    mesh: Mesh,
    materials: MaterialTable,
    phi: np.ndarray,
    mass_coeff: float,
    hist_edge: np.ndarray | None = None,
    disc: Discretization | None = None,
):
    """Step-2 matrix and load for ``dA/dt ~ mass_coeff * A^n - hist_edge``."""
    if phi is None:
        raise ValueError("the Step-1 potential is required")
    disc = disc or Discretization(mesh, materials)
    if len(phi) != mesh.n_nodes:
        raise ValueError("potential does not match the mesh")
    rhs = disc.step2_source(phi)
    if hist_edge is not None:
        rhs = rhs + disc.step2_history(hist_edge)
    return disc.step2_matrix(mass_coeff), rhs
