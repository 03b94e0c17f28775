"""Structured tetrahedral meshes of a finite conductor cylinder in an air annulus.

The disk cross-section is triangulated ring by ring, extruded into prism
layers and every prism is split into three tetrahedra.  Diagonals of the
quadrilateral prism faces always start at the node with the smallest global
id, which makes the split conforming without any bookkeeping between
neighbouring prisms.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import isclose

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

MU0 = 4e-7 * np.pi

# domain classes of a cell
EDDY, STATIC, INSULATOR = 0, 1, 2
CLASS_NAMES = {EDDY: "EddyConductor", STATIC: "StaticConductor", INSULATOR: "Insulator"}

# boundary face tags
LATERAL, PORT1, PORT2 = 0, 1, 2
TAG_NAMES = {LATERAL: "Lateral", PORT1: "Port1", PORT2: "Port2"}


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Material:
    sigma: float
    mu_r: float = 1.0

    @property
    def mu(self) -> float:
        return self.mu_r * MU0


@dataclass(frozen=True)
class MaterialTable:
    """Conductivity and relative permeability per material id.

    Material id 0 is reserved for the insulating air annulus.
    """

    materials: dict = field(default_factory=dict)

    def __post_init__(self):
        for mid, mat in self.materials.items():
            if mat.sigma < 0:
                raise MeshError(f"material {mid}: negative conductivity {mat.sigma}")
            if mat.mu_r < 1:
                raise MeshError(f"material {mid}: relative permeability {mat.mu_r} < 1")
        air = self.materials.get(AIR_ID)
        if air is not None and air.sigma != 0:
            raise MeshError("the air material must have zero conductivity")

    def __getitem__(self, mid: int) -> Material:
        return self.materials[mid]

    def sigma_of(self, ids: np.ndarray) -> np.ndarray:
        lut = self._lookup("sigma")
        return lut[ids]

    def mu_of(self, ids: np.ndarray) -> np.ndarray:
        lut = self._lookup("mu")
        return lut[ids]

    def _lookup(self, attr: str) -> np.ndarray:
        n = max(self.materials) + 1
        lut = np.full(n, np.nan)
        for mid, mat in self.materials.items():
            lut[mid] = getattr(mat, attr)
        return lut


AIR_ID, IRON_ID, COPPER_ID = 0, 1, 2
AIR = Material(sigma=0.0, mu_r=1.0)
IRON = Material(sigma=1e7, mu_r=1500.0)
COPPER = Material(sigma=6e7, mu_r=1.0)
DEFAULT_MATERIALS = MaterialTable({AIR_ID: AIR, IRON_ID: IRON, COPPER_ID: COPPER})


@dataclass(frozen=True)
class Segment:
    length: float  # m
    material_id: int
    eddy: bool = True


@dataclass(frozen=True)
class CylinderSpec:
    """Geometry of the conductor cylinder and its air annulus.

    Lengths are in metres.  ``layers_per_mm`` fixes a uniform layer
    thickness along the axis; the radial layout is ``conductor_rings`` rings
    graded towards the conductor surface plus ``air_rings`` uniform rings,
    each with ``angular_segments`` nodes at level 0.
    """

    core_radius: float = 3e-3
    outer_radius: float = 8e-3
    segments: tuple = (Segment(8e-3, IRON_ID, True),)
    layers_per_mm: float = 1.0
    radial_level: int = 0
    grading: float = 0.7
    conductor_rings: int = 5
    air_rings: int = 2
    angular_segments: int = 16

    def __post_init__(self):
        if not self.core_radius > 0:
            raise MeshError(f"core radius must be positive, got {self.core_radius}")
        if not self.outer_radius > self.core_radius:
            raise MeshError("outer radius must exceed the core radius")
        if len(self.segments) == 0:
            raise MeshError("at least one axial segment is required")
        if any(s.length <= 0 for s in self.segments):
            raise MeshError("segment lengths must be positive")
        if self.layers_per_mm <= 0:
            raise MeshError("layers_per_mm must be positive")
        if self.radial_level < 0:
            raise MeshError("radial_level must be non-negative")
        if not 0 < self.grading <= 1:
            raise MeshError("grading factor must lie in (0, 1]")
        if self.conductor_rings < 1 or self.air_rings < 1 or self.angular_segments < 3:
            raise MeshError("need at least one ring per region and three angular segments")

    @property
    def length(self) -> float:
        return float(sum(s.length for s in self.segments))

    @property
    def layer_thickness(self) -> float:
        return 1e-3 / self.layers_per_mm

    def layer_counts(self) -> list[int]:
        counts = []
        for seg in self.segments:
            n = seg.length / self.layer_thickness
            if not isclose(n, round(n), rel_tol=0, abs_tol=1e-9) or round(n) < 1:
                raise MeshError(
                    f"layer thickness {self.layer_thickness:g} m does not divide "
                    f"segment length {seg.length:g} m"
                )
            counts.append(int(round(n)))
        return counts


@dataclass(frozen=True)
class Triangulation:
    points: np.ndarray  # (n, 2)
    triangles: np.ndarray  # (m, 3), counter-clockwise
    ring_radii: np.ndarray  # radius of ring k; ring 0 is the centre

    @property
    def areas(self) -> np.ndarray:
        p = self.points[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray  # (n, 3)
    tets: np.ndarray  # (m, 4), positive orientation
    edges: np.ndarray  # (ne, 2), low id first
    tet_edges: np.ndarray  # (m, 6) global edge of local edge LOCAL_EDGES[k]
    tet_edge_signs: np.ndarray  # (m, 6) +1 if local and global orientation agree
    boundary_faces: np.ndarray  # (nb, 3)
    boundary_tets: np.ndarray  # (nb,) owning tet of each boundary face
    interior_faces: np.ndarray  # (ni, 3)
    interior_face_tets: np.ndarray  # (ni, 2)
    z_planes: np.ndarray  # axial coordinates of the layer interfaces
    boundary_tags: np.ndarray | None = None
    cell_material: np.ndarray | None = None
    cell_class: np.ndarray | None = None
    interface_faces: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def is_tagged(self) -> bool:
        return self.cell_class is not None

    def volumes(self) -> np.ndarray:
        return tet_volumes(self.nodes, self.tets)

    def centroids(self) -> np.ndarray:
        return self.nodes[self.tets].mean(axis=1)

    def port_nodes(self, tag: int) -> np.ndarray:
        faces = self.boundary_faces[self.boundary_tags == tag]
        return np.unique(faces)

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_faces)


LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


def tet_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = nodes[tets]
    d = p[:, 1:] - p[:, :1]
    return np.einsum("ij,ij->i", d[:, 0], np.cross(d[:, 1], d[:, 2])) / 6.0


def ring_radii(spec: CylinderSpec) -> np.ndarray:
    """Radii of all rings (centre excluded) at the given refinement level."""
    g = spec.grading
    nc = spec.conductor_rings
    widths = g ** np.arange(nc)
    widths *= spec.core_radius / widths.sum()
    inner = np.concatenate([[0.0], np.cumsum(widths)])
    inner[-1] = spec.core_radius
    outer = np.linspace(spec.core_radius, spec.outer_radius, spec.air_rings + 1)
    coarse = np.concatenate([inner, outer[1:]])
    sub = 2 ** spec.radial_level
    fine = [coarse[0]]
    for a, b in zip(coarse[:-1], coarse[1:]):
        fine.extend(a + (b - a) * np.arange(1, sub + 1) / sub)
    radii = np.array(fine)
    # keep the interface radius bit-exact
    radii[nc * sub] = spec.core_radius
    return radii[1:]


def build_disk_triangulation(
    core_radius: float,
    outer_radius: float,
    radial_level: int = 0,
    grading: float = 0.7,
    conductor_rings: int = 5,
    air_rings: int = 2,
    angular_segments: int = 16,
) -> Triangulation:
    """Triangulate the disk of radius ``outer_radius`` with a ring at ``core_radius``.

    Every ring carries the same number of equally spaced nodes, so the annulus
    between two rings is a band of quadrilaterals cut into two triangles each,
    and the innermost ring is joined to the centre by a fan.  Each level
    doubles both the ring count and the angular count.
    """
    spec = CylinderSpec(
        core_radius=core_radius,
        outer_radius=outer_radius,
        radial_level=radial_level,
        grading=grading,
        conductor_rings=conductor_rings,
        air_rings=air_rings,
        angular_segments=angular_segments,
    )
    return _disk(spec)


def _disk(spec: CylinderSpec) -> Triangulation:
    radii = ring_radii(spec)
    m = spec.angular_segments * 2 ** spec.radial_level
    theta = 2 * np.pi * np.arange(m) / m
    ring_pts = radii[:, None, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)[None]
    points = np.vstack([np.zeros((1, 2)), ring_pts.reshape(-1, 2)])

    def ring_ids(k):
        return 1 + k * m + np.arange(m)

    j = np.arange(m)
    jn = (j + 1) % m
    first = ring_ids(0)
    tris = [np.stack([np.zeros(m, dtype=int), first[j], first[jn]], axis=1)]
    for k in range(len(radii) - 1):
        a, b = ring_ids(k), ring_ids(k + 1)
        tris.append(np.stack([a[j], b[j], b[jn]], axis=1))
        tris.append(np.stack([a[j], b[jn], a[jn]], axis=1))
    return Triangulation(points, np.vstack(tris).astype(np.int64), np.concatenate([[0.0], radii]))


def extrude_to_tets(disk: Triangulation, spec: CylinderSpec) -> Mesh:
    """Extrude the disk through the axial layers and split prisms into tets."""
    counts = spec.layer_counts()
    if not isclose(sum(s.length for s in spec.segments), spec.length):
        raise MeshError("segment lengths do not add up to the cylinder length")
    zs = [0.0]
    for seg, n in zip(spec.segments, counts):
        z0 = zs[-1]
        zs.extend(z0 + seg.length * np.arange(1, n + 1) / n)
    z_planes = np.array(zs)
    z_planes[-1] = spec.length
    nl = len(z_planes) - 1
    n2 = len(disk.points)

    nodes = np.empty(((nl + 1) * n2, 3))
    for k, z in enumerate(z_planes):
        nodes[k * n2 : (k + 1) * n2, :2] = disk.points
        nodes[k * n2 : (k + 1) * n2, 2] = z

    t = np.sort(disk.triangles, axis=1)
    p, q, r = t[:, 0], t[:, 1], t[:, 2]
    layer_tets = []
    for k in range(nl):
        lo, hi = k * n2, (k + 1) * n2
        # diagonals start at the smallest id of every quadrilateral face
        layer_tets.append(np.stack([p + lo, q + lo, r + lo, r + hi], axis=1))
        layer_tets.append(np.stack([p + lo, q + lo, q + hi, r + hi], axis=1))
        layer_tets.append(np.stack([p + lo, p + hi, q + hi, r + hi], axis=1))
    tets = np.vstack(layer_tets)
    vol = tet_volumes(nodes, tets)
    neg = vol < 0
    tets[neg] = tets[neg][:, [1, 0, 2, 3]]
    return _build_topology(nodes, tets, z_planes)


def _build_topology(nodes, tets, z_planes) -> Mesh:
    n = len(nodes)
    m = len(tets)
    vol = tet_volumes(nodes, tets)
    if np.any(vol <= 0):
        raise MeshError(f"{np.count_nonzero(vol <= 0)} degenerate tetrahedra")

    loc = tets[:, LOCAL_EDGES]  # (m, 6, 2)
    lo = np.minimum(loc[..., 0], loc[..., 1])
    hi = np.maximum(loc[..., 0], loc[..., 1])
    key = (lo * n + hi).ravel()
    ukey, inv = np.unique(key, return_inverse=True)
    edges = np.stack([ukey // n, ukey % n], axis=1)
    tet_edges = inv.reshape(m, 6)
    signs = np.where(loc[..., 0] < loc[..., 1], 1.0, -1.0)

    fl = np.sort(tets[:, LOCAL_FACES], axis=2).reshape(-1, 3)
    fkey = (fl[:, 0] * n + fl[:, 1]) * n + fl[:, 2]
    order = np.argsort(fkey, kind="stable")
    sk = fkey[order]
    owner = order // 4
    start = np.flatnonzero(np.r_[True, sk[1:] != sk[:-1]])
    counts = np.diff(np.r_[start, len(sk)])
    if np.any(counts > 2):
        raise MeshError("non-manifold face shared by more than two tets")
    bsel = start[counts == 1]
    isel = start[counts == 2]
    boundary_faces = fl[order[bsel]]
    boundary_tets = owner[bsel]
    interior_faces = fl[order[isel]]
    interior_face_tets = np.stack([owner[isel], owner[isel + 1]], axis=1)
    return Mesh(
        nodes=nodes,
        tets=tets,
        edges=edges,
        tet_edges=tet_edges,
        tet_edge_signs=signs,
        boundary_faces=boundary_faces,
        boundary_tets=boundary_tets,
        interior_faces=interior_faces,
        interior_face_tets=interior_face_tets,
        z_planes=np.asarray(z_planes, dtype=float),
    )


def classify(mesh: Mesh, spec: CylinderSpec, materials: MaterialTable = DEFAULT_MATERIALS) -> Mesh:
    """Attach material ids, domain classes, boundary tags and the interface set."""
    c = mesh.centroids()
    rc = np.hypot(c[:, 0], c[:, 1])
    bounds = np.cumsum([0.0] + [s.length for s in spec.segments])
    seg_idx = np.clip(np.searchsorted(bounds, c[:, 2], side="right") - 1, 0, len(spec.segments) - 1)
    seg_mat = np.array([s.material_id for s in spec.segments])
    seg_eddy = np.array([s.eddy for s in spec.segments])

    inside = rc < spec.core_radius
    material = np.where(inside, seg_mat[seg_idx], AIR_ID)
    cls = np.where(inside, np.where(seg_eddy[seg_idx], EDDY, STATIC), INSULATOR)
    for mid in np.unique(material):
        if mid not in materials.materials:
            raise MeshError(f"material id {mid} missing from the material table")
    sigma = materials.sigma_of(material)
    if np.any((cls == STATIC) & (sigma <= 0)):
        raise MeshError("magneto-static cells must be conductive")
    # an eddy-flagged non-conductor is just insulator
    cls = np.where((cls == EDDY) & (sigma == 0), INSULATOR, cls)

    zf = mesh.nodes[mesh.boundary_faces, 2]
    length = spec.length
    tol = 1e-9 * length
    tags = np.full(len(zf), -1)
    tags[np.all(np.abs(zf) <= tol, axis=1)] = PORT1
    tags[np.all(np.abs(zf - length) <= tol, axis=1)] = PORT2
    bf = mesh.nodes[mesh.boundary_faces]
    rb = np.hypot(bf[..., 0], bf[..., 1])
    lateral = np.all(rb >= spec.outer_radius * (1 - 1e-9), axis=1) & (tags == -1)
    tags[lateral] = LATERAL
    if np.any(tags < 0):
        raise MeshError(f"{np.count_nonzero(tags < 0)} boundary faces could not be tagged")

    ft = mesh.interior_face_tets
    side = cls[ft]
    static_side = side == STATIC
    iface = static_side[:, 0] ^ static_side[:, 1]
    tagged = replace(
        mesh,
        boundary_tags=tags,
        cell_material=material,
        cell_class=cls,
        interface_faces=mesh.interior_faces[iface],
    )
    _check_conductive_path(tagged, sigma)
    return tagged


def _check_conductive_path(mesh: Mesh, sigma: np.ndarray) -> None:
    cond = sigma > 0
    ft = mesh.interior_face_tets
    keep = cond[ft[:, 0]] & cond[ft[:, 1]]
    m = mesh.n_tets
    g = sp.coo_matrix((np.ones(keep.sum()), (ft[keep, 0], ft[keep, 1])), shape=(m, m))
    _, label = connected_components(g, directed=False)
    bt = mesh.boundary_tets
    at1 = set(label[bt[(mesh.boundary_tags == PORT1) & cond[bt]]])
    at2 = set(label[bt[(mesh.boundary_tags == PORT2) & cond[bt]]])
    if not at1 & at2:
        raise MeshError("no conductive path connects Port1 and Port2")


def build_cylinder_mesh(spec: CylinderSpec, materials: MaterialTable = DEFAULT_MATERIALS) -> Mesh:
    return classify(extrude_to_tets(_disk(spec), spec), spec, materials)


def disk_for(spec: CylinderSpec) -> Triangulation:
    return _disk(spec)
