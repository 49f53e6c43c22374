"""Conforming 2D triangle meshes with air/iron region roles.

Meshes are read from (and written to) ASCII Gmsh MSH 2.2. Region roles are
``air`` (the source-carrying, non-permeable domain), ``iron`` (the permeable,
source-free domain) and ``eval`` (an optional sub-region of air used for
energies and error norms). Line elements with role ``outer_boundary`` mark the
Dirichlet boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

AIR, IRON, EVAL = 0, 1, 2
ROLE_NAMES = {AIR: "air", IRON: "iron", EVAL: "eval"}
ROLE_CODES = {name: code for code, name in ROLE_NAMES.items()}
OUTER_BOUNDARY = "outer_boundary"

MIN_AREA = 1e-16
LOCATE_TOL = 1e-10


class MeshError(ValueError):
    """Raised for malformed mesh files and invalid mesh topology."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh.

    Use :meth:`from_arrays` to build one; it orients triangles
    counter-clockwise and validates conformity.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    regions: np.ndarray
    boundary_edges: np.ndarray

    @classmethod
    def from_arrays(cls, nodes, triangles, regions, boundary_edges=None, validate=True):
        nodes = np.ascontiguousarray(nodes, dtype=float)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        regions = np.asarray(regions, dtype=np.int8).reshape(-1)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must have shape (n, 2)")
        if len(triangles) == 0:
            raise MeshError("mesh has no triangles")
        if len(regions) != len(triangles):
            raise MeshError("one region code per triangle required")
        if triangles.min() < 0 or triangles.max() >= len(nodes):
            raise MeshError("triangle references a non-existent node")
        bad = ~np.isin(regions, list(ROLE_NAMES))
        if bad.any():
            raise MeshError(f"unknown region code {int(regions[bad][0])}")

        p = nodes[triangles]
        signed = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
        if np.any(np.abs(signed) <= MIN_AREA):
            k = int(np.argmin(np.abs(signed)))
            raise MeshError(f"degenerate triangle {k} (area {abs(signed[k]):.3e} m^2)")
        flip = signed < 0
        if flip.any():
            triangles[flip] = triangles[flip][:, [0, 2, 1]]

        mesh = cls(nodes, triangles, regions, np.empty((0, 2), dtype=np.int64))
        topo = mesh.topological_boundary
        if boundary_edges is None or len(boundary_edges) == 0:
            boundary_edges = topo
        boundary_edges = np.asarray(boundary_edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(mesh, "boundary_edges", boundary_edges)
        if validate:
            mesh._check_conforming()
        return mesh

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def _geometry(self):
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
        # inverse of [[d1x, d2x], [d1y, d2y]]; rows are grad(lambda1), grad(lambda2)
        inv = np.empty((len(p), 2, 2))
        inv[:, 0, 0] = d2[:, 1] / det
        inv[:, 0, 1] = -d2[:, 0] / det
        inv[:, 1, 0] = -d1[:, 1] / det
        inv[:, 1, 1] = d1[:, 0] / det
        grads = np.empty((len(p), 3, 2))
        grads[:, 1] = inv[:, 0]
        grads[:, 2] = inv[:, 1]
        grads[:, 0] = -inv[:, 0] - inv[:, 1]
        return 0.5 * det, grads, inv

    @property
    def areas(self) -> np.ndarray:
        return self._geometry[0]

    @property
    def grads(self) -> np.ndarray:
        """Gradients of the three P1 hat functions per triangle, shape (m, 3, 2)."""
        return self._geometry[1]

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def _edge_table(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.sort(e, axis=1)
        uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return uniq, inverse.reshape(-1), counts, e

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (sorted node pairs)."""
        return self._edge_table[0]

    @cached_property
    def topological_boundary(self) -> np.ndarray:
        uniq, inverse, counts, directed = self._edge_table
        if np.any(counts > 2):
            raise MeshError("non-manifold mesh: an edge is shared by more than two triangles")
        once = counts[inverse] == 1
        return directed[once]

    @property
    def air(self) -> np.ndarray:
        return self.regions != IRON

    @property
    def iron(self) -> np.ndarray:
        return self.regions == IRON

    @property
    def eval_region(self) -> np.ndarray:
        return self.regions == EVAL

    def region_mask(self, role) -> np.ndarray:
        """Triangle mask for ``air`` (includes eval), ``iron``, ``eval`` or ``all``."""
        if role in ("all", None):
            return np.ones(self.n_triangles, dtype=bool)
        if role == "air":
            return self.air
        if role == "iron":
            return self.iron
        if role == "eval":
            return self.eval_region
        raise MeshError(f"unknown region role {role!r}")

    def region_nodes(self, mask) -> np.ndarray:
        return np.unique(self.triangles[mask])

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def area_of(self, role) -> float:
        return float(self.areas[self.region_mask(role)].sum())

    @cached_property
    def locator(self) -> "TriangleLocator":
        return TriangleLocator(self.nodes, self.triangles, self._geometry[2])

    def _check_conforming(self):
        bnd = self.topological_boundary
        a, b = self.nodes[bnd[:, 0]], self.nodes[bnd[:, 1]]
        d = b - a
        length = np.hypot(d[:, 0], d[:, 1])
        # outward normal of a CCW triangle is to the right of its directed edge
        outward = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
        probe = 0.5 * (a + b) + 1e-6 * length[:, None] * outward
        hit = self.locator.find(probe)[0]
        if np.any(hit >= 0):
            k = int(np.flatnonzero(hit >= 0)[0])
            raise MeshError(
                "non-conforming mesh: boundary edge "
                f"({bnd[k, 0]}, {bnd[k, 1]}) lies inside the domain (hanging node)"
            )


class TriangleLocator:
    """Bucket-grid point location for an arbitrary triangulation."""

    def __init__(self, nodes, triangles, inv):
        self.nodes = nodes
        self.triangles = triangles
        self.inv = inv
        p = nodes[triangles]
        lo, hi = p.min(axis=1), p.max(axis=1)
        self.origin = nodes.min(axis=0)
        extent = np.maximum(nodes.max(axis=0) - self.origin, 1e-300)
        m = len(triangles)
        aspect = extent[0] / extent[1]
        nx = int(np.clip(np.sqrt(m * aspect), 1, 4096))
        ny = int(np.clip(m / nx, 1, 4096))
        self.shape = (nx, ny)
        self.cell = extent / np.array([nx, ny])
        pad = 1e-9 * extent
        i0 = self._cell_index(lo - pad)
        i1 = self._cell_index(hi + pad)
        span = i1 - i0 + 1
        cells, tris = [], []
        ids = np.arange(m)
        for dx in range(int(span[:, 0].max())):
            for dy in range(int(span[:, 1].max())):
                sel = (dx < span[:, 0]) & (dy < span[:, 1])
                cells.append((i0[sel, 0] + dx) * ny + i0[sel, 1] + dy)
                tris.append(ids[sel])
        cells = np.concatenate(cells)
        tris = np.concatenate(tris)
        order = np.lexsort((tris, cells))
        self.candidates = tris[order]
        self.ptr = np.searchsorted(cells[order], np.arange(nx * ny + 1))

    def _cell_index(self, pts):
        idx = np.floor((pts - self.origin) / self.cell).astype(np.int64)
        return np.clip(idx, 0, np.array(self.shape) - 1)

    def barycentric(self, tri, pts):
        p0 = self.nodes[self.triangles[tri, 0]]
        rel = pts - p0
        inv = self.inv[tri]
        l1 = inv[:, 0, 0] * rel[:, 0] + inv[:, 0, 1] * rel[:, 1]
        l2 = inv[:, 1, 0] * rel[:, 0] + inv[:, 1, 1] * rel[:, 1]
        return np.column_stack([1.0 - l1 - l2, l1, l2])

    def find(self, points, tol=LOCATE_TOL):
        """Return (triangle index or -1, barycentric coordinates) per point."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        n = len(pts)
        result = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        ij = self._cell_index(pts)
        cell = ij[:, 0] * self.shape[1] + ij[:, 1]
        start = self.ptr[cell]
        count = self.ptr[cell + 1] - start
        active = np.arange(n)
        k = 0
        while len(active):
            active = active[count[active] > k]
            if not len(active):
                break
            tri = self.candidates[start[active] + k]
            lam = self.barycentric(tri, pts[active])
            ok = lam.min(axis=1) >= -tol
            result[active[ok]] = tri[ok]
            bary[active[ok]] = lam[ok]
            active = active[~ok]
            k += 1
        return result, bary


def locate(mesh: Mesh, point):
    """Triangle index and barycentric coordinates of the containing triangle.

    Accepts one point or an array of points; raises :class:`MeshError` for
    points outside the meshed domain.
    """
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    tri, bary = mesh.locator.find(pts.reshape(-1, 2))
    if np.any(tri < 0):
        bad = pts.reshape(-1, 2)[np.flatnonzero(tri < 0)[0]]
        raise MeshError(f"point ({bad[0]:.6g}, {bad[1]:.6g}) lies outside the mesh")
    if single:
        return int(tri[0]), bary[0]
    return tri, bary


def mesh_length(mesh: Mesh) -> float:
    """Maximum edge length, the abscissa of convergence plots."""
    e = mesh.edges
    d = mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]
    return float(np.hypot(d[:, 0], d[:, 1]).max())


def mean_edge_length(mesh: Mesh) -> float:
    e = mesh.edges
    d = mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]
    return float(np.hypot(d[:, 0], d[:, 1]).mean())


def refine(mesh: Mesh) -> Mesh:
    """Uniform red refinement: every edge is split at its midpoint."""
    uniq, inverse, _, _ = mesh._edge_table
    m = mesh.n_triangles
    mid = mesh.n_nodes + inverse.reshape(3, m).T  # midpoints of edges 01, 12, 20
    nodes = np.vstack([mesh.nodes, 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])])
    t = mesh.triangles
    tris = np.concatenate([
        np.column_stack([t[:, 0], mid[:, 0], mid[:, 2]]),
        np.column_stack([mid[:, 0], t[:, 1], mid[:, 1]]),
        np.column_stack([mid[:, 2], mid[:, 1], t[:, 2]]),
        np.column_stack([mid[:, 0], mid[:, 1], mid[:, 2]]),
    ])
    regions = np.tile(mesh.regions, 4)
    return Mesh.from_arrays(nodes, tris, regions, validate=False)


# -- interface ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InterfaceCurve:
    """Oriented interface between air and iron.

    ``nodes`` are global node ids in loop order, ``edges`` the directed
    global edges, and ``edge_local`` the same edges as indices into
    ``nodes``. With ``orientation = +1`` the normal points from air into
    iron and the tangent is the normal rotated by +90 degrees, so each loop
    runs counter-clockwise around the enclosed air.
    """

    points: np.ndarray
    nodes: np.ndarray
    edges: np.ndarray
    edge_local: np.ndarray
    loop_ptr: np.ndarray
    orientation: int = 1
    arclength: np.ndarray = field(default=None)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_loops(self) -> int:
        return len(self.loop_ptr) - 1

    @cached_property
    def _edge_vectors(self):
        d = self.points[self.edge_local[:, 1]] - self.points[self.edge_local[:, 0]]
        length = np.hypot(d[:, 0], d[:, 1])
        return d, length

    @property
    def lengths(self) -> np.ndarray:
        return self._edge_vectors[1]

    @property
    def tangents(self) -> np.ndarray:
        d, length = self._edge_vectors
        return self.orientation * d / length[:, None]

    @property
    def normals(self) -> np.ndarray:
        t = self.tangents
        return np.column_stack([t[:, 1], -t[:, 0]])

    @cached_property
    def node_tangents(self) -> np.ndarray:
        """Length-weighted average of the adjacent edge tangents, unit length."""
        acc = np.zeros((self.n_nodes, 2))
        w = self.tangents * self.lengths[:, None]
        np.add.at(acc, self.edge_local[:, 0], w)
        np.add.at(acc, self.edge_local[:, 1], w)
        return acc / np.hypot(acc[:, 0], acc[:, 1])[:, None]

    @property
    def total_length(self) -> float:
        return float(self.lengths.sum())

    def mass_matrix(self):
        """1D P1 mass matrix on the interface nodes (exact integration)."""
        from scipy import sparse

        el = self.edge_local
        L = self.lengths
        rows = np.concatenate([el[:, 0], el[:, 1], el[:, 0], el[:, 1]])
        cols = np.concatenate([el[:, 0], el[:, 1], el[:, 1], el[:, 0]])
        vals = np.concatenate([L / 3, L / 3, L / 6, L / 6])
        n = self.n_nodes
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def flipped(self) -> "InterfaceCurve":
        """Same curve with normal and tangent negated (loops reversed)."""
        return InterfaceCurve(
            self.points, self.nodes, self.edges, self.edge_local, self.loop_ptr,
            -self.orientation, self.arclength,
        )


def extract_interface(mesh: Mesh, air_tag="air", iron_tag="iron") -> InterfaceCurve:
    """Chain all air/iron edges into closed, consistently oriented loops."""
    air = mesh.region_mask(air_tag)
    iron = mesh.region_mask(iron_tag)
    if not air.any() or not iron.any():
        raise MeshError("interface extraction needs both air and iron triangles")
    uniq, inverse, counts, directed = mesh._edge_table
    m = mesh.n_triangles
    owner = np.tile(np.arange(m), 3)
    air_of = np.full(len(uniq), False)
    iron_of = np.full(len(uniq), False)
    air_of[inverse[air[owner]]] = True
    iron_of[inverse[iron[owner]]] = True
    shared = air_of & iron_of & (counts == 2)
    # directed edge as traversed by its air triangle
    pick = air[owner] & shared[inverse]
    edges = directed[pick]
    if len(edges) == 0:
        raise MeshError("air and iron regions share no edge")

    order = np.argsort(edges[:, 0], kind="stable")
    starts = edges[order, 0]
    if np.any(starts[1:] == starts[:-1]):
        node = int(starts[1:][starts[1:] == starts[:-1]][0])
        raise MeshError(f"interface pinches at node {node}")
    nxt = dict(zip(edges[:, 0].tolist(), edges[:, 1].tolist()))

    loops = []
    remaining = set(nxt)
    while remaining:
        first = min(remaining)
        loop = [first]
        remaining.discard(first)
        cur = nxt[first]
        while cur != first:
            if cur not in nxt:
                raise MeshError(f"open interface chain ends at node {cur}")
            if cur not in remaining:
                raise MeshError(f"interface chain revisits node {cur}")
            loop.append(cur)
            remaining.discard(cur)
            cur = nxt[cur]
        loops.append(np.array(loop, dtype=np.int64))

    nodes = np.concatenate(loops)
    ptr = np.concatenate([[0], np.cumsum([len(lp) for lp in loops])])
    local = np.arange(len(nodes))
    nxt_local = local + 1
    nxt_local[ptr[1:] - 1] = ptr[:-1]
    edge_local = np.column_stack([local, nxt_local])
    glob = np.column_stack([nodes[edge_local[:, 0]], nodes[edge_local[:, 1]]])
    pts = mesh.nodes[nodes]

    d = pts[edge_local[:, 1]] - pts[edge_local[:, 0]]
    seg = np.hypot(d[:, 0], d[:, 1])
    arc = np.zeros(len(nodes))
    for a, b in zip(ptr[:-1], ptr[1:]):
        arc[a + 1:b] = np.cumsum(seg[a:b - 1])
    curve = InterfaceCurve(pts, nodes, glob, edge_local, ptr, 1, arc)
    logger.debug("interface: %d loops, %d nodes, length %.6g", curve.n_loops, len(nodes),
                 curve.total_length)
    return curve


# -- Gmsh MSH 2.2 ------------------------------------------------------------

def _sections(lines):
    sections = {}
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("$") and not line.startswith("$End"):
            name = line[1:]
            end = "$End" + name
            try:
                j = lines.index(end, i + 1)
            except ValueError:
                raise MeshError(f"section ${name} is not terminated by {end}") from None
            sections[name] = lines[i + 1:j]
            i = j + 1
        else:
            i += 1
    return sections


def load_msh(path, tag_map=None) -> Mesh:
    """Read an ASCII Gmsh 2.2 file.

    Parameters
    ----------
    path : str or Path
    tag_map : dict, optional
        Maps physical names (or physical numbers as strings) to roles
        ``air``, ``iron``, ``eval`` or ``outer_boundary``. Names that are
        already roles map to themselves.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read mesh file {path}: {exc}") from exc
    lines = [ln.strip() for ln in text.splitlines()]
    sec = _sections(lines)
    for name in ("MeshFormat", "Nodes", "Elements"):
        if name not in sec:
            raise MeshError(f"{path}: missing ${name} section")
    try:
        version, filetype = sec["MeshFormat"][0].split()[:2]
        version = float(version)
    except (IndexError, ValueError):
        raise MeshError(f"{path}: malformed $MeshFormat") from None
    if not 2.0 <= version < 3.0:
        raise MeshError(f"{path}: MSH version {version} is not supported (need 2.2 ASCII)")
    if filetype != "0":
        raise MeshError(f"{path}: binary MSH files are not supported")

    names = {}
    for ln in sec.get("PhysicalNames", [])[1:]:
        parts = ln.split(maxsplit=2)
        if len(parts) == 3:
            names[(int(parts[0]), int(parts[1]))] = parts[2].strip('"')
    mapping = dict(tag_map or {})

    def role_of(dim, tag):
        name = names.get((dim, tag), str(tag))
        role = mapping.get(name, mapping.get(str(tag), name))
        return role

    try:
        n = int(sec["Nodes"][0])
        raw = np.array([ln.split() for ln in sec["Nodes"][1:n + 1]], dtype=float)
        if raw.shape != (n, 4):
            raise ValueError
    except (ValueError, IndexError):
        raise MeshError(f"{path}: malformed $Nodes section") from None
    ids = raw[:, 0].astype(np.int64)
    if np.ptp(raw[:, 3]) > 1e-12 * max(1.0, np.abs(raw[:, :3]).max()):
        raise MeshError(f"{path}: z coordinates are not constant; only planar meshes are supported")
    index = {int(k): i for i, k in enumerate(ids)}

    tris, tri_roles, lines_ = [], [], []
    try:
        ne = int(sec["Elements"][0])
        body = sec["Elements"][1:ne + 1]
        if len(body) != ne:
            raise ValueError
        for ln in body:
            v = [int(x) for x in ln.split()]
            etype, ntags = v[1], v[2]
            phys = v[3] if ntags > 0 else 0
            conn = v[3 + ntags:]
            if etype == 2:
                role = role_of(2, phys)
                if role not in ROLE_CODES:
                    raise MeshError(f"{path}: triangle physical tag {phys} ({role!r}) has no role mapping")
                tris.append([index[c] for c in conn[:3]])
                tri_roles.append(ROLE_CODES[role])
            elif etype == 1 and role_of(1, phys) == OUTER_BOUNDARY:
                lines_.append([index[c] for c in conn[:2]])
    except MeshError:
        raise
    except (ValueError, IndexError, KeyError):
        raise MeshError(f"{path}: malformed $Elements section") from None
    if not tris:
        raise MeshError(f"{path}: no triangles found")

    tris = np.array(tris, dtype=np.int64)
    used = np.unique(tris)
    remap = np.full(n, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    nodes = raw[used, 1:3]
    tris = remap[tris]
    bnd = remap[np.array(lines_, dtype=np.int64).reshape(-1, 2)] if lines_ else None
    if bnd is not None and np.any(bnd < 0):
        raise MeshError(f"{path}: boundary line references a node outside all triangles")
    return Mesh.from_arrays(nodes, tris, tri_roles, bnd)


def write_msh(mesh: Mesh, path) -> None:
    """Write ``mesh`` as ASCII Gmsh 2.2 with physical names for every role."""
    path = Path(path)
    phys = {OUTER_BOUNDARY: (1, 10)}
    for code, name in ROLE_NAMES.items():
        phys[name] = (2, code + 1)
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames", str(len(phys))]
    for name, (dim, tag) in phys.items():
        out.append(f'{dim} {tag} "{name}"')
    out += ["$EndPhysicalNames", "$Nodes", str(mesh.n_nodes)]
    out += [f"{i + 1} {x!r} {y!r} 0" for i, (x, y) in enumerate(mesh.nodes.tolist())]
    out += ["$EndNodes", "$Elements"]
    nb = len(mesh.boundary_edges)
    out.append(str(nb + mesh.n_triangles))
    k = 1
    for a, b in mesh.boundary_edges.tolist():
        out.append(f"{k} 1 2 10 10 {a + 1} {b + 1}")
        k += 1
    for (a, b, c), r in zip(mesh.triangles.tolist(), mesh.regions.tolist()):
        tag = r + 1
        out.append(f"{k} 2 2 {tag} {tag} {a + 1} {b + 1} {c + 1}")
        k += 1
    out.append("$EndElements")
    path.write_text("\n".join(out) + "\n")
