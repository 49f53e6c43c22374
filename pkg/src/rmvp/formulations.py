"""End-to-end solvers: volumetric reference, original and updated RMVP.

All three return a field that can be evaluated anywhere in the mesh and a
:class:`SolveReport` with dof counts, Biot-Savart counters and timings.

Sign conventions: positive current points along +z, the interface normal
``n`` points from the air region Va into the iron region Vi and the tangent
is ``t = e_z x n``. The multiplier of the image problem and the surface
current are both tangential field strengths ``t . H`` in A/m.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import biot_savart as bs
from .fem import (
    FEFunction,
    SolverError,
    SparseSystem,
    TraceFunction,
    assemble_interface_coupling,
    assemble_stiffness,
    element_reluctivity,
    line_source_rhs,
    solve_nonlinear,
    solve_spd,
    volume_source_rhs,
)
from .materials import MU0, NU0
from .mesh import InterfaceCurve, Mesh, MeshError, extract_interface

logger = logging.getLogger(__name__)

MIN_GAP_FRACTION = 1e-3
WARN_DELTA = 0.1


class FormulationError(ValueError):
    """Invalid input to a formulation (sources misplaced, bad windings)."""


# -- windings ------------------------------------------------------------------

def points_in_polygon(points, polygon):
    """Even-odd rule; points exactly on an edge may fall either way."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    poly = np.asarray(polygon, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    for (x0, y0), (x1, y1) in zip(poly, np.roll(poly, -1, axis=0)):
        if y0 == y1:
            continue
        crosses = (y0 > y) != (y1 > y)
        xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xc)
    return inside


@dataclass(frozen=True, eq=False)
class WindingRegion:
    """Polygonal conductor carrying ``current`` (A) with uniform density.

    Elements belong to the winding iff their centroid lies inside; the
    density is the current divided by the area of the selected elements so
    the discrete total current is exact.
    """

    polygon: np.ndarray
    current: float

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "polygon", poly)
        if len(poly) < 3 or self.area <= 0:
            raise FormulationError("winding polygon needs positive area")

    @classmethod
    def rectangle(cls, xmin, xmax, ymin, ymax, current):
        return cls(np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]]), current)

    @property
    def area(self) -> float:
        x, y = self.polygon[:, 0], self.polygon[:, 1]
        return abs(0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    @property
    def centroid(self) -> np.ndarray:
        x, y = self.polygon[:, 0], self.polygon[:, 1]
        cross = x * np.roll(y, -1) - np.roll(x, -1) * y
        a = 0.5 * cross.sum()
        return np.array([np.sum((x + np.roll(x, -1)) * cross), np.sum((y + np.roll(y, -1)) * cross)]) / (6 * a)

    def element_mask(self, mesh: Mesh) -> np.ndarray:
        return points_in_polygon(mesh.centroids, self.polygon)

    def as_line_current(self) -> bs.LineCurrent:
        cx, cy = self.centroid
        return bs.LineCurrent(float(cx), float(cy), float(self.current))


def winding_current_density(mesh: Mesh, windings) -> np.ndarray:
    jz = np.zeros(mesh.n_triangles)
    for w in windings:
        sel = w.element_mask(mesh)
        if not sel.any():
            raise FormulationError(f"winding at {w.centroid} selects no element; refine the mesh")
        if np.any(mesh.iron[sel]):
            raise FormulationError(f"winding at {w.centroid} overlaps the iron region")
        jz[sel] += w.current / mesh.areas[sel].sum()
    return jz


# -- reports and fields ----------------------------------------------------------

@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-8
    max_iter: int = 50
    max_halvings: int = 10


@dataclass
class SolveReport:
    formulation: str
    dofs: dict = field(default_factory=dict)
    biot_savart: dict = field(default_factory=lambda: {"target_evals": 0, "kernel_evals": 0})
    timings: dict = field(default_factory=dict)
    newton_iterations: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = True
    tolerances: dict = field(default_factory=lambda: {"linear_rtol": 1e-10})
    conventions: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class _Timer:
    def __init__(self, report, key):
        self.report, self.key = report, key

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.report.timings[self.key] = self.report.timings.get(self.key, 0.0) + time.perf_counter() - self.t0


@dataclass(frozen=True, eq=False)
class TotalField:
    """Composed potential of an RMVP solve.

    ``air_parts`` are added in the air region, ``iron_parts`` in the iron
    region. With ``analytic_air`` the source potential and field of
    ``sources`` are added analytically in the air region.
    """

    mesh: Mesh
    sources: bs.SourceSet
    air_parts: tuple
    iron_parts: tuple
    analytic_air: bool = True
    parts: dict = field(default_factory=dict)
    workers: int = 1

    def evaluate(self, points, mesh=None, elements=None, bary=None):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if elements is None or mesh is not self.mesh:
            elements, bary = self.mesh.locator.find(pts)
            if np.any(elements < 0):
                p = pts[np.flatnonzero(elements < 0)[0]]
                raise MeshError(f"point ({p[0]:.6g}, {p[1]:.6g}) is outside the mesh")
        az = np.zeros(len(pts))
        b = np.zeros((len(pts), 2))
        air = ~self.mesh.iron[elements]
        for sel, parts in ((air, self.air_parts), (~air, self.iron_parts)):
            if not sel.any():
                continue
            for f in parts:
                a_p, b_p = _eval_part(f, elements[sel], bary[sel])
                az[sel] += a_p
                b[sel] += b_p
        if self.analytic_air and air.any() and len(self.sources):
            a_s, h_s = bs.field_at(self.sources, pts[air], workers=self.workers)
            az[air] += a_s
            b[air] += MU0 * h_s
        return az, b

    def nodal(self, region="all"):
        """Composed nodal values (analytic part sampled at the nodes)."""
        mask = self.mesh.region_mask(region)
        nodes = self.mesh.region_nodes(mask)
        # take each node's value from the side of the first triangle using it
        owner = np.full(self.mesh.n_nodes, -1)
        t = self.mesh.triangles[mask]
        owner[t.ravel()] = np.repeat(np.flatnonzero(mask), 3)
        e = owner[nodes]
        bary = (self.mesh.triangles[e] == nodes[:, None]).astype(float)
        az, _ = self.evaluate(self.mesh.nodes[nodes], self.mesh, e, bary)
        return FEFunction(self.mesh, nodes, az, mask)


def _eval_part(f, elements, bary):
    az = np.einsum("ni,ni->n", bary, f.full[f.mesh.triangles[elements]])
    return az, f.element_b[elements]


def compose_eval(total, point):
    """Potential and flux density of a composed field at one point or many."""
    pts = np.asarray(point, dtype=float)
    az, b = total.evaluate(pts.reshape(-1, 2))
    if pts.ndim == 1:
        return float(az[0]), b[0]
    return az, b


# -- checks ----------------------------------------------------------------------

def check_sources(mesh: Mesh, sources: bs.SourceSet):
    """Every source must sit inside an air triangle."""
    if not len(sources):
        return
    tri, _ = mesh.locator.find(sources.positions)
    if np.any(tri < 0):
        p = sources.positions[np.flatnonzero(tri < 0)[0]]
        raise FormulationError(f"line current at ({p[0]:.6g}, {p[1]:.6g}) lies outside the mesh")
    if np.any(mesh.iron[tri]):
        p = sources.positions[np.flatnonzero(mesh.iron[tri])[0]]
        raise FormulationError(f"line current at ({p[0]:.6g}, {p[1]:.6g}) lies in the iron region")


def interface_gap(interface: InterfaceCurve, sources: bs.SourceSet):
    """Minimum source-to-interface distance and a characteristic radius.

    The radius is half the interface's extent (its diameter for a circle).
    """
    p = interface.points
    radius = 0.5 * max(np.ptp(p[:, 0]), np.ptp(p[:, 1]))
    if not len(sources):
        return np.inf, radius
    a = p[interface.edge_local[:, 0]]
    d = p[interface.edge_local[:, 1]] - a
    dd = np.einsum("ij,ij->i", d, d)
    # segment distance >= node distance - L/2, so few sources need the exact test
    node_dist, _ = cKDTree(p).query(sources.positions)
    cand = sources.positions[node_dist <= node_dist.min() + 0.5 * np.sqrt(dd.max())]
    gap = np.inf
    for s0 in range(0, len(cand), 256):
        s = cand[s0:s0 + 256, None, :]
        t = np.clip(np.einsum("kij,ij->ki", s - a, d) / dd, 0.0, 1.0)
        foot = a + t[..., None] * d
        gap = min(gap, float(np.sqrt(np.min(np.sum((foot - s) ** 2, axis=-1)))))
    return gap, radius


def _air_interface(mesh, interface):
    if interface is None:
        interface = extract_interface(mesh)
    return interface


# -- reference -------------------------------------------------------------------

def solve_reference(mesh: Mesh, windings=(), material=None, sources=None, newton=NewtonOptions()):
    """Volumetric solve of -div(nu grad Az) = Jz with Az = 0 on the boundary.

    ``windings`` carry uniform current densities. ``sources`` optionally adds
    line currents as point loads (useful as an FE cross-check). ``material``
    is the iron material (``None`` means vacuum everywhere).
    """
    t_start = time.perf_counter()
    report = SolveReport("reference")
    with _Timer(report, "assembly"):
        rhs = volume_source_rhs(mesh, winding_current_density(mesh, windings))
        if sources is not None and len(sources):
            check_sources(mesh, sources)
            rhs = rhs + line_source_rhs(mesh, sources.positions, sources.currents)
    fixed = mesh.boundary_nodes
    report.dofs = {"domain": int(mesh.n_nodes - len(fixed))}
    with _Timer(report, "reaction_solve"):
        values = _solve_field(mesh, material, rhs, fixed, np.zeros(len(fixed)), report, newton)
    report.timings["total"] = time.perf_counter() - t_start
    return FEFunction.from_full(mesh, values), report


def _solve_field(mesh, material, rhs, fixed, fixed_values, report, newton, background=None):
    if material is None or material.is_linear:
        if background is not None:
            raise ValueError("background gradients are only used on the nonlinear path")
        K = assemble_stiffness(mesh, "all", material)
        x = solve_spd(SparseSystem(K, rhs, fixed, fixed_values))
        report.newton_iterations = 0
        return x
    res = solve_nonlinear(mesh, material, rhs, fixed, fixed_values, background=background,
                          tol=newton.tol, max_iter=newton.max_iter, max_halvings=newton.max_halvings)
    report.newton_iterations = res.iterations
    report.residual_history = [float(r) for r in res.residuals]
    report.converged = res.converged
    report.tolerances["newton_rtol"] = newton.tol
    if not res.converged:
        raise SolverError(
            f"Newton stopped after {res.iterations} iterations at relative residual {res.residuals[-1]:.3e}"
        )
    return res.values


# -- original RMVP ------------------------------------------------------------------

def solve_original(mesh: Mesh, sources: bs.SourceSet, material=None, projection="nodal",
                   newton=NewtonOptions(), workers=1, analytic_air=True):
    """Original reduced formulation with the source potential on all of V.

    ``As`` is projected on every node (``"nodal"`` interpolation or ``"l2"``
    projection). The reduced potential solves
    ``(nu grad Ar, grad v)_V = -((nu - nu0) grad As, grad v)_Vi`` with
    ``Ar = -As`` on the outer boundary, and the total is ``As + Ar``.
    """
    t_start = time.perf_counter()
    report = SolveReport("original", conventions={"projection": projection})
    check_sources(mesh, sources)
    bs.reset_count(sources)
    with _Timer(report, "source_eval"):
        if projection == "nodal":
            a_s = bs.interpolate_nodal(sources, mesh, "all", workers=workers)
        elif projection == "l2":
            a_s = bs.project_l2(sources, mesh, "all", workers=workers)
        else:
            raise ValueError(f"projection must be 'nodal' or 'l2', got {projection!r}")
    fixed = mesh.boundary_nodes
    report.dofs = {"domain": int(mesh.n_nodes - len(fixed))}
    with _Timer(report, "reaction_solve"):
        s_full = a_s.full
        if material is None or material.is_linear:
            nu, _ = element_reluctivity(mesh, material, np.zeros(mesh.n_triangles))
            rhs = -assemble_stiffness(mesh, "iron", nu_elements=nu - NU0) @ s_full
            values = _solve_field(mesh, material, rhs, fixed, -s_full[fixed], report, newton)
        else:
            # residual of the total field a_s + a_r, linearised in a_r only
            g_s = np.einsum("mi,mid->md", s_full[mesh.triangles], mesh.grads)
            rhs = assemble_stiffness(mesh, "all", None) @ s_full
            values = _solve_field(mesh, material, rhs, fixed, -s_full[fixed], report, newton,
                                  background=g_s)
    a_r = FEFunction.from_full(mesh, values)
    report.biot_savart = bs.eval_count(sources)
    if analytic_air:
        total = TotalField(mesh, sources, (a_r,), (a_s, a_r), True, {"As": a_s, "Ar": a_r}, workers)
    else:
        total = TotalField(mesh, sources, (a_s, a_r), (a_s, a_r), False, {"As": a_s, "Ar": a_r}, workers)
    report.timings["total"] = time.perf_counter() - t_start
    return total, report


# -- updated RMVP -----------------------------------------------------------------

def solve_image(mesh: Mesh, sources: bs.SourceSet, interface: InterfaceCurve = None, trace_az=None,
                workers=1):
    """Image potential on Va with the interface trace imposed by a multiplier.

    Solves ``[[K_a, s C], [s C^T, 0]] [am; lam] = [0; -s M as_trace]`` where
    ``C`` couples Va nodes to the P1 trace basis, ``M`` is the interface
    mass matrix and ``s`` the interface orientation sign. ``lam`` is the
    tangential image field strength ``t . Hm`` (A/m).
    """
    interface = _air_interface(mesh, interface)
    report = SolveReport("image")
    if trace_az is None:
        with _Timer(report, "source_eval"):
            trace_az = bs.az_at(sources, interface.points, workers=workers) if len(sources) else \
                np.zeros(interface.n_nodes)
    air = mesh.air
    nodes = mesh.region_nodes(air)
    n_a, n_g = len(nodes), interface.n_nodes
    s = float(interface.orientation)
    with _Timer(report, "image_solve"):
        K = assemble_stiffness(mesh, air, None)[nodes][:, nodes]
        C = assemble_interface_coupling(interface, mesh.n_nodes)[nodes] * s
        M = interface.mass_matrix()
        A = sparse.bmat([[K, C], [C.T, None]], format="csr")
        rhs = np.concatenate([np.zeros(n_a), -s * (M @ trace_az)])
        try:
            x = solve_spd(SparseSystem(A, rhs, indefinite=True))
        except SolverError as exc:
            raise SolverError(f"image saddle system failed (degenerate interface loop?): {exc}") from exc
    report.dofs = {"domain": n_a, "trace": n_g}
    am = FEFunction(mesh, nodes, x[:n_a], air)
    lam = TraceFunction(interface, x[n_a:])
    return am, lam, report


def compute_kg(interface: InterfaceCurve, sources: bs.SourceSet, lam: TraceFunction, trace_h=None,
               workers=1) -> TraceFunction:
    """Surface current ``Kg = t . Hs + lam`` at the interface nodes (A/m)."""
    if lam.interface is not interface:
        if lam.interface.orientation != interface.orientation or not np.array_equal(
                lam.interface.nodes, interface.nodes):
            raise ValueError("multiplier and interface use different conventions")
    if trace_h is None:
        hs = bs.trace_tangential_h(sources, interface, workers=workers)
    else:
        hs = TraceFunction(interface, np.einsum("ij,ij->i", interface.node_tangents, trace_h))
    return TraceFunction(interface, hs.values + lam.values)


def solve_reaction(mesh: Mesh, kg: TraceFunction, material=None, newton=NewtonOptions()):
    """Reaction potential on all of V driven by the surface current ``kg``.

    The load is ``s int_Gamma Kg phi ds`` with ``s`` the orientation sign;
    the outer boundary is homogeneous Dirichlet. Only this stage iterates
    for nonlinear materials.
    """
    report = SolveReport("reaction")
    interface = kg.interface
    s = float(interface.orientation)
    rhs = s * (assemble_interface_coupling(interface, mesh.n_nodes) @ kg.values)
    fixed = mesh.boundary_nodes
    report.dofs = {"domain": int(mesh.n_nodes - len(fixed))}
    with _Timer(report, "reaction_solve"):
        values = _solve_field(mesh, material, rhs, fixed, np.zeros(len(fixed)), report, newton)
    return FEFunction.from_full(mesh, values), report


@dataclass(frozen=True)
class UpdatedOptions:
    min_gap_fraction: float = MIN_GAP_FRACTION
    warn_delta: float = WARN_DELTA
    newton: NewtonOptions = NewtonOptions()
    air_source_nodes: bool = False  # also sample As on all Va nodes (visualisation)
    workers: int = 1


def solve_updated(mesh: Mesh, sources: bs.SourceSet, material=None, options: UpdatedOptions = None,
                  interface: InterfaceCurve = None):
    """Updated reduced formulation: image, surface current, reaction.

    The Biot-Savart kernel runs once on the interface nodes (potential and
    field fused) and, with ``options.air_source_nodes``, on the Va nodes.
    """
    t_start = time.perf_counter()
    options = options or UpdatedOptions()
    interface = _air_interface(mesh, interface)
    report = SolveReport("updated", conventions={
        "current": "+z",
        "normal": "air to iron",
        "tangent": "e_z x n",
        "orientation": int(interface.orientation),
        "trace_quantities": "t . H (A/m)",
    })
    check_sources(mesh, sources)
    gap, radius = interface_gap(interface, sources)
    if gap < options.min_gap_fraction * 2 * radius:
        raise FormulationError(
            f"a line current is {gap:.3g} m from the interface, below the minimum "
            f"{options.min_gap_fraction * 2 * radius:.3g} m"
        )
    if len(sources) and gap / radius < options.warn_delta:
        msg = f"line current close to the interface: delta/R = {gap / radius:.3g} < {options.warn_delta:g}"
        logger.warning(msg)
        report.warnings.append(msg)

    bs.reset_count(sources)
    with _Timer(report, "source_eval"):
        if len(sources):
            trace_az, trace_h = bs.field_at(sources, interface.points, workers=options.workers)
        else:
            trace_az, trace_h = np.zeros(interface.n_nodes), np.zeros((interface.n_nodes, 2))
        parts = {}
        if options.air_source_nodes:
            parts["As"] = bs.interpolate_nodal(sources, mesh, "air", workers=options.workers)
    am, lam, rep_image = solve_image(mesh, sources, interface, trace_az=trace_az, workers=options.workers)
    report.timings["image_solve"] = rep_image.timings["image_solve"]
    with _Timer(report, "kg"):
        kg = compute_kg(interface, sources, lam, trace_h=trace_h)
    ag, rep_reaction = solve_reaction(mesh, kg, material, options.newton)
    report.timings["reaction_solve"] = rep_reaction.timings["reaction_solve"]
    for key in ("newton_iterations", "residual_history", "converged"):
        setattr(report, key, getattr(rep_reaction, key))
    report.tolerances.update(rep_reaction.tolerances)
    report.dofs = {"domain": rep_reaction.dofs["domain"], "image": rep_image.dofs["domain"],
                   "trace": interface.n_nodes}
    report.biot_savart = bs.eval_count(sources)
    parts.update({"Am": am, "Ag": ag, "lambda": lam, "Kg": kg})
    total = TotalField(mesh, sources, (am, ag), (ag,), True, parts, options.workers)
    report.timings["total"] = time.perf_counter() - t_start
    return total, report

