"""P1 finite elements for -div(nu grad Az) = Jz on triangle meshes.

With ``A = Az e_z`` the curl-curl operator reduces to the scalar Laplace-type
operator, ``B = (dAz/dy, -dAz/dx)`` and ``|B|^2 = |grad Az|^2``. Gradients of
P1 functions are element-constant, so reluctivities are evaluated once per
element.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .materials import NU0, LinearMaterial
from .mesh import MIN_AREA, InterfaceCurve, Mesh, MeshError, TriangleLocator

logger = logging.getLogger(__name__)

SOLVER_RTOL = 1e-10


class SolverError(RuntimeError):
    """Linear or nonlinear solve failed to reach its tolerance."""


# -- fields ------------------------------------------------------------------

@dataclass(frozen=True)
class Disk:
    """Circular selection; an element belongs to it iff its centroid does."""

    cx: float
    cy: float
    radius: float

    def contains(self, pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        return (pts[:, 0] - self.cx) ** 2 + (pts[:, 1] - self.cy) ** 2 < self.radius ** 2


def select_elements(mesh: Mesh, region_or_disk) -> np.ndarray:
    """Boolean element mask for a role name, a :class:`Disk` or a mask."""
    if isinstance(region_or_disk, Disk):
        return region_or_disk.contains(mesh.centroids)
    if isinstance(region_or_disk, np.ndarray) and region_or_disk.dtype == bool:
        return region_or_disk
    return mesh.region_mask(region_or_disk)


def _region_locator(mesh: Mesh, mask: np.ndarray):
    cache = mesh.__dict__.setdefault("_region_locators", {})
    key = mask.tobytes()
    if key not in cache:
        ids = np.flatnonzero(mask)
        loc = TriangleLocator(mesh.nodes, mesh.triangles[ids], mesh._geometry[2][ids])
        cache[key] = (ids, loc)
    return cache[key]


def locate_in(mesh: Mesh, mask: np.ndarray, points):
    """Locate points among the triangles selected by ``mask`` only."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if mask.all():
        tri, bary = mesh.locator.find(pts)
    else:
        ids, loc = _region_locator(mesh, mask)
        tri, bary = loc.find(pts)
        tri = np.where(tri >= 0, ids[np.maximum(tri, 0)], -1)
    return tri, bary


@dataclass(frozen=True, eq=False)
class FEFunction:
    """Continuous P1 function on the nodes of a mesh region.

    ``nodes`` holds the global ids of the region's nodes and ``values`` one
    coefficient (T m) per node. ``mask`` selects the region's triangles.
    """

    mesh: Mesh
    nodes: np.ndarray
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if len(self.nodes) != len(self.values):
            raise ValueError("one value per region node required")

    @classmethod
    def from_full(cls, mesh, full, region="all"):
        mask = select_elements(mesh, region)
        nodes = mesh.region_nodes(mask)
        return cls(mesh, nodes, np.asarray(full, dtype=float)[nodes], mask)

    @cached_property
    def full(self) -> np.ndarray:
        """Coefficients scattered to all mesh nodes (zero outside the region)."""
        out = np.zeros(self.mesh.n_nodes)
        out[self.nodes] = self.values
        return out

    @cached_property
    def element_b(self) -> np.ndarray:
        """Element-constant flux density (Bx, By) for every mesh triangle."""
        g = np.einsum("mi,mid->md", self.full[self.mesh.triangles], self.mesh.grads)
        return np.column_stack([g[:, 1], -g[:, 0]])

    def __add__(self, other):
        if not isinstance(other, FEFunction) or other.mesh is not self.mesh:
            return NotImplemented
        mask = self.mask | other.mask
        return FEFunction.from_full(self.mesh, self.full + other.full, mask)

    def __mul__(self, factor):
        return FEFunction(self.mesh, self.nodes, self.values * float(factor), self.mask)

    __rmul__ = __mul__

    def evaluate(self, points, mesh=None, elements=None, bary=None):
        """Return ``(Az, B)`` at points inside the region.

        ``elements``/``bary`` may be supplied when the points are known to
        lie in given triangles of this function's mesh.
        """
        if elements is None or mesh is not self.mesh:
            elements, bary = locate_in(self.mesh, self.mask, points)
            if np.any(elements < 0):
                p = np.asarray(points, dtype=float).reshape(-1, 2)[np.flatnonzero(elements < 0)[0]]
                raise MeshError(f"point ({p[0]:.6g}, {p[1]:.6g}) is outside the field's region")
        az = np.einsum("ni,ni->n", bary, self.full[self.mesh.triangles[elements]])
        return az, self.element_b[elements]


@dataclass(frozen=True, eq=False)
class TraceFunction:
    """P1 function on the interface nodes (A/m, tangential-H semantics)."""

    interface: InterfaceCurve
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.interface.n_nodes:
            raise ValueError("one value per interface node required")

    def __add__(self, other):
        if not isinstance(other, TraceFunction):
            return NotImplemented
        if other.interface is not self.interface:
            raise ValueError("trace functions live on different interfaces")
        return TraceFunction(self.interface, self.values + other.values)

    def integral(self) -> float:
        """Exact integral of the piecewise-linear trace along the curve."""
        el = self.interface.edge_local
        return float(np.sum(0.5 * (self.values[el[:, 0]] + self.values[el[:, 1]]) * self.interface.lengths))


def evaluate_field(f, points, mesh=None, elements=None, bary=None):
    """Evaluate an FEFunction, a composed field or a plain callable."""
    if hasattr(f, "evaluate"):
        return f.evaluate(points, mesh=mesh, elements=elements, bary=bary)
    return f(np.asarray(points, dtype=float).reshape(-1, 2))


def eval(field: FEFunction, point):  # noqa: A001 - operation name of the public API
    """Potential and flux density of ``field`` at one point or many."""
    pts = np.asarray(point, dtype=float)
    az, b = field.evaluate(pts.reshape(-1, 2))
    if pts.ndim == 1:
        return float(az[0]), b[0]
    return az, b


# -- assembly ----------------------------------------------------------------

def _check_areas(mesh, mask):
    a = mesh.areas[mask]
    if len(a) and a.min() <= MIN_AREA:
        raise MeshError(f"degenerate element (area {a.min():.3e} m^2)")


def _scatter(mesh, elems, local_mats, n=None):
    t = mesh.triangles[elems]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes if n is None else n
    return sparse.csr_matrix((local_mats.ravel(), (rows, cols)), shape=(n, n))


def element_b2(mesh: Mesh, full_values, background=None) -> np.ndarray:
    g = np.einsum("mi,mid->md", np.asarray(full_values)[mesh.triangles], mesh.grads)
    if background is not None:
        g = g + background
    return np.einsum("md,md->m", g, g)


def element_reluctivity(mesh: Mesh, material, b2, mask=None):
    """Per-element nu and dnu/dB^2: vacuum in air, ``material`` in iron.

    With ``mask`` given, ``material`` applies to exactly those elements.
    """
    target = mesh.iron if mask is None else mask
    nu = np.full(mesh.n_triangles, NU0)
    dnu = np.zeros(mesh.n_triangles)
    if material is not None and target.any():
        nu[target] = material.nu(b2[target])
        dnu[target] = material.dnu_db2(b2[target])
    return nu, dnu


def assemble_stiffness(mesh: Mesh, region="all", material=None, state=None, nu_elements=None):
    """Global stiffness matrix sum_e nu_e int grad(phi_i).grad(phi_j).

    ``material`` applies to the iron elements of ``region``; air elements
    use the vacuum reluctivity. Nonlinear materials need ``state``
    (an FEFunction or a full nodal vector) to evaluate B^2 per element.
    Passing ``nu_elements`` bypasses material evaluation.
    """
    mask = select_elements(mesh, region)
    _check_areas(mesh, mask)
    if nu_elements is None:
        if material is not None and not material.is_linear:
            if state is None:
                raise ValueError("nonlinear material needs a state to assemble")
            full = state.full if isinstance(state, FEFunction) else state
            b2 = element_b2(mesh, full)
        else:
            b2 = np.zeros(mesh.n_triangles)
        nu_elements, _ = element_reluctivity(mesh, material, b2)
    elems = np.flatnonzero(mask)
    G = mesh.grads[elems]
    local = (nu_elements[elems] * mesh.areas[elems])[:, None, None] * np.einsum("mid,mjd->mij", G, G)
    return _scatter(mesh, elems, local)


def assemble_newton(mesh: Mesh, region, material, state, rhs=None, background=None):
    """Jacobian and residual of the nonlinear stiffness operator.

    ``residual = K(a) a - rhs`` and ``J = K(a) + sum_e 2 nu'_e area_e
    (G_e g_e)(G_e g_e)^T`` with ``g_e`` the element gradient. An optional
    element-wise ``background`` gradient is added to ``g_e`` before nu is
    evaluated (used when part of the field is known analytically).
    """
    mask = select_elements(mesh, region)
    _check_areas(mesh, mask)
    full = state.full if isinstance(state, FEFunction) else np.asarray(state, dtype=float)
    elems = np.flatnonzero(mask)
    G = mesh.grads[elems]
    g = np.einsum("mi,mid->md", full[mesh.triangles[elems]], G)
    if background is not None:
        g = g + background[elems]
    b2 = np.zeros(mesh.n_triangles)
    b2[elems] = np.einsum("md,md->m", g, g)
    nu, dnu = element_reluctivity(mesh, material, b2)
    area = mesh.areas[elems]
    Gg = np.einsum("mid,md->mi", G, g)
    K_loc = (nu[elems] * area)[:, None, None] * np.einsum("mid,mjd->mij", G, G)
    J_loc = K_loc + (2 * dnu[elems] * area)[:, None, None] * np.einsum("mi,mj->mij", Gg, Gg)
    res = np.bincount(mesh.triangles[elems].ravel(), weights=((nu[elems] * area)[:, None] * Gg).ravel(),
                      minlength=mesh.n_nodes)
    if rhs is not None:
        res = res - rhs
    return _scatter(mesh, elems, J_loc), res


def mass_matrix(mesh: Mesh, region="all"):
    """Consistent P1 mass matrix on the selected elements."""
    mask = select_elements(mesh, region)
    elems = np.flatnonzero(mask)
    loc = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    local = mesh.areas[elems][:, None, None] * loc[None]
    return _scatter(mesh, elems, local)


def assemble_interface_coupling(interface: InterfaceCurve, n_nodes=None):
    """Rectangular coupling int_Gamma phi_i psi_j ds.

    Rows are global mesh nodes (``n_nodes`` of them), columns the interface
    trace basis in loop order.
    """
    M = interface.mass_matrix().tocoo()
    n = int(interface.nodes.max()) + 1 if n_nodes is None else n_nodes
    return sparse.csr_matrix((M.data, (interface.nodes[M.row], M.col)), shape=(n, interface.n_nodes))


def assemble_surface_current_rhs(interface: InterfaceCurve, kg: TraceFunction, n_nodes=None):
    """Load vector b_i = int_Gamma Kg phi_i ds for a P1 surface current."""
    if kg.interface is not interface and kg.interface.nodes is not interface.nodes:
        raise ValueError("surface current lives on a different interface")
    return assemble_interface_coupling(interface, n_nodes) @ kg.values


def line_source_rhs(mesh: Mesh, positions, currents):
    """Point loads sum_k I_k phi_i(r_k) of line currents (Dirac sources)."""
    tri, bary = mesh.locator.find(positions)
    if np.any(tri < 0):
        raise MeshError("a line current lies outside the mesh")
    return np.bincount(mesh.triangles[tri].ravel(), weights=(bary * np.asarray(currents)[:, None]).ravel(),
                       minlength=mesh.n_nodes)


def volume_source_rhs(mesh: Mesh, jz_elements):
    """Load vector of an element-constant current density (A/m^2)."""
    w = np.repeat((jz_elements * mesh.areas / 3.0)[:, None], 3, axis=1)
    return np.bincount(mesh.triangles.ravel(), weights=w.ravel(), minlength=mesh.n_nodes)


# -- linear solves -------------------------------------------------------------

@dataclass
class SparseSystem:
    """Symmetric system with Dirichlet constraints ``x[fixed] = fixed_values``."""

    matrix: sparse.spmatrix
    rhs: np.ndarray
    fixed: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    fixed_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    indefinite: bool = False

    def reduced(self):
        n = self.matrix.shape[0]
        free = np.ones(n, dtype=bool)
        free[self.fixed] = False
        A = sparse.csr_matrix(self.matrix)
        x = np.zeros(n)
        x[self.fixed] = self.fixed_values
        b = self.rhs[free] - A[free][:, ~free] @ x[~free]
        return A[free][:, free], b, free, x


def _factor_solve(A, b, symmetric):
    A = sparse.csc_matrix(A)
    # Symmetric equilibration: row scales differ by the reluctivity contrast
    # (and by ~1e7 between stiffness and constraint rows), so the residual
    # is measured on the scaled system.
    d = 1.0 / np.sqrt(np.maximum(abs(A).max(axis=1).toarray().ravel(), np.finfo(float).tiny))
    D = sparse.diags(d)
    return d * _factor_solve_scaled(sparse.csc_matrix(D @ A @ D), d * b, symmetric)


def _factor_solve_scaled(A, b, symmetric):
    if symmetric:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    else:
        # minimum degree on A^T + A fills in badly around the zero block
        lu = spla.splu(A, permc_spec="COLAMD")
    x = lu.solve(b)
    a_norm = spla.norm(A, np.inf)

    def backward_error(r, x):
        scale = a_norm * np.abs(x).max(initial=0.0) + np.abs(b).max(initial=0.0)
        return np.abs(r).max(initial=0.0) / scale if scale else 0.0

    r = b - A @ x
    err = backward_error(r, x)
    for _ in range(3):
        if err <= SOLVER_RTOL * 1e-3:
            break
        x_new = x + lu.solve(r)
        r_new = b - A @ x_new
        err_new = backward_error(r_new, x_new)
        if err_new >= err:
            break
        x, r, err = x_new, r_new, err_new
    if not np.isfinite(err) or err > SOLVER_RTOL:
        raise SolverError(f"linear solve reached relative residual {err:.3e} > {SOLVER_RTOL:g}")
    return x


def solve_spd(system, rhs=None):
    """Solve a symmetric system by sparse LU with a symmetric ordering.

    Accepts a :class:`SparseSystem` (constraints are eliminated, the full
    vector is returned) or a bare matrix and right-hand side. Systems
    flagged ``indefinite`` (saddle points) are factored with partial
    pivoting. Both are equilibrated first. The normwise relative residual
    ``|r| / (|A| |x| + |b|)`` (max norms, scaled system) must end below
    1e-10 after iterative refinement, else :class:`SolverError` is raised.
    """
    if not isinstance(system, SparseSystem):
        system = SparseSystem(system, np.asarray(rhs, dtype=float))
    A, b, free, x = system.reduced()
    if A.shape[0] == 0:
        return x
    if not np.any(b):
        return x
    try:
        x[free] = _factor_solve(A, b, symmetric=not system.indefinite)
    except RuntimeError as exc:
        if isinstance(exc, SolverError):
            raise
        raise SolverError(f"factorization failed: {exc}") from exc
    return x


# -- Newton --------------------------------------------------------------------

@dataclass
class NewtonResult:
    values: np.ndarray
    iterations: int
    residuals: list
    converged: bool


def solve_nonlinear(mesh: Mesh, material, rhs, fixed, fixed_values, background=None,
                    tol=1e-8, max_iter=50, max_halvings=10, x0=None) -> NewtonResult:
    """Newton iteration with residual-halving line search on the full mesh.

    ``material`` governs the iron elements, air is vacuum. The relative
    residual is measured against the residual of the starting guess.
    """
    n = mesh.n_nodes
    free = np.ones(n, dtype=bool)
    free[fixed] = False
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    x[fixed] = fixed_values

    def residual(v):
        J, r = assemble_newton(mesh, "all", material, v, rhs, background)
        return J, r

    J, r = residual(x)
    ref = np.linalg.norm(r[free])
    history = [1.0 if ref > 0 else 0.0]
    if ref == 0:
        return NewtonResult(x, 0, history, True)
    norm = ref
    for it in range(1, max_iter + 1):
        Jf = J[free][:, free]
        dx = np.zeros(n)
        dx[free] = _factor_solve(Jf, -r[free], symmetric=True)
        step = 1.0
        for _ in range(max_halvings + 1):
            x_new = x + step * dx
            J_new, r_new = residual(x_new)
            norm_new = np.linalg.norm(r_new[free])
            if norm_new < norm:
                break
            step *= 0.5
        else:
            logger.warning("line search could not reduce the residual at iteration %d", it)
            return NewtonResult(x, it - 1, history, False)
        x, J, r, norm = x_new, J_new, r_new, norm_new
        history.append(norm / ref)
        logger.debug("newton %d: relative residual %.3e (step %.3g)", it, history[-1], step)
        if history[-1] <= tol:
            return NewtonResult(x, it, history, True)
    return NewtonResult(x, max_iter, history, False)


# -- post-processing -------------------------------------------------------------

_EDGE_MID_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])


def _quad_points(mesh, elems, rule):
    if rule == "centroid":
        bary = np.full((1, 3), 1 / 3)
        w = np.ones(1)
    else:
        bary = _EDGE_MID_BARY
        w = np.full(3, 1 / 3)
    verts = mesh.nodes[mesh.triangles[elems]]
    pts = np.einsum("qk,mkd->mqd", bary, verts).reshape(-1, 2)
    e = np.repeat(elems, len(w))
    b = np.tile(bary, (len(elems), 1))
    wt = (mesh.areas[elems][:, None] * w[None]).ravel()
    return pts, e, b, wt


def energy(field, material=None, region_or_disk="all", mesh=None, rule="centroid") -> float:
    """Magnetic energy per unit length, 1/2 sum_e nu_e |B|^2 area (J/m).

    ``material`` applies to iron elements (air is vacuum). Fields whose B
    varies inside elements (composed fields) should use ``rule="midpoint"``.
    """
    mesh = getattr(field, "mesh", None) or mesh
    elems = np.flatnonzero(select_elements(mesh, region_or_disk))
    pts, e, bary, w = _quad_points(mesh, elems, rule)
    _, b = evaluate_field(field, pts, mesh, e, bary)
    b2 = np.einsum("nd,nd->n", b, b)
    nu_e = np.full(len(e), NU0)
    iron = mesh.iron[e]
    if material is not None and iron.any():
        nu_e[iron] = material.nu(b2[iron])
    return float(0.5 * np.sum(nu_e * b2 * w))


def l2_error(f, g, region_or_disk="all", quantity="B", mesh=None):
    """Absolute and relative L2 distance between two fields.

    Quadrature runs over the elements of ``mesh`` (default: the mesh of
    ``f``, else of ``g``) selected by ``region_or_disk``; element centroids
    for B and edge midpoints for Az. The relative value is normalised by
    the norm of ``f``.
    """
    mesh = mesh or getattr(f, "mesh", None) or getattr(g, "mesh", None)
    if mesh is None:
        raise ValueError("l2_error needs a mesh for quadrature")
    elems = np.flatnonzero(select_elements(mesh, region_or_disk))
    rule = "centroid" if quantity == "B" else "midpoint"
    pts, e, bary, w = _quad_points(mesh, elems, rule)
    fa, fb = evaluate_field(f, pts, mesh, e, bary)
    ga, gb = evaluate_field(g, pts, mesh, e, bary)
    if quantity == "B":
        d2 = np.einsum("nd,nd->n", fb - gb, fb - gb)
        n2 = np.einsum("nd,nd->n", fb, fb)
    elif quantity == "Az":
        d2 = (fa - ga) ** 2
        n2 = fa ** 2
    else:
        raise ValueError(f"quantity must be 'Az' or 'B', got {quantity!r}")
    err = float(np.sqrt(np.sum(d2 * w)))
    ref = float(np.sqrt(np.sum(n2 * w)))
    return err, (err / ref if ref > 0 else np.inf if err > 0 else 0.0)


def vacuum_material():
    return LinearMaterial(1.0)
