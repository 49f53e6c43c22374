"""2D Biot-Savart fields of out-of-plane line currents.

A line current ``I`` at ``r_k`` produces ``Az = mu0 I / (2 pi) ln(1/|r - r_k|)``
and ``H = I / (2 pi) (-(y - y_k), x - x_k) / |r - r_k|^2``. Sums over sources
always run in source-list order, so results do not depend on how target
points are split across workers.
"""

from __future__ import annotations

import csv
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .fem import FEFunction, TraceFunction, mass_matrix, solve_spd
from .materials import MU0
from .mesh import InterfaceCurve, Mesh

SINGULAR_DISTANCE = 1e-12


class SingularEvaluationError(ValueError):
    """Field requested at (or numerically on top of) a line current."""


@dataclass(frozen=True)
class LineCurrent:
    x: float
    y: float
    current: float

    def __post_init__(self):
        if not np.isfinite(self.current):
            raise ValueError("line current must be finite")


class EvalCounter:
    """Exact counters of target points and source-target kernel evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self.targets = 0
        self.kernels = 0

    def add(self, targets, kernels):
        with self._lock:
            self.targets += int(targets)
            self.kernels += int(kernels)

    def reset(self):
        with self._lock:
            self.targets = 0
            self.kernels = 0

    def snapshot(self):
        with self._lock:
            return {"target_evals": self.targets, "kernel_evals": self.kernels}


class SourceSet:
    """Ordered collection of line currents; fields superpose."""

    def __init__(self, currents=()):
        items = [c if isinstance(c, LineCurrent) else LineCurrent(*c) for c in currents]
        self.positions = np.array([[c.x, c.y] for c in items], dtype=float).reshape(-1, 2)
        self.currents = np.array([c.current for c in items], dtype=float)
        self.counter = EvalCounter()

    @classmethod
    def from_arrays(cls, positions, currents):
        positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        currents = np.broadcast_to(np.asarray(currents, dtype=float), (len(positions),))
        return cls(LineCurrent(float(x), float(y), float(i))
                   for (x, y), i in zip(positions, currents))

    def __len__(self):
        return len(self.currents)

    def __iter__(self):
        for (x, y), i in zip(self.positions, self.currents):
            yield LineCurrent(float(x), float(y), float(i))

    def __repr__(self):
        return f"SourceSet({len(self)} line currents, total {self.currents.sum():.6g} A)"

    def scaled(self, factor) -> "SourceSet":
        return SourceSet.from_arrays(self.positions, self.currents * factor)

    @property
    def total_current(self) -> float:
        return float(self.currents.sum())


SOURCE_BLOCK = 256
TARGET_BLOCK = 2048


def _kernel(sources, pts, want_a, want_h):
    """Sum source contributions block by block.

    Source blocks have a fixed size and every row is reduced on its own, so
    a target's value does not depend on which other targets share the call.
    """
    n = len(pts)
    az = np.zeros(n) if want_a else None
    hx = np.zeros(n) if want_h else None
    hy = np.zeros(n) if want_h else None
    ca = -0.5 * MU0 / (2 * np.pi)
    tol2 = SINGULAR_DISTANCE ** 2
    pos, cur = sources.positions, sources.currents
    for t0 in range(0, n, TARGET_BLOCK):
        px = pts[t0:t0 + TARGET_BLOCK, 0:1]
        py = pts[t0:t0 + TARGET_BLOCK, 1:2]
        rows = slice(t0, t0 + TARGET_BLOCK)
        for s0 in range(0, len(cur), SOURCE_BLOCK):
            xk = pos[s0:s0 + SOURCE_BLOCK, 0]
            yk = pos[s0:s0 + SOURCE_BLOCK, 1]
            ik = cur[s0:s0 + SOURCE_BLOCK]
            dx = px - xk
            dy = py - yk
            r2 = dx * dx + dy * dy
            if r2.min(initial=np.inf) <= tol2:
                i, k = np.unravel_index(int(np.argmin(r2)), r2.shape)
                raise SingularEvaluationError(
                    f"field evaluated at ({px[i, 0]:.6g}, {py[i, 0]:.6g}), on the line current at "
                    f"({xk[k]:.6g}, {yk[k]:.6g})"
                )
            if want_a:
                az[rows] += np.log(r2) @ (ca * ik)
            if want_h:
                w = ik / (2 * np.pi) / r2
                hx[rows] -= np.einsum("ij,ij->i", w, dy)
                hy[rows] += np.einsum("ij,ij->i", w, dx)
    return az, hx, hy


def field_at(sources: SourceSet, points, workers=1):
    """Potential and field strength at ``points`` from one fused kernel pass.

    Returns ``(Az, H)`` with ``Az`` in T m (shape (n,)) and ``H`` in A/m
    (shape (n, 2)). Counts one kernel evaluation per (target, source) pair.
    """
    return _evaluate(sources, points, True, True, workers)


def az_at(sources: SourceSet, points, workers=1):
    pts = np.asarray(points, dtype=float)
    az, _ = _evaluate(sources, pts, True, False, workers)
    return float(az[0]) if pts.ndim == 1 else az


def h_at(sources: SourceSet, points, workers=1):
    pts = np.asarray(points, dtype=float)
    _, h = _evaluate(sources, pts, False, True, workers)
    return h[0] if pts.ndim == 1 else h


def _evaluate(sources, points, want_a, want_h, workers):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    sources.counter.add(n, n * len(sources))
    if workers <= 1 or n < 2 * workers:
        az, hx, hy = _kernel(sources, pts, want_a, want_h)
    else:
        chunks = np.array_split(np.arange(n), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda idx: _kernel(sources, pts[idx], want_a, want_h), chunks))
        az = np.concatenate([p[0] for p in parts]) if want_a else None
        hx = np.concatenate([p[1] for p in parts]) if want_h else None
        hy = np.concatenate([p[2] for p in parts]) if want_h else None
    h = np.column_stack([hx, hy]) if want_h else None
    return az, h


def eval_count(sources: SourceSet) -> dict:
    return sources.counter.snapshot()


def reset_count(sources: SourceSet) -> None:
    sources.counter.reset()


def interpolate_nodal(sources: SourceSet, mesh: Mesh, region="all", workers=1) -> FEFunction:
    """Nodal interpolant of the source potential on the nodes of ``region``."""
    mask = mesh.region_mask(region)
    nodes = mesh.region_nodes(mask)
    values = np.zeros(len(nodes))
    if len(sources):
        values = az_at(sources, mesh.nodes[nodes], workers=workers)
    return FEFunction(mesh, nodes, values, mask)


# 7-point, degree-5 rule on the reference triangle (barycentric coordinates)
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
QUAD7_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
    [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2],
])
QUAD7_WEIGHTS = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)

_RED = np.array([  # children of a triangle in barycentric coordinates of the parent
    [[1, 0, 0], [.5, .5, 0], [.5, 0, .5]],
    [[.5, .5, 0], [0, 1, 0], [0, .5, .5]],
    [[.5, 0, .5], [0, .5, .5], [0, 0, 1]],
    [[.5, .5, 0], [0, .5, .5], [.5, 0, .5]],
])


def projection_quadrature(mesh: Mesh, mask, sources: SourceSet, max_depth=6):
    """Quadrature points for the L2 projection right-hand side.

    Returns ``(element, bary, weight)`` per point, where ``bary`` are the
    barycentric coordinates in the parent element. Sub-triangles closer to
    a source than their own diameter are red-refined, up to ``max_depth``.
    """
    elems = np.flatnonzero(mask)
    sub = np.broadcast_to(np.eye(3), (len(elems), 3, 3)).copy()
    frac = np.ones(len(elems))
    out_e, out_b, out_w = [], [], []
    verts = mesh.nodes[mesh.triangles]
    for depth in range(max_depth + 1):
        phys = np.einsum("sij,sjk->sik", sub, verts[elems])
        if len(sources) and depth < max_depth:
            cen = phys.mean(axis=1)
            diam = np.max(np.linalg.norm(phys - np.roll(phys, 1, axis=1), axis=2), axis=1)
            near = np.zeros(len(elems), dtype=bool)
            for xy in sources.positions:
                near |= np.hypot(cen[:, 0] - xy[0], cen[:, 1] - xy[1]) < 1.5 * diam
        else:
            near = np.zeros(len(elems), dtype=bool)
        keep = ~near
        qb = np.einsum("qj,sjk->sqk", QUAD7_BARY, sub[keep])
        out_e.append(np.repeat(elems[keep], 7))
        out_b.append(qb.reshape(-1, 3))
        out_w.append((frac[keep, None] * QUAD7_WEIGHTS[None, :]).reshape(-1))
        if not near.any():
            break
        elems = np.repeat(elems[near], 4)
        sub = np.einsum("cij,sjk->scik", _RED, sub[near]).reshape(-1, 3, 3)
        frac = np.repeat(frac[near] / 4, 4)
    e = np.concatenate(out_e)
    b = np.concatenate(out_b)
    w = np.concatenate(out_w) * mesh.areas[e]
    return e, b, w


def project_l2(sources: SourceSet, mesh: Mesh, region="all", workers=1):
    """Weak L2 projection of the source potential onto P1 on ``region``.

    Returns the FEFunction and the depth-adaptive quadrature rule used.
    """
    mask = mesh.region_mask(region)
    nodes = mesh.region_nodes(mask)
    if not len(sources):
        return FEFunction(mesh, nodes, np.zeros(len(nodes)), mask)
    e, bary, w = projection_quadrature(mesh, mask, sources)
    pts = np.einsum("qk,qkd->qd", bary, mesh.nodes[mesh.triangles[e]])
    vals = az_at(sources, pts, workers=workers)
    local = np.full(mesh.n_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    rows = local[mesh.triangles[e]].ravel()
    rhs = np.bincount(rows, weights=(bary * (vals * w)[:, None]).ravel(), minlength=len(nodes))
    M = mass_matrix(mesh, mask)[nodes][:, nodes]
    values = solve_spd(sparse.csr_matrix(M), rhs)
    return FEFunction(mesh, nodes, values, mask)


def trace_tangential_h(sources: SourceSet, interface: InterfaceCurve, workers=1) -> TraceFunction:
    """Nodal values of t . H_s on the interface, t the curve's node tangent."""
    if not len(sources):
        return TraceFunction(interface, np.zeros(interface.n_nodes))
    _, h = field_at(sources, interface.points, workers=workers)
    t = interface.node_tangents
    return TraceFunction(interface, np.einsum("ij,ij->i", t, h))


def load_sources_csv(path) -> SourceSet:
    """Read line currents from a ``x_m,y_m,I_A`` CSV file."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.lstrip().startswith("#"))
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["x_m", "y_m", "I_A"]:
            raise ValueError(f"{path}: expected header 'x_m,y_m,I_A'")
        return SourceSet(LineCurrent(float(r["x_m"]), float(r["y_m"]), float(r["I_A"])) for r in reader)


def write_sources_csv(sources: SourceSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_m", "y_m", "I_A"])
        for c in sources:
            w.writerow([repr(c.x), repr(c.y), repr(c.current)])
