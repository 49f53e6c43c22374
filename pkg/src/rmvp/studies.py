"""Numerical experiments: convergence, runtime, interface distance, quadrupole.

Each runner takes a frozen config dataclass and returns a
:class:`StudyResult` (records plus fitted slopes). Records keep every raw
value; ``write_csv`` emits the fixed column set of the study.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import biot_savart as bs
from . import formulations as fm
from .fem import Disk, energy, l2_error
from .materials import MU0, LinearMaterial, default_steel, material_from_spec
from .mesh import mean_edge_length, mesh_length
from .meshgen import disk_in_annulus, rect_in_rect

logger = logging.getLogger(__name__)

CSV_COLUMNS = {
    "convergence": ["h", "rel_err_eval", "rel_err_total", "energy_eval"],
    "runtime": ["formulation", "total_s", "biot_savart_s", "kernel_evals"],
    "distance": ["delta_rel", "rel_L2_err_B"],
    "quadrupole": ["lines_per_winding", "median_rel_diff", "newton_iterations", "final_residual"],
}


class StudyError(RuntimeError):
    pass


# -- records and fits -------------------------------------------------------------

@dataclass(frozen=True)
class SlopeFit:
    """Least-squares line through (log x, log y)."""

    slope: float
    intercept: float
    residual: float  # RMS residual in natural-log space
    ci95: float      # half-width of the 95 % interval of the slope
    n_points: int

    @property
    def reliable(self) -> bool:
        return self.n_points >= 3 and self.residual < 0.1


def fit_slope(x, y) -> SlopeFit:
    """Fit ``log y = slope log x + c``; needs at least three points."""
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    if len(x) < 3:
        raise StudyError(f"slope fits need at least 3 points, got {len(x)}")
    res = stats.linregress(x, y)
    pred = res.intercept + res.slope * x
    rms = float(np.sqrt(np.mean((y - pred) ** 2)))
    t = stats.t.ppf(0.975, len(x) - 2)
    return SlopeFit(float(res.slope), float(res.intercept), rms, float(t * res.stderr), len(x))


@dataclass(frozen=True)
class StudyRecord:
    study: str
    variable: str
    value: object
    quantities: dict

    def row(self, columns):
        data = {self.variable: self.value, **self.quantities}
        return [data[c] for c in columns]


@dataclass
class StudyResult:
    study: str
    records: list
    fits: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([r.row([name])[0] for r in self.records])

    def write_csv(self, path):
        cols = CSV_COLUMNS[self.study]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                w.writerow([_cell(v) for v in r.row(cols)])
        return Path(path)

    def to_json(self, include_raw=True) -> dict:
        out = {
            "study": self.study,
            "fits": {k: asdict(v) if isinstance(v, SlopeFit) else v for k, v in self.fits.items()},
            "summary": self.summary,
        }
        if include_raw:
            out["records"] = [{"variable": r.variable, "value": r.value, **r.quantities} for r in self.records]
        return out

    def write_json(self, path, include_raw=True):
        Path(path).write_text(json.dumps(_jsonable(self.to_json(include_raw)), indent=2, sort_keys=True) + "\n")
        return Path(path)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def config_from_mapping(cls, mapping):
    """Build a config dataclass, rejecting unknown keys."""
    names = {f.name for f in fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
              for k, v in mapping.items()}
    return cls(**kwargs)


# -- multipoles ---------------------------------------------------------------------

@dataclass(frozen=True)
class MultipoleSpectrum:
    """Normal (B_n) and skew (A_n) harmonics of B_r at the reference radius.

    ``B_r(R, phi) = sum_n B_n sin(n phi) + A_n cos(n phi)``, equivalently
    ``By + i Bx = sum_n (B_n + i A_n) (z / R)^(n-1)``.
    """

    radius: float
    center: tuple
    normal: np.ndarray  # index n-1
    skew: np.ndarray

    @property
    def orders(self):
        return np.arange(1, len(self.normal) + 1)

    @property
    def magnitude(self):
        return np.hypot(self.normal, self.skew)

    def dominant(self) -> int:
        return int(np.argmax(self.magnitude)) + 1

    def dominance_ratio(self, n=None) -> float:
        n = self.dominant() if n is None else n
        mag = self.magnitude
        others = np.delete(mag, n - 1)
        return float(mag[n - 1] / others.max()) if others.max() > 0 else np.inf

    def to_dict(self):
        return {"radius": self.radius, "center": list(self.center),
                "B_n": self.normal.tolist(), "A_n": self.skew.tolist()}


def multipoles(field, radius, center=(0.0, 0.0), order=10, samples=None, sources=None) -> MultipoleSpectrum:
    """Discrete Fourier analysis of the radial flux density on a circle.

    ``field`` is anything with ``evaluate(points)`` or a callable returning
    ``(Az, B)``. Samples default to ``max(8 order, 64)`` equispaced points.
    """
    if radius <= 0 or order < 1:
        raise ValueError("radius and order must be positive")
    m = samples or max(8 * order, 64)
    if m < 2 * order + 1:
        raise ValueError("too few samples for the requested order")
    cx, cy = center
    srcs = sources if sources is not None else getattr(field, "sources", None)
    if srcs is not None and len(srcs):
        r = np.hypot(srcs.positions[:, 0] - cx, srcs.positions[:, 1] - cy)
        if np.any(np.abs(r - radius) < 1e-3 * radius):
            raise ValueError("the multipole circle passes through a line current")
    phi = 2 * np.pi * np.arange(m) / m
    pts = np.column_stack([cx + radius * np.cos(phi), cy + radius * np.sin(phi)])
    mesh = getattr(field, "mesh", None)
    if mesh is not None:
        tri, _ = mesh.locator.find(pts)
        if np.any(tri < 0) or np.any(mesh.iron[tri]):
            raise ValueError("the multipole circle leaves the air region")
    _, b = field.evaluate(pts) if hasattr(field, "evaluate") else field(pts)
    br = b[:, 0] * np.cos(phi) + b[:, 1] * np.sin(phi)
    n = np.arange(1, order + 1)[:, None]
    normal = 2.0 / m * (np.sin(n * phi) @ br)
    skew = 2.0 / m * (np.cos(n * phi) @ br)
    return MultipoleSpectrum(float(radius), (float(cx), float(cy)), normal, skew)


# -- racetrack geometry ----------------------------------------------------------------

@dataclass(frozen=True)
class Racetrack:
    """Racetrack cross-section; defaults follow the benchmark's proportions (m).

    Two groups of 3 x 3 square half-turns carry +I (right) and -I (left).
    """

    outer: tuple = (0.51, 0.33)
    inner: tuple = (0.31, 0.13)
    block_x: tuple = (0.075, 0.105)
    block_y: tuple = (-0.015, 0.015)
    grid: int = 3
    current: float = 100.0
    mu_r: float = 4000.0
    eval_radius: float = 0.05

    def windings(self):
        out = []
        xs = np.linspace(*self.block_x, self.grid + 1)
        ys = np.linspace(*self.block_y, self.grid + 1)
        for sign in (1.0, -1.0):
            for i in range(self.grid):
                x0, x1 = (xs[i], xs[i + 1]) if sign > 0 else (-xs[self.grid - i], -xs[self.grid - i - 1])
                for j in range(self.grid):
                    out.append(fm.WindingRegion.rectangle(x0, x1, ys[j], ys[j + 1], sign * self.current))
        return out

    def boxes(self):
        return [(w.polygon[0, 0], w.polygon[1, 0], w.polygon[0, 1], w.polygon[2, 1]) for w in self.windings()]

    def line_currents(self, per_side=1):
        """Each half-turn as ``per_side**2`` filaments sharing its current."""
        pos, cur = [], []
        f = (np.arange(per_side) + 0.5) / per_side
        for w in self.windings():
            x0, x1, y0, y1 = w.polygon[0, 0], w.polygon[1, 0], w.polygon[0, 1], w.polygon[2, 1]
            X, Y = np.meshgrid(x0 + f * (x1 - x0), y0 + f * (y1 - y0), indexing="ij")
            pos.append(np.column_stack([X.ravel(), Y.ravel()]))
            cur.append(np.full(per_side ** 2, w.current / per_side ** 2))
        return bs.SourceSet.from_arrays(np.vstack(pos), np.concatenate(cur))

    def mesh(self, h):
        return rect_in_rect(self.outer, self.inner, h, self.boxes(), eval_disk=(0.0, 0.0, self.eval_radius))

    @property
    def material(self):
        return LinearMaterial(self.mu_r)


# -- convergence -------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceConfig:
    levels: tuple = (0.04, 0.02, 0.01, 0.005, 0.0025)
    reference_h: float = 0.000625
    formulation: str = "updated"
    projection: str = "nodal"
    geometry: Racetrack = Racetrack()


def run_convergence(config: ConvergenceConfig = ConvergenceConfig(), workers=1) -> StudyResult:
    """L2 errors of B against a fine volumetric reference under refinement."""
    if len(config.levels) < 4:
        raise StudyError("a convergence study needs at least four meshes")
    geo = config.geometry
    mat = geo.material
    ref_mesh = geo.mesh(config.reference_h)
    ref, _ = fm.solve_reference(ref_mesh, geo.windings(), mat)
    ref_energy = energy(ref, mat, "eval")
    sources = geo.line_currents()
    records = []
    for h in config.levels:
        m = geo.mesh(h)
        if config.formulation == "updated":
            total, _ = fm.solve_updated(m, sources, mat, fm.UpdatedOptions(workers=workers))
        elif config.formulation == "original":
            total, _ = fm.solve_original(m, sources, mat, projection=config.projection, workers=workers)
        else:
            raise StudyError(f"unknown formulation {config.formulation!r}")
        _, e_eval = l2_error(ref, total, "eval", "B")
        _, e_total = l2_error(ref, total, "all", "B")
        records.append(StudyRecord("convergence", "h", mesh_length(m), {
            "h_target": h,
            "h_mean": mean_edge_length(m),
            "n_nodes": m.n_nodes,
            "rel_err_eval": e_eval,
            "rel_err_total": e_total,
            "energy_eval": energy(total, mat, "eval", rule="midpoint"),
        }))
        logger.info("convergence h=%g: eval %.3e, total %.3e", h, e_eval, e_total)
    result = StudyResult("convergence", records)
    hs = result.column("h")
    result.fits["rel_err_eval"] = fit_slope(hs, result.column("rel_err_eval"))
    result.fits["rel_err_total"] = fit_slope(hs, result.column("rel_err_total"))
    result.summary = {
        "reference_h": config.reference_h,
        "reference_nodes": ref_mesh.n_nodes,
        "reference_energy_eval": ref_energy,
        "formulation": config.formulation,
    }
    return result


# -- runtime -----------------------------------------------------------------------------

@dataclass(frozen=True)
class RuntimeConfig:
    h: float = 0.00125
    filaments_per_side: int = 31
    repeats: int = 3
    geometry: Racetrack = Racetrack()


RUNTIME_ROWS = ("original", "updated-Va", "updated-Gamma")


def run_runtime(config: RuntimeConfig = RuntimeConfig()) -> StudyResult:
    """Wall-clock and kernel counts of the three source-evaluation strategies.

    Each configuration runs ``repeats`` times sequentially; the fastest run
    is reported. Kernel counts are exact and identical across repeats.
    """
    geo = config.geometry
    mat = geo.material
    mesh = geo.mesh(config.h)
    sources = geo.line_currents(config.filaments_per_side)
    interface = fm.extract_interface(mesh)

    def run(kind):
        if kind == "original":
            return fm.solve_original(mesh, sources, mat)
        opts = fm.UpdatedOptions(air_source_nodes=(kind == "updated-Va"))
        return fm.solve_updated(mesh, sources, mat, opts, interface=interface)

    records = []
    for kind in RUNTIME_ROWS:
        best = None
        for _ in range(max(1, config.repeats)):
            _, rep = run(kind)
            if best is None or rep.timings["total"] < best.timings["total"]:
                best = rep
        records.append(StudyRecord("runtime", "formulation", kind, {
            "total_s": best.timings["total"],
            "biot_savart_s": best.timings.get("source_eval", 0.0),
            "kernel_evals": int(best.biot_savart["kernel_evals"]),
            "target_evals": int(best.biot_savart["target_evals"]),
        }))
        logger.info("runtime %s: %.3f s", kind, best.timings["total"])
    result = StudyResult("runtime", records)
    t = {r.value: r.quantities for r in records}
    result.summary = {
        "n_nodes": mesh.n_nodes,
        "dofs": int(mesh.n_nodes - len(mesh.boundary_nodes)),
        "n_gamma": interface.n_nodes,
        "n_sources": len(sources),
        "speedup_gamma_vs_original": t["original"]["total_s"] / t["updated-Gamma"]["total_s"],
        "kernel_ratio_gamma_vs_original": t["updated-Gamma"]["kernel_evals"] / t["original"]["kernel_evals"],
        "biot_savart_share_original": t["original"]["biot_savart_s"] / t["original"]["total_s"],
    }
    return result


# -- distance ------------------------------------------------------------------------------

@dataclass(frozen=True)
class DistanceConfig:
    r_outer: float = 1.0
    source_x: float = 0.5
    current: float = 1.0
    h: float = 0.01
    gaps: tuple = tuple(np.geomspace(1e-3, 0.2, 14).tolist())
    exclusion_radius: float = 0.25


def grounded_cylinder_field(x0, current, r_outer):
    """Line current at (x0, 0) inside a grounded cylinder of radius r_outer.

    Closed form by the method of images (image current -I at r_outer^2/x0).
    """
    xi = r_outer ** 2 / x0
    c = MU0 * current / (2 * np.pi)

    def field(p):
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        dx, dy = p[:, 0] - x0, p[:, 1]
        ex, ey = p[:, 0] - xi, p[:, 1]
        r2, q2 = dx * dx + dy * dy, ex * ex + ey * ey
        az = c * (0.5 * np.log(q2 / r2) + np.log(x0 / r_outer))
        dadx = c * (ex / q2 - dx / r2)
        dady = c * (ey / q2 - dy / r2)
        return az, np.column_stack([dady, -dadx])

    return field


def decaying_branch(delta, err):
    """Indices from the error maximum to the last point above twice the floor.

    The floor is the error at the largest relative distance.
    """
    order = np.argsort(delta)
    e = np.asarray(err)[order]
    floor = e[-1]
    start = int(np.argmax(e))
    stop = start
    while stop + 1 < len(e) and e[stop + 1] > 2 * floor:
        stop += 1
    return order[start:stop + 1], floor


def run_distance(config: DistanceConfig = DistanceConfig(), workers=1) -> StudyResult:
    """Error of the updated formulation as an artificial interface nears the source.

    Vacuum everywhere, homogeneous Dirichlet at ``r_outer``; the interface
    radius is ``source_x + gap``. Errors are measured against the closed form
    on the elements outside ``exclusion_radius`` around the line current
    (the source's own field is not square integrable).
    """
    x0, R = config.source_x, config.r_outer
    exact = grounded_cylinder_field(x0, config.current, R)
    sources = bs.SourceSet([(x0, 0.0, config.current)])
    vac = LinearMaterial(1.0)
    records = []
    for gap in config.gaps:
        r_gamma = x0 + gap
        delta = gap / r_gamma
        if delta < 1e-4:
            raise StudyError(f"relative distance {delta:.2e} is below 1e-4")
        if r_gamma >= R:
            raise StudyError("the interface must lie inside the outer boundary")
        m = disk_in_annulus(r_gamma, R, config.h)
        total, rep = fm.solve_updated(m, sources, vac, fm.UpdatedOptions(min_gap_fraction=0.0, warn_delta=0.0, workers=workers))
        d = np.hypot(m.centroids[:, 0] - x0, m.centroids[:, 1])
        sel = d > config.exclusion_radius
        _, rel = l2_error(exact, total, sel, "B", mesh=m)
        records.append(StudyRecord("distance", "delta_rel", delta, {
            "gap_m": gap,
            "r_gamma": r_gamma,
            "rel_L2_err_B": rel,
            "kg_current_error": total.parts["Kg"].integral() - config.current,
            "n_gamma": int(rep.dofs["trace"]),
        }))
        logger.info("distance delta=%.3g: %.3e", delta, rel)
    result = StudyResult("distance", records)
    delta = result.column("delta_rel")
    err = result.column("rel_L2_err_B")
    idx, floor = decaying_branch(delta, err)
    if len(idx) >= 3:
        result.fits["rel_L2_err_B"] = fit_slope(delta[idx], err[idx])
    big = delta >= 0.1
    result.summary = {
        "floor": floor,
        "branch_delta": delta[np.sort(idx)].tolist(),
        "max_ratio_to_floor_at_delta_ge_0.1": float(np.max(err[big] / floor)) if big.any() else None,
        "h": config.h,
        "exclusion_radius": config.exclusion_radius,
    }
    return result


# -- quadrupole --------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadrupoleConfig:
    r_aperture: float = 0.1
    r_yoke: float = 0.2
    h: float = 0.002
    reference_h: float = 0.0005
    current: float = 40000.0
    radii: tuple = (0.06, 0.07)
    angles_deg: tuple = (8.0, 30.0)
    winding_size: tuple = (0.008, 0.004)
    lines_per_winding: int = 1
    compare_lines: tuple = (1, 2)
    multipole_radius: float = 0.03
    multipole_order: int = 10
    material: dict = field(default_factory=lambda: {"kind": "bh_table"})


def quadrupole_layout(config: QuadrupoleConfig):
    """Windings (rotated rectangles) of a 4-fold antisymmetric quadrupole.

    One octant holds ``len(radii) * len(angles_deg)`` windings; the other
    octants follow by mirroring, with current sign ``sign(cos 2 phi)``.
    """
    L, W = config.winding_size
    out = []
    for k in range(8):
        for r in config.radii:
            for a in np.deg2rad(config.angles_deg):
                phi = k * np.pi / 4 + (a if k % 2 == 0 else np.pi / 4 - a)
                sign = np.sign(np.cos(2 * phi))
                c = r * np.array([np.cos(phi), np.sin(phi)])
                er = np.array([np.cos(phi), np.sin(phi)])
                et = np.array([-er[1], er[0]])
                poly = np.array([c - L / 2 * er - W / 2 * et, c + L / 2 * er - W / 2 * et,
                                 c + L / 2 * er + W / 2 * et, c - L / 2 * er + W / 2 * et])
                out.append(fm.WindingRegion(poly, sign * config.current))
    return out


def winding_lines(windings, per_winding=1) -> bs.SourceSet:
    """Split each winding's current over equispaced points on its long axis."""
    pos, cur = [], []
    for w in windings:
        p = w.polygon
        c = w.centroid
        axis = 0.5 * (p[1] + p[2]) - 0.5 * (p[0] + p[3])
        for k in range(per_winding):
            f = (k + 0.5) / per_winding - 0.5
            pos.append(c + f * axis)
            cur.append(w.current / per_winding)
    return bs.SourceSet.from_arrays(np.array(pos), np.array(cur))


def run_quadrupole_demo(config: QuadrupoleConfig = QuadrupoleConfig(), workers=1):
    """Nonlinear updated-RMVP quadrupole against a volumetric reference.

    Returns ``(total, spectrum, result)`` for ``lines_per_winding``;
    ``result`` holds one record per entry of ``compare_lines``.
    """
    material = material_from_spec(config.material)
    windings = quadrupole_layout(config)
    mesh = disk_in_annulus(config.r_aperture, config.r_yoke, config.h)
    ref_mesh = disk_in_annulus(config.r_aperture, config.r_yoke, config.reference_h)
    ref, ref_rep = fm.solve_reference(ref_mesh, windings, material)
    c = mesh.centroids
    counts = sorted(set(config.compare_lines) | {config.lines_per_winding})
    records, main = [], None
    for n in counts:
        sources = winding_lines(windings, n)
        total, rep = fm.solve_updated(mesh, sources, material, fm.UpdatedOptions(workers=workers))
        near = np.zeros(len(c), dtype=bool)
        for x, y in sources.positions:
            near |= np.hypot(c[:, 0] - x, c[:, 1] - y) <= 3 * config.h
        pts = c[~near]
        _, b = total.evaluate(pts, mesh, np.flatnonzero(~near), np.full((len(pts), 3), 1 / 3))
        _, b_ref = ref.evaluate(pts)
        rel = np.linalg.norm(b - b_ref, axis=1) / np.linalg.norm(b_ref, axis=1)
        spec = multipoles(total, config.multipole_radius, order=config.multipole_order)
        q = {
            "median_rel_diff": float(np.median(rel)),
            "p90_rel_diff": float(np.percentile(rel, 90)),
            "newton_iterations": rep.newton_iterations,
            "final_residual": rep.residual_history[-1] if rep.residual_history else 0.0,
            "dominant_order": spec.dominant(),
            "dominance_ratio": spec.dominance_ratio(),
            "center_field_rel": float(np.hypot(spec.normal[0], spec.skew[0]) / _pole_tip_scale(spec, config)),
        }
        if n in config.compare_lines:
            records.append(StudyRecord("quadrupole", "lines_per_winding", n, q))
        if n == config.lines_per_winding:
            main = (total, spec)
    result = StudyResult("quadrupole", records)
    result.summary = {
        "reference_nodes": ref_mesh.n_nodes,
        "reference_newton_iterations": ref_rep.newton_iterations,
        "mesh_nodes": mesh.n_nodes,
        "spectrum": main[1].to_dict(),
        "pole_tip_scale_T": _pole_tip_scale(main[1], config),
        "material": getattr(material, "name", "linear"),
    }
    return main[0], main[1], result


def _pole_tip_scale(spec: MultipoleSpectrum, config):
    """Quadrupole field extrapolated to the aperture radius, |B_2| r_a / R."""
    return float(np.hypot(spec.normal[1], spec.skew[1]) * config.r_aperture / spec.radius)


STUDIES = {
    "convergence": (ConvergenceConfig, run_convergence),
    "runtime": (RuntimeConfig, run_runtime),
    "distance": (DistanceConfig, run_distance),
    "quadrupole": (QuadrupoleConfig, run_quadrupole_demo),
}
