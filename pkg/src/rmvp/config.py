"""TOML run configurations.

A solve config has the tables ``[mesh]``, ``[material]``, ``[sources]``,
``[[windings]]``, ``[solve]``, ``[evaluate]`` and ``[output]``; a study
config has ``[study]`` (``name`` plus parameters) and ``[output]``.
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import biot_savart as bs
from . import formulations as fm
from .materials import material_from_spec
from .mesh import load_msh
from .meshgen import GEOMETRIES

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

FORMULATIONS = ("reference", "original", "updated")
TOP_LEVEL = {"mesh", "material", "sources", "windings", "solve", "evaluate", "output", "study", "run"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Circle:
    radius: float
    center: tuple = (0.0, 0.0)
    samples: int = 64


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration; see the module docstring for the layout."""

    path: Path
    mesh: dict = field(default_factory=dict)
    material: dict = field(default_factory=lambda: {"kind": "linear", "mu_r": 1.0})
    sources: dict = field(default_factory=dict)
    windings: tuple = ()
    formulation: str = "updated"
    solve: dict = field(default_factory=dict)
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    circles: tuple = ()
    output_dir: Path = Path("out")
    prefix: str = "run"
    timings: bool = False
    study: dict = field(default_factory=dict)
    workers: int = 1
    seed: int = 0

    @property
    def base_dir(self) -> Path:
        return self.path.parent

    @property
    def is_study(self) -> bool:
        return bool(self.study)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    # -- builders ----------------------------------------------------------

    def build_mesh(self):
        spec = dict(self.mesh)
        if "path" in spec:
            p = self.resolve(spec["path"])
            if not p.exists():
                raise ConfigError(f"mesh file not found: {p}")
            return load_msh(p, spec.get("tags"))
        geometry = spec.pop("geometry", None)
        if geometry not in GEOMETRIES:
            raise ConfigError(f"[mesh] needs 'path' or 'geometry' in {sorted(GEOMETRIES)}")
        spec.pop("tags", None)
        if geometry == "rect-in-rect" and spec.pop("windings_from_config", False):
            spec["windings"] = [_bbox(w.polygon) for w in self.build_windings()]
        for key in ("outer", "inner", "center", "eval_disk"):
            if key in spec:
                spec[key] = tuple(spec[key])
        if "windings" in spec:
            spec["windings"] = [tuple(w) for w in spec["windings"]]
        try:
            return GEOMETRIES[geometry](**spec)
        except TypeError as exc:
            raise ConfigError(f"[mesh] bad parameters for {geometry}: {exc}") from None

    def build_material(self):
        return material_from_spec(self.material, self.base_dir)

    def build_sources(self) -> bs.SourceSet:
        spec = self.sources
        if "path" in spec:
            p = self.resolve(spec["path"])
            if not p.exists():
                raise ConfigError(f"sources file not found: {p}")
            return bs.load_sources_csv(p)
        lines = spec.get("lines", [])
        if spec.get("from_windings"):
            lines = lines + [(w.centroid[0], w.centroid[1], w.current) for w in self.build_windings()]
        return bs.SourceSet([tuple(map(float, ln)) for ln in lines])

    def build_windings(self):
        return list(self.windings)

    def newton(self) -> fm.NewtonOptions:
        s = self.solve
        return fm.NewtonOptions(float(s.get("newton_tol", 1e-8)), int(s.get("newton_max_iter", 50)),
                                int(s.get("newton_max_halvings", 10)))

    def evaluation_points(self):
        """Requested points followed by the circle samples, with labels."""
        pts, labels = [self.points], [("point", i) for i in range(len(self.points))]
        for k, c in enumerate(self.circles):
            phi = 2 * np.pi * np.arange(c.samples) / c.samples
            pts.append(np.column_stack([c.center[0] + c.radius * np.cos(phi), c.center[1] + c.radius * np.sin(phi)]))
            labels += [(f"circle{k}", i) for i in range(c.samples)]
        return np.vstack(pts), labels


def _bbox(poly):
    return (float(poly[:, 0].min()), float(poly[:, 0].max()), float(poly[:, 1].min()), float(poly[:, 1].max()))


def _winding(item) -> fm.WindingRegion:
    if "current" not in item:
        raise ConfigError("each [[windings]] entry needs 'current'")
    if "rect" in item:
        x0, x1, y0, y1 = item["rect"]
        return fm.WindingRegion.rectangle(x0, x1, y0, y1, float(item["current"]))
    if "polygon" in item:
        return fm.WindingRegion(np.asarray(item["polygon"], dtype=float), float(item["current"]))
    raise ConfigError("each [[windings]] entry needs 'rect' or 'polygon'")


def parse_config(data: dict, path) -> RunConfig:
    """Validate a decoded TOML mapping."""
    path = Path(path)
    unknown = set(data) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"{path}: unknown tables {sorted(unknown)}")
    out = data.get("output", {})
    run = data.get("run", {})
    common = dict(
        path=path,
        output_dir=Path(out.get("dir", "out")),
        prefix=str(out.get("prefix", path.stem)),
        timings=bool(out.get("timings", False)),
        workers=int(run.get("workers", 1)),
        seed=int(run.get("seed", 0)),
    )
    if "study" in data:
        study = dict(data["study"])
        if "name" not in study:
            raise ConfigError(f"{path}: [study] needs 'name'")
        return RunConfig(study=study, **common)

    solve = dict(data.get("solve", {}))
    formulation = solve.pop("formulation", "updated")
    if formulation not in FORMULATIONS:
        raise ConfigError(f"{path}: formulation must be one of {FORMULATIONS}, got {formulation!r}")
    if "mesh" not in data:
        raise ConfigError(f"{path}: missing [mesh] table")
    try:
        windings = tuple(_winding(w) for w in data.get("windings", []))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    ev = data.get("evaluate", {})
    points = np.asarray(ev.get("points", []), dtype=float).reshape(-1, 2)
    circles = tuple(Circle(float(c["radius"]), tuple(c.get("center", (0.0, 0.0))), int(c.get("samples", 64)))
                    for c in ev.get("circles", []))
    cfg = RunConfig(mesh=dict(data["mesh"]), material=dict(data.get("material", {"kind": "linear", "mu_r": 1.0})),
                    sources=dict(data.get("sources", {})), windings=windings, formulation=formulation,
                    solve=solve, points=points, circles=circles, **common)
    if formulation == "reference" and not windings and not cfg.sources:
        raise ConfigError(f"{path}: the reference formulation needs [[windings]] or [sources]")
    if formulation != "reference" and not cfg.sources:
        raise ConfigError(f"{path}: formulation {formulation!r} needs a [sources] table")
    for key in ("path",):
        if key in cfg.mesh and not cfg.resolve(cfg.mesh[key]).exists():
            raise ConfigError(f"mesh file not found: {cfg.resolve(cfg.mesh[key])}")
        if key in cfg.sources and not cfg.resolve(cfg.sources[key]).exists():
            raise ConfigError(f"sources file not found: {cfg.resolve(cfg.sources[key])}")
    if "path" in cfg.material and not cfg.resolve(cfg.material["path"]).exists():
        raise ConfigError(f"BH table not found: {cfg.resolve(cfg.material['path'])}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return parse_config(data, path)
