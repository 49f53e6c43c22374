"""Command-line interface: ``rmvp solve|study|meshgen|validate``.

Exit codes: 0 success, 1 configuration or input error, 2 solver failure,
3 I/O failure. Diagnostics go to standard error; ``RMVP_LOG`` sets the log
level (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import biot_savart as bs
from . import formulations as fm
from . import studies
from .config import ConfigError, RunConfig, load_config, tomllib
from .fem import SolverError
from .materials import MaterialError
from .mesh import MeshError, write_msh
from .meshgen import GEOMETRIES
from .vtk import write_field, write_total

logger = logging.getLogger("rmvp")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3
EVAL_COLUMNS = ["label", "index", "x_m", "y_m", "Az_Wb_per_m", "Bx_T", "By_T"]


class InputError(ValueError):
    pass


def _fmt(v):
    return repr(float(v))


def _write_json(path, data):
    Path(path).write_text(json.dumps(studies._jsonable(data), indent=2, sort_keys=True) + "\n")


def _outdir(args, cfg: RunConfig | None) -> Path:
    if args.out:
        d = Path(args.out)
    elif cfg is not None:
        d = cfg.resolve(cfg.output_dir)
    else:
        d = Path("out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _setup(cfg: RunConfig):
    """Mesh, material and sources, with the source and interface checks."""
    mesh = cfg.build_mesh()
    material = cfg.build_material()
    sources = cfg.build_sources()
    if len(sources):
        fm.check_sources(mesh, sources)
    if cfg.formulation == "updated":
        fm.extract_interface(mesh)
    return mesh, material, sources


# -- commands ------------------------------------------------------------------------

def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    if cfg.is_study:
        name = cfg.study["name"]
        if name not in studies.STUDIES:
            raise ConfigError(f"unknown study {name!r}; valid: {', '.join(studies.STUDIES)}")
        cls, _ = studies.STUDIES[name]
        _study_config(cls, cfg.study)
        print(f"ok: study {name}")
        return EXIT_OK
    mesh, _, sources = _setup(cfg)
    print(f"ok: {cfg.formulation} solve, {mesh.n_nodes} nodes, {mesh.n_triangles} triangles, "
          f"{len(sources)} line currents")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    if cfg.is_study:
        raise ConfigError(f"{args.config} is a study config; use 'rmvp study'")
    workers = args.workers if args.workers is not None else cfg.workers
    mesh, material, sources = _setup(cfg)
    if args.validate_only:
        print(f"ok: {mesh.n_nodes} nodes, {len(sources)} line currents")
        return EXIT_OK
    fields = {}
    if cfg.formulation == "reference":
        total, report = fm.solve_reference(mesh, cfg.build_windings(), material,
                                           sources if len(sources) else None, cfg.newton())
        fields["total"] = total
    elif cfg.formulation == "original":
        total, report = fm.solve_original(mesh, sources, material, cfg.solve.get("projection", "nodal"),
                                          cfg.newton(), workers)
        fields.update({"As": total.parts["As"], "Ar": total.parts["Ar"], "total": total})
    else:
        opts = fm.UpdatedOptions(
            min_gap_fraction=float(cfg.solve.get("min_gap_fraction", fm.MIN_GAP_FRACTION)),
            warn_delta=float(cfg.solve.get("warn_delta", fm.WARN_DELTA)),
            newton=cfg.newton(), workers=workers)
        total, report = fm.solve_updated(mesh, sources, material, opts)
        # As on Va for inspection only; the report's counters are already frozen
        fields["As"] = bs.interpolate_nodal(sources.scaled(1.0), mesh, "air", workers=workers)
        fields.update({"Am": total.parts["Am"], "Ag": total.parts["Ag"], "total": total})

    out = _outdir(args, cfg)
    pts, labels = cfg.evaluation_points()
    try:
        az, b = fm.compose_eval(total, pts) if len(pts) else (np.zeros(0), np.zeros((0, 2)))
    except MeshError as exc:
        raise InputError(f"evaluation request: {exc}") from None
    rep = report.to_dict()
    if not (cfg.timings or args.timings):
        rep.pop("timings")
    rep.update({
        "version": __version__,
        "config": str(Path(args.config).name),
        "mesh": {"nodes": mesh.n_nodes, "triangles": mesh.n_triangles},
        "sources": {"count": len(sources), "total_current_A": sources.total_current},
        "workers": workers,
        "seed": args.seed if args.seed is not None else cfg.seed,
    })
    try:
        for name, f in fields.items():
            path = out / f"{cfg.prefix}_{name}.vtk"
            if name == "total" and cfg.formulation != "reference":
                write_total(path, f, title=f"{cfg.formulation} total")
            else:
                region = "air" if name in ("As", "Am") else "all"
                write_field(path, f, region, title=f"{cfg.formulation} {name}")
        _write_json(out / f"{cfg.prefix}_report.json", rep)
        with open(out / f"{cfg.prefix}_eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_COLUMNS)
            for (label, i), p, a, bb in zip(labels, pts, az, b):
                w.writerow([label, i, _fmt(p[0]), _fmt(p[1]), _fmt(a), _fmt(bb[0]), _fmt(bb[1])])
    except OSError as exc:
        print(f"error: cannot write outputs to {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    for msg in report.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"wrote {len(fields)} VTK files, report and evaluations to {out}")
    return EXIT_OK


def _study_config(cls, params):
    params = {k: v for k, v in params.items() if k != "name"}
    geometry = params.pop("geometry", None)
    try:
        if geometry is not None:
            params["geometry"] = studies.config_from_mapping(studies.Racetrack, geometry)
        return studies.config_from_mapping(cls, params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[study] {exc}") from None


def cmd_study(args) -> int:
    name = args.name
    if name not in studies.STUDIES:
        raise ConfigError(f"unknown study {name!r}; valid: {', '.join(studies.STUDIES)}")
    cfg = load_config(args.config) if args.config else None
    params = {}
    if cfg is not None:
        if not cfg.is_study:
            raise ConfigError(f"{args.config} has no [study] table")
        if cfg.study["name"] != name:
            raise ConfigError(f"{args.config} configures study {cfg.study['name']!r}, not {name!r}")
        params = cfg.study
    cls, runner = studies.STUDIES[name]
    scfg = _study_config(cls, params)
    if args.validate_only:
        print(f"ok: study {name}")
        return EXIT_OK
    workers = args.workers if args.workers is not None else (cfg.workers if cfg else 1)
    if name == "runtime":
        result = runner(scfg)  # timings are always sequential
    elif name == "quadrupole":
        _, _, result = runner(scfg, workers=workers)
    else:
        result = runner(scfg, workers=workers)
    out = _outdir(args, cfg)
    prefix = cfg.prefix if cfg else name
    try:
        result.write_csv(out / f"{prefix}.csv")
        result.write_json(out / f"{prefix}_summary.json")
    except OSError as exc:
        print(f"error: cannot write outputs to {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    for key, fit in result.fits.items():
        print(f"{name}: {key} slope {fit.slope:.3f} +/- {fit.ci95:.3f} (rms {fit.residual:.3f})")
    print(f"wrote {prefix}.csv and {prefix}_summary.json to {out}")
    return EXIT_OK


def _parse_param(text):
    if "=" not in text:
        raise ConfigError(f"mesh parameter {text!r} is not key=value")
    key, value = text.split("=", 1)
    try:
        return key.strip(), tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        raise ConfigError(f"mesh parameter {key!r}: cannot parse {value!r}") from None


def cmd_meshgen(args) -> int:
    if args.geometry not in GEOMETRIES:
        raise ConfigError(f"unknown geometry {args.geometry!r}; valid: {', '.join(GEOMETRIES)}")
    params = dict(_parse_param(p) for p in args.params)
    cfg = RunConfig(path=Path("meshgen"), mesh={"geometry": args.geometry, **params})
    mesh = cfg.build_mesh()
    if args.validate_only:
        print(f"ok: {mesh.n_nodes} nodes")
        return EXIT_OK
    out = _outdir(args, None)
    path = out / (args.name or f"{args.geometry}.msh")
    try:
        write_msh(mesh, path)
    except OSError as exc:
        print(f"error: cannot write {path}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {path}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="output directory (overrides [output] dir)")
    common.add_argument("--workers", type=int, default=None, help="worker threads (default 1)")
    common.add_argument("--seed", type=int, default=None, help="recorded in reports; solves are deterministic")
    common.add_argument("--validate-only", action="store_true", help="check inputs and exit")

    p = argparse.ArgumentParser(prog="rmvp", description="2D reduced magnetic vector potential solvers")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="solve one configuration")
    s.add_argument("--timings", action="store_true", help="include wall-clock timings in the report")
    s.set_defaults(func=cmd_solve, need_config=True)
    s = sub.add_parser("study", parents=[common], help="run a numerical study")
    s.add_argument("name", help=f"one of {', '.join(studies.STUDIES)}")
    s.set_defaults(func=cmd_study, need_config=False)
    s = sub.add_parser("meshgen", parents=[common], help="write a built-in geometry as MSH 2.2")
    s.add_argument("geometry", help=f"one of {', '.join(GEOMETRIES)}")
    s.add_argument("params", nargs="*", help="key=value geometry parameters (TOML values)")
    s.add_argument("--name", help="output file name (default <geometry>.msh)")
    s.set_defaults(func=cmd_meshgen, need_config=False)
    s = sub.add_parser("validate", parents=[common], help="check a configuration and its mesh")
    s.set_defaults(func=cmd_validate, need_config=True)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RMVP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    if args.need_config and not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, MeshError, MaterialError, fm.FormulationError, InputError,
            bs.SingularEvaluationError, studies.StudyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
