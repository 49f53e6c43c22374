import csv
import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rmvp.cli import main
from rmvp.mesh import extract_interface, load_msh
from rmvp.vtk import read_vtk_arrays

CASES = Path(__file__).resolve().parents[1] / "cases"


def write(path, text):
    path.write_text(text)
    return path


SMALL_TUBE = """
[mesh]
geometry = "disk-in-annulus"
r_inner = 1.25
r_outer = 2.0
h = 0.1
eval_radius = 0.5

[material]
kind = "linear"
mu_r = 4000.0

[sources]
lines = [[0.8, 0.0, 1.0]]

[solve]
formulation = "{formulation}"

[evaluate]
points = [[0.0, 0.0], [1.5, 0.2]]
circles = [{{ radius = 0.4, samples = 8 }}]
"""


@pytest.fixture
def tube_cfg(tmp_path):
    return write(tmp_path / "tube.toml", SMALL_TUBE.format(formulation="updated"))


def test_solve_updated_writes_four_fields(tmp_path, tube_cfg, capsys):
    out = tmp_path / "o"
    assert main(["solve", "--config", str(tube_cfg), "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["tube_Ag.vtk", "tube_Am.vtk", "tube_As.vtk", "tube_eval.csv", "tube_report.json",
                     "tube_total.vtk"]
    vtk = read_vtk_arrays(out / "tube_total.vtk")
    assert len(vtk["Az"]) == len(vtk["points"]) and len(vtk["B"]) == len(vtk["cells"])
    assert (out / "tube_total.vtk").read_text().startswith("# vtk DataFile Version 3.0")
    rows = list(csv.reader(open(out / "tube_eval.csv")))
    assert rows[0] == ["label", "index", "x_m", "y_m", "Az_Wb_per_m", "Bx_T", "By_T"]
    assert len(rows) == 1 + 2 + 8
    rep = json.loads((out / "tube_report.json").read_text())
    assert rep["formulation"] == "updated" and "timings" not in rep
    assert rep["biot_savart"]["kernel_evals"] == rep["dofs"]["trace"]


def test_solve_with_timings(tmp_path, tube_cfg):
    out = tmp_path / "o"
    assert main(["solve", "--config", str(tube_cfg), "--out", str(out), "--timings"]) == 0
    assert "total" in json.loads((out / "tube_report.json").read_text())["timings"]


@pytest.mark.parametrize("formulation, n_vtk", [("original", 3), ("reference", 1)])
def test_other_formulations(tmp_path, formulation, n_vtk):
    text = SMALL_TUBE.format(formulation=formulation)
    if formulation == "reference":
        text = text.replace("[sources]\nlines = [[0.8, 0.0, 1.0]]",
                            "[[windings]]\nrect = [0.65, 0.95, -0.15, 0.15]\ncurrent = 1.0")
    cfg = write(tmp_path / "c.toml", text)
    out = tmp_path / "o"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(list(out.glob("*.vtk"))) == n_vtk


def test_solve_deterministic(tmp_path, tube_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--config", str(tube_cfg), "--out", str(a), "--workers", "1"]) == 0
    assert main(["solve", "--config", str(tube_cfg), "--out", str(b), "--workers", "1"]) == 0
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_workers_flag(tmp_path, tube_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--config", str(tube_cfg), "--out", str(a)]) == 0
    assert main(["solve", "--config", str(tube_cfg), "--out", str(b), "--workers", "3", "--seed", "7"]) == 0
    ea = np.loadtxt(a / "tube_eval.csv", delimiter=",", skiprows=1, usecols=(4, 5, 6))
    eb = np.loadtxt(b / "tube_eval.csv", delimiter=",", skiprows=1, usecols=(4, 5, 6))
    np.testing.assert_allclose(eb, ea, rtol=1e-12, atol=1e-18)
    assert json.loads((b / "tube_report.json").read_text())["seed"] == 7


def test_missing_mesh_file(tmp_path, capsys):
    cfg = write(tmp_path / "m.toml", '[mesh]\npath = "nowhere.msh"\n[sources]\nlines = [[0, 0, 1]]\n')
    assert main(["solve", "--config", str(cfg)]) == 1
    assert "nowhere.msh" in capsys.readouterr().err


def test_mesh_from_msh_file(tmp_path):
    assert main(["meshgen", "disk-in-annulus", "r_inner=1.25", "r_outer=2.0", "h=0.1",
                 "--out", str(tmp_path)]) == 0
    cfg = write(tmp_path / "f.toml", SMALL_TUBE.format(formulation="updated").replace(
        '[mesh]\ngeometry = "disk-in-annulus"\nr_inner = 1.25\nr_outer = 2.0\nh = 0.1\neval_radius = 0.5',
        '[mesh]\npath = "disk-in-annulus.msh"'))
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


@pytest.mark.parametrize("text, match", [
    ("[mesh]\ngeometry = 'disk-in-annulus'\n[solve]\nformulation = 'magic'\n", "formulation"),
    ("[nonsense]\n", "unknown tables"),
    ("[mesh\n", "invalid TOML"),
    ("[solve]\nformulation = 'updated'\n", "missing \\[mesh\\]"),
    ("[mesh]\ngeometry = 'disk-in-annulus'\n", "needs a \\[sources\\]"),
])
def test_config_errors(tmp_path, capsys, text, match):
    cfg = write(tmp_path / "bad.toml", text)
    assert main(["validate", "--config", str(cfg)]) == 1
    import re
    assert re.search(match, capsys.readouterr().err)


def test_source_in_iron_is_config_error(tmp_path, capsys):
    cfg = write(tmp_path / "c.toml", SMALL_TUBE.format(formulation="updated").replace("[0.8, 0.0, 1.0]",
                                                                                       "[1.6, 0.0, 1.0]"))
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "iron" in capsys.readouterr().err


def test_solver_error_exit_code(tmp_path, capsys):
    text = SMALL_TUBE.format(formulation="updated").replace(
        'kind = "linear"\nmu_r = 4000.0', 'kind = "bh_table"').replace(
        "[0.8, 0.0, 1.0]", "[0.8, 0.0, 5e6]").replace(
        '[solve]\nformulation = "updated"', '[solve]\nformulation = "updated"\nnewton_max_iter = 1')
    cfg = write(tmp_path / "nl.toml", text)
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "Newton" in capsys.readouterr().err


def test_io_error_exit_code(tmp_path, tube_cfg):
    blocker = write(tmp_path / "file", "x")
    assert main(["solve", "--config", str(tube_cfg), "--out", str(blocker)]) == 3


def test_validate_only_writes_nothing(tmp_path, tube_cfg):
    out = tmp_path / "never"
    assert main(["solve", "--config", str(tube_cfg), "--out", str(out), "--validate-only"]) == 0
    assert not out.exists()
    assert main(["validate", "--config", str(tube_cfg)]) == 0


def test_unknown_study(capsys):
    assert main(["study", "magic"]) == 1
    err = capsys.readouterr().err
    for name in ("convergence", "runtime", "distance", "quadrupole"):
        assert name in err


def test_study_convergence(tmp_path):
    cfg = write(tmp_path / "conv.toml", "[study]\nname = 'convergence'\nlevels = [0.04, 0.02, 0.01, 0.005]\n"
                                        "reference_h = 0.0025\n")
    assert main(["study", "convergence", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.reader(open(tmp_path / "o" / "conv.csv")))
    assert rows[0] == ["h", "rel_err_eval", "rel_err_total", "energy_eval"] and len(rows) >= 5
    summary = json.loads((tmp_path / "o" / "conv_summary.json").read_text())
    assert "slope" in summary["fits"]["rel_err_eval"]


def test_study_runtime(tmp_path):
    cfg = write(tmp_path / "rt.toml", "[study]\nname = 'runtime'\nh = 0.01\nfilaments_per_side = 3\nrepeats = 1\n")
    assert main(["study", "runtime", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "rt.csv")))
    assert [r[0] for r in rows[1:]] == ["original", "updated-Va", "updated-Gamma"]


def test_study_name_mismatch(tmp_path):
    cfg = write(tmp_path / "rt.toml", "[study]\nname = 'runtime'\n")
    assert main(["study", "distance", "--config", str(cfg)]) == 1
    bad = write(tmp_path / "bad.toml", "[study]\nname = 'runtime'\nwarp = 9\n")
    assert main(["study", "runtime", "--config", str(bad), "--validate-only"]) == 1


def test_meshgen(tmp_path):
    assert main(["meshgen", "disk-in-annulus", "r_inner=1.25", "r_outer=2.0", "h=0.05",
                 "--out", str(tmp_path), "--name", "a.msh"]) == 0
    assert main(["meshgen", "disk-in-annulus", "r_inner=1.25", "r_outer=2.0", "h=0.025",
                 "--out", str(tmp_path), "--name", "b.msh"]) == 0
    a, b = load_msh(tmp_path / "a.msh"), load_msh(tmp_path / "b.msh")
    assert set(np.unique(a.regions)) == {0, 1}
    assert extract_interface(a).n_loops == 1
    assert len(a.boundary_edges) == len(a.boundary_nodes)  # one closed outer loop
    assert 3.5 < b.n_nodes / a.n_nodes < 4.5
    first = (tmp_path / "a.msh").read_bytes()
    main(["meshgen", "disk-in-annulus", "r_inner=1.25", "r_outer=2.0", "h=0.05",
          "--out", str(tmp_path), "--name", "a.msh"])
    assert (tmp_path / "a.msh").read_bytes() == first


@pytest.mark.parametrize("args", [
    ["meshgen", "disk-in-annulus", "r_inner=2.0", "r_outer=1.25", "h=0.05"],
    ["meshgen", "moebius", "h=0.1"],
    ["meshgen", "disk-in-annulus", "r_inner"],
    ["meshgen", "rect-in-rect", "outer=[1.0, 1.0]", "inner=[0.5, 0.5]", "h=0.1", "colour=3"],
])
def test_meshgen_errors(tmp_path, args):
    assert main(args + ["--out", str(tmp_path)]) == 1


def test_missing_config_flag(capsys):
    assert main(["solve"]) == 1
    assert main(["validate", "--config", "x.toml", "--workers", "0"]) == 1


@pytest.mark.skipif(shutil.which("rmvp") is None, reason="console script not installed")
def test_console_script_and_log_level(tmp_path, tube_cfg):
    env = dict(os.environ, RMVP_LOG="DEBUG")
    r = subprocess.run(["rmvp", "solve", "--config", str(tube_cfg), "--out", str(tmp_path / "o")],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 0
    assert "DEBUG" in r.stderr
    r = subprocess.run([sys.executable, "-m", "rmvp.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()


def test_bundled_cases_validate():
    for cfg in sorted(CASES.glob("*.toml")):
        assert main(["validate", "--config", str(cfg)]) == 0, cfg.name
