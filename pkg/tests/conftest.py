import numpy as np
import pytest

from rmvp.mesh import AIR, IRON, Mesh
from rmvp.meshgen import disk_in_annulus


def grid_mesh(nx, ny, lx=1.0, ly=1.0, origin=(0.0, 0.0), region=None):
    """Structured right-triangle grid; ``region(cx, cy)`` returns role codes."""
    x = origin[0] + np.linspace(0, lx, nx + 1)
    y = origin[1] + np.linspace(0, ly, ny + 1)
    X, Y = np.meshgrid(x, y, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    tris = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    cent = nodes[tris].mean(axis=1)
    regions = np.full(len(tris), AIR) if region is None else region(cent[:, 0], cent[:, 1])
    return Mesh.from_arrays(nodes, tris, regions)


@pytest.fixture(scope="session")
def tube_coarse():
    """Eccentric-tube geometry at a coarse spacing."""
    return disk_in_annulus(1.25, 2.0, 0.1, eval_radius=0.5)


@pytest.fixture(scope="session")
def tube():
    return disk_in_annulus(1.25, 2.0, 0.05, eval_radius=0.5)


@pytest.fixture(scope="session")
def two_pocket_mesh():
    def region(cx, cy):
        r = np.full(len(cx), IRON)
        pocket = ((cx > 0.2) & (cx < 0.4) | (cx > 0.6) & (cx < 0.8)) & (cy > 0.3) & (cy < 0.7)
        r[pocket] = AIR
        return r

    return grid_mesh(20, 20, region=region)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
