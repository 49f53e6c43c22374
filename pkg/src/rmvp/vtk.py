"""Legacy ASCII VTK output (UNSTRUCTURED_GRID, point data Az, cell data B)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import Mesh

VTK_TRIANGLE = 5


def _fmt(x) -> str:
    return repr(float(x))


def write_vtk(path, mesh: Mesh, az=None, b=None, cell_mask=None, title="rmvp field") -> Path:
    """Write nodal ``az`` and element ``b`` on the triangles in ``cell_mask``.

    Nodes not used by the selected triangles are dropped. ``az`` is indexed
    by global node id, ``b`` by global triangle id.
    """
    path = Path(path)
    mask = np.ones(mesh.n_triangles, dtype=bool) if cell_mask is None else np.asarray(cell_mask)
    tris = mesh.triangles[mask]
    used = np.unique(tris)
    local = np.full(mesh.n_nodes, -1, dtype=np.int64)
    local[used] = np.arange(len(used))
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(used)} double",
    ]
    lines += [f"{_fmt(x)} {_fmt(y)} 0.0" for x, y in mesh.nodes[used]]
    lines.append(f"CELLS {len(tris)} {4 * len(tris)}")
    lines += [f"3 {a} {b_} {c}" for a, b_, c in local[tris]]
    lines.append(f"CELL_TYPES {len(tris)}")
    lines += [str(VTK_TRIANGLE)] * len(tris)
    if az is not None:
        lines += [f"POINT_DATA {len(used)}", "SCALARS Az double 1", "LOOKUP_TABLE default"]
        lines += [_fmt(v) for v in np.asarray(az)[used]]
    if b is not None:
        lines += [f"CELL_DATA {len(tris)}", "VECTORS B double"]
        lines += [f"{_fmt(bx)} {_fmt(by)} 0.0" for bx, by in np.asarray(b)[mask]]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_field(path, field, region="all", title=None) -> Path:
    """Write an FEFunction restricted to its own region."""
    mask = field.mask & field.mesh.region_mask(region)
    return write_vtk(path, field.mesh, field.full, field.element_b, mask, title or Path(path).stem)


def write_total(path, total, title="total") -> Path:
    """Composed field: nodal Az per side of the interface, B at element centroids.

    Nodes on the interface carry the value from an adjacent triangle; the
    two sides agree up to the weak trace constraint.
    """
    mesh = total.mesh
    az = total.nodal("all").full
    _, b = total.evaluate(mesh.centroids, mesh, np.arange(mesh.n_triangles),
                          np.full((mesh.n_triangles, 3), 1.0 / 3.0))
    return write_vtk(path, mesh, az, b, None, title)


def read_vtk_arrays(path):
    """Minimal reader for files written here (tests and round trips)."""
    tokens = Path(path).read_text().split("\n")
    out = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            out["points"] = np.array([[float(v) for v in tokens[i + 1 + k].split()] for k in range(n)])
            i += n
        elif line.startswith("CELLS"):
            n = int(line.split()[1])
            out["cells"] = np.array([[int(v) for v in tokens[i + 1 + k].split()[1:]] for k in range(n)])
            i += n
        elif line.startswith("SCALARS Az"):
            n = len(out["points"])
            out["Az"] = np.array([float(tokens[i + 2 + k]) for k in range(n)])
            i += n + 1
        elif line.startswith("VECTORS B"):
            n = len(out["cells"])
            out["B"] = np.array([[float(v) for v in tokens[i + 1 + k].split()] for k in range(n)])
            i += n
        i += 1
    return out
