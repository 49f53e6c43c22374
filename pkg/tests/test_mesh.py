import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grid_mesh
from rmvp.mesh import (
    AIR, IRON, Mesh, MeshError, extract_interface, load_msh, locate, mesh_length, refine, write_msh,
)
from rmvp.meshgen import disk_in_annulus, rect_in_rect

SINGLE_TRIANGLE = """$MeshFormat
2.2 0 8
$EndMeshFormat
$PhysicalNames
1
2 7 "iron"
$EndPhysicalNames
$Nodes
3
1 0 0 0
2 1 0 0
3 0 1 0
$EndNodes
$Elements
1
1 2 2 7 7 {conn}
$EndElements
"""


def test_single_triangle_read(tmp_path):
    p = tmp_path / "one.msh"
    p.write_text(SINGLE_TRIANGLE.format(conn="1 2 3"))
    m = load_msh(p)
    assert m.n_triangles == 1
    assert m.areas[0] == pytest.approx(0.5)
    assert m.iron.all()


def test_clockwise_triangle_reordered(tmp_path):
    p = tmp_path / "cw.msh"
    p.write_text(SINGLE_TRIANGLE.format(conn="1 3 2"))
    m = load_msh(p)
    assert m.areas[0] == pytest.approx(0.5)


def test_tag_mapping_and_unknown_tag(tmp_path):
    p = tmp_path / "named.msh"
    p.write_text(SINGLE_TRIANGLE.format(conn="1 2 3").replace('"iron"', '"yoke"'))
    with pytest.raises(MeshError, match="no role mapping"):
        load_msh(p)
    assert load_msh(p, {"yoke": "iron"}).iron.all()


@pytest.mark.parametrize("text, match", [
    ("$MeshFormat\n4.1 0 8\n$EndMeshFormat\n$Nodes\n0\n$EndNodes\n$Elements\n0\n$EndElements\n", "version"),
    ("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n", "missing"),
    ("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n2\n1 0 0 0\n$EndNodes\n$Elements\n0\n$EndElements\n",
     "Nodes"),
])
def test_malformed_files(tmp_path, text, match):
    p = tmp_path / "bad.msh"
    p.write_text(text)
    with pytest.raises(MeshError, match=match):
        load_msh(p)


def test_degenerate_triangle_rejected():
    with pytest.raises(MeshError, match="degenerate"):
        Mesh.from_arrays([[0, 0], [1, 0], [2, 0]], [[0, 1, 2]], [AIR])


def test_hanging_node_rejected():
    # node 4 sits on the hypotenuse of triangle 0 without splitting it
    nodes = [[0, 0], [2, 0], [0, 2], [2, 2], [1, 1]]
    tris = [[0, 1, 2], [1, 3, 4], [4, 3, 2]]
    with pytest.raises(MeshError, match="hanging"):
        Mesh.from_arrays(nodes, tris, [AIR] * 3)


def test_tube_interface_is_one_circle(tube):
    curve = extract_interface(tube)
    assert curve.n_loops == 1
    r = np.hypot(*curve.points.T)
    np.testing.assert_allclose(r, 1.25, rtol=1e-12)
    assert set(np.unique(tube.regions)) == {0, 1, 2}


def test_circle_normals_radial(tube_coarse):
    curve = extract_interface(tube_coarse)
    mid = 0.5 * (curve.points[curve.edge_local[:, 0]] + curve.points[curve.edge_local[:, 1]])
    radial = mid / np.linalg.norm(mid, axis=1)[:, None]
    angle = np.arccos(np.clip(np.einsum("nd,nd->n", radial, curve.normals), -1, 1))
    h = curve.lengths.max()
    assert angle.max() < h / 1.25  # O(h) deviation on a radius-1.25 circle
    assert curve.n_nodes == len(curve.lengths)


def test_square_in_square_perimeter():
    m = rect_in_rect((0.51, 0.33), (0.31, 0.13), 0.01)
    curve = extract_interface(m)
    assert curve.n_loops == 1
    assert curve.total_length == pytest.approx(2 * (0.31 + 0.13), rel=1e-12)


def test_two_pockets_two_loops(two_pocket_mesh):
    curve = extract_interface(two_pocket_mesh)
    # brute-force: union-find over interface edges
    m = two_pocket_mesh
    edge_owner = {}
    for t, r in zip(m.triangles, m.regions):
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            edge_owner.setdefault(tuple(sorted((a, b))), set()).add(int(r))
    iface = [e for e, roles in edge_owner.items() if roles == {AIR, IRON}]
    parent = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            x = parent[x]
        return x

    for a, b in iface:
        parent[find(a)] = find(b)
    roots = {find(a) for e in iface for a in e}
    assert curve.n_loops == len(roots) == 2


def test_normal_points_air_to_iron(tube_coarse, two_pocket_mesh):
    for m in (tube_coarse, two_pocket_mesh):
        curve = extract_interface(m)
        cent = {}
        for k, (t, r) in enumerate(zip(m.triangles, m.regions)):
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                cent.setdefault(tuple(sorted((a, b))), {})[int(r != IRON)] = m.centroids[k]
        for (a, b), n in zip(curve.edges, curve.normals):
            c = cent[tuple(sorted((a, b)))]
            assert n @ (c[0] - c[1]) > 0


def test_flipped_orientation(tube_coarse):
    curve = extract_interface(tube_coarse)
    f = curve.flipped()
    np.testing.assert_array_equal(f.normals, -curve.normals)
    np.testing.assert_array_equal(f.tangents, -curve.tangents)


def test_interface_stable_under_reload(tmp_path, tube_coarse):
    p = tmp_path / "tube.msh"
    write_msh(tube_coarse, p)
    a, b = extract_interface(load_msh(p)), extract_interface(load_msh(p))
    np.testing.assert_array_equal(a.nodes, b.nodes)
    m = load_msh(p)
    np.testing.assert_array_equal(m.triangles, tube_coarse.triangles)
    np.testing.assert_array_equal(m.regions, tube_coarse.regions)
    np.testing.assert_array_equal(m.boundary_nodes, tube_coarse.boundary_nodes)


def test_region_areas_match_geometry():
    m = disk_in_annulus(1.25, 2.0, 0.05)
    assert m.area_of("air") == pytest.approx(np.pi * 1.25 ** 2, rel=1e-3)
    assert m.area_of("iron") == pytest.approx(np.pi * (4 - 1.25 ** 2), rel=1e-3)
    r = rect_in_rect((0.51, 0.33), (0.31, 0.13), 0.01)
    assert r.area_of("air") == pytest.approx(0.31 * 0.13, rel=1e-12)
    assert r.area_of("iron") == pytest.approx(0.51 * 0.33 - 0.31 * 0.13, rel=1e-12)


def test_mesh_length_examples():
    assert mesh_length(grid_mesh(10, 10)) == pytest.approx(0.1 * np.sqrt(2))
    tri = Mesh.from_arrays([[0, 0], [3, 0], [0, 4]], [[0, 1, 2]], [AIR])
    assert mesh_length(tri) == pytest.approx(5.0)


def _brute_max_edge(m):
    best = 0.0
    for t in m.triangles:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            best = max(best, float(np.linalg.norm(m.nodes[a] - m.nodes[b])))
    return best


def test_refine_halves_h(tube_coarse):
    fine = refine(tube_coarse)
    assert mesh_length(fine) == pytest.approx(0.5 * mesh_length(tube_coarse), rel=1e-12)
    assert mesh_length(fine) == pytest.approx(_brute_max_edge(fine), rel=1e-15)
    assert fine.n_triangles == 4 * tube_coarse.n_triangles


def test_locate_examples(tube_coarse):
    m = tube_coarse
    k = 17
    tri, bary = locate(m, m.centroids[k])
    assert tri == k
    np.testing.assert_allclose(bary, 1 / 3)
    node = m.triangles[k, 0]
    tri, bary = locate(m, m.nodes[node])
    assert node in m.triangles[tri]
    assert np.isclose(bary.max(), 1.0)
    with pytest.raises(MeshError, match="outside"):
        locate(m, [5.0, 5.0])


def _brute_locate(m, p):
    for k, t in enumerate(m.triangles):
        a, b, c = m.nodes[t]
        T = np.column_stack([b - a, c - a])
        l1, l2 = np.linalg.solve(T, p - a)
        if min(l1, l2, 1 - l1 - l2) >= -1e-10:
            return k, np.array([1 - l1 - l2, l1, l2])
    return -1, None


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.9, 1.9), st.floats(-1.9, 1.9))
def test_locate_matches_brute_force(x, y):
    m = _COARSE
    p = np.array([x, y])
    tri, bary = m.locator.find(p[None])
    k, lam = _brute_locate(m, p)
    if k < 0:
        assert tri[0] < 0
    else:
        assert tri[0] >= 0
        # ties on shared edges: the point must reproduce through the found triangle
        np.testing.assert_allclose(bary[0] @ m.nodes[m.triangles[tri[0]]], p, atol=1e-12)


_COARSE = disk_in_annulus(1.25, 2.0, 0.25)
