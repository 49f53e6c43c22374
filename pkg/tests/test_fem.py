import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from conftest import grid_mesh
from rmvp import biot_savart as bs
from rmvp import fem
from rmvp import formulations as fm
from rmvp.materials import MU0, NU0, LinearMaterial, default_steel
from rmvp.mesh import AIR, IRON, InterfaceCurve, Mesh, extract_interface, mesh_length
from rmvp.meshgen import disk_in_annulus

UNIT = Mesh.from_arrays([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [AIR])


def test_unit_triangle_element_matrix():
    K = fem.assemble_stiffness(UNIT, nu_elements=np.ones(1)).toarray()
    np.testing.assert_allclose(K, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-15)
    K2 = fem.assemble_stiffness(UNIT, nu_elements=2 * np.ones(1)).toarray()
    np.testing.assert_allclose(K2, 2 * K)


def test_patch_test_linear_field():
    m = grid_mesh(2, 2)
    K = fem.assemble_stiffness(m)
    a = 0.3 * m.nodes[:, 0] - 1.7 * m.nodes[:, 1] + 0.2
    interior = np.setdiff1d(np.arange(m.n_nodes), m.boundary_nodes)
    assert len(interior) == 1
    assert abs((K @ a)[interior]).max() < 1e-9 * NU0


def test_stiffness_symmetric_semidefinite(tube_coarse):
    for mat in (None, LinearMaterial(4000.0)):
        K = fem.assemble_stiffness(tube_coarse, "all", mat)
        assert abs(K - K.T).max() <= 1e-12 * abs(K).max()
        assert abs(K @ np.ones(tube_coarse.n_nodes)).max() <= 1e-12 * abs(K).max()
    small = grid_mesh(4, 4, region=lambda x, y: np.where(x > 0.5, IRON, AIR))
    K = fem.assemble_stiffness(small, "all", LinearMaterial(50.0)).toarray()
    assert np.linalg.eigvalsh(K).min() > -1e-10 * np.abs(K).max()


def test_newton_linear_material_is_stiffness(tube_coarse):
    rng = np.random.default_rng(0)
    a = rng.normal(size=tube_coarse.n_nodes)
    f = rng.normal(size=tube_coarse.n_nodes)
    mat = LinearMaterial(4000.0)
    J, r = fem.assemble_newton(tube_coarse, "all", mat, a, f)
    K = fem.assemble_stiffness(tube_coarse, "all", mat)
    assert abs(J - K).max() <= 1e-12 * abs(K).max()
    np.testing.assert_allclose(r, K @ a - f, atol=1e-10 * np.abs(K @ a).max())
    J0, r0 = fem.assemble_newton(tube_coarse, "all", default_steel(), np.zeros(tube_coarse.n_nodes))
    assert not r0.any()


@pytest.mark.parametrize("material", [LinearMaterial(4000.0), default_steel()], ids=["linear", "bh"])
def test_jacobian_finite_difference(tube_coarse, material):
    rng = np.random.default_rng(3)
    m = tube_coarse
    # state with |B| of order 1-2 T in the iron so the saturating branch is exercised
    a = 1.5 * m.nodes[:, 1] + 0.05 * rng.normal(size=m.n_nodes)
    d = rng.normal(size=m.n_nodes)
    step = 1e-7
    J, _ = fem.assemble_newton(m, "all", material, a)
    _, rp = fem.assemble_newton(m, "all", material, a + step * d)
    _, rm = fem.assemble_newton(m, "all", material, a - step * d)
    fd = (rp - rm) / (2 * step)
    assert np.linalg.norm(J @ d - fd) / np.linalg.norm(fd) < 1e-5


def test_interface_mass_single_edge():
    pts = np.array([[0.0, 0.0], [0.3, 0.4]])
    curve = InterfaceCurve(pts, np.array([0, 1]), np.array([[0, 1]]), np.array([[0, 1]]), np.array([0, 2]))
    M = curve.mass_matrix().toarray()
    np.testing.assert_allclose(M, 0.5 * np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]]))


def test_interface_mass_partition_of_unity(tube_coarse):
    curve = extract_interface(tube_coarse)
    C = fem.assemble_interface_coupling(curve, tube_coarse.n_nodes)
    assert C.sum() == pytest.approx(curve.total_length, rel=1e-14)
    phi = np.arctan2(curve.points[:, 1], curve.points[:, 0])
    el = curve.edge_local
    dphi = np.abs(np.angle(np.exp(1j * (phi[el[:, 1]] - phi[el[:, 0]]))))
    lumped = np.zeros(curve.n_nodes)
    np.add.at(lumped, el[:, 0], 0.5 * 1.25 * dphi)
    np.add.at(lumped, el[:, 1], 0.5 * 1.25 * dphi)
    rows = np.asarray(curve.mass_matrix().sum(axis=1)).ravel()
    h = curve.lengths.max()
    np.testing.assert_allclose(rows, lumped, rtol=h ** 2)


def test_surface_current_rhs(tube_coarse):
    curve = extract_interface(tube_coarse)
    c = 2.5
    b = fem.assemble_surface_current_rhs(curve, fem.TraceFunction(curve, np.full(curve.n_nodes, c)),
                                         tube_coarse.n_nodes)
    h = curve.lengths.max()
    assert b.sum() == pytest.approx(c * 2 * np.pi * 1.25, rel=h ** 2)
    z = fem.assemble_surface_current_rhs(curve, fem.TraceFunction(curve, np.zeros(curve.n_nodes)),
                                         tube_coarse.n_nodes)
    assert not z.any()


def test_concentric_surface_current_reproduces_line_field():
    m = disk_in_annulus(1.25, 2.0, 0.025)
    curve = extract_interface(m)
    kg = fem.TraceFunction(curve, np.full(curve.n_nodes, 1.0 / (2 * np.pi * 1.25)))
    ag, _ = fm.solve_reaction(m, kg, None)
    out = m.iron & (np.hypot(*m.centroids.T) > 1.3)
    r = np.hypot(*m.centroids[out].T)
    b = np.linalg.norm(ag.element_b[out], axis=1)
    np.testing.assert_allclose(b, MU0 / (2 * np.pi * r), rtol=0.02)


def test_solve_spd_identity_and_chain():
    n = 50
    b = np.arange(n, dtype=float)
    np.testing.assert_array_equal(fem.solve_spd(sparse.identity(n, format="csr"), b), b)
    A = sparse.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
    f = np.sin(np.arange(n))
    x = fem.solve_spd(A, f)
    np.testing.assert_allclose(x, np.linalg.solve(A.toarray(), f), rtol=1e-10, atol=1e-10 * np.abs(x).max())


def test_solve_spd_dirichlet_exact_and_deterministic(tube_coarse):
    m = tube_coarse
    K = fem.assemble_stiffness(m, "all", LinearMaterial(4000.0))
    rhs = fem.line_source_rhs(m, [[0.8, 0.01]], [1.0])
    fixed = m.boundary_nodes
    vals = np.cos(np.arange(len(fixed)))
    sys_ = fem.SparseSystem(K, rhs, fixed, vals)
    x1, x2 = fem.solve_spd(sys_), fem.solve_spd(sys_)
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(x1[fixed], vals)


def test_saddle_constraint_satisfied():
    m = disk_in_annulus(1.0, 1.5, 0.2)
    curve = extract_interface(m)
    air = m.region_mask("air")
    nodes = m.region_nodes(air)
    K = fem.assemble_stiffness(m, air)[nodes][:, nodes]
    C = fem.assemble_interface_coupling(curve, m.n_nodes)[nodes]
    g = np.cos(3 * np.arctan2(curve.points[:, 1], curve.points[:, 0]))
    Mg = curve.mass_matrix()
    A = sparse.bmat([[K, C], [C.T, None]], format="csr")
    rhs = np.concatenate([np.zeros(len(nodes)), Mg @ g])
    x = fem.solve_spd(fem.SparseSystem(A, rhs, indefinite=True))
    dense = np.linalg.solve(A.toarray(), rhs)
    np.testing.assert_allclose(x, dense, rtol=1e-8, atol=1e-8 * np.abs(dense).max())
    local = np.searchsorted(nodes, curve.nodes)
    e = x[local] - g
    assert np.sqrt(e @ (Mg @ e)) < 1e-9


def test_singular_system_raises():
    A = sparse.csr_matrix(np.zeros((3, 3)))
    with pytest.raises(fem.SolverError):
        fem.solve_spd(A, np.ones(3))


def test_curl_of_linear_fields(tube_coarse):
    m = tube_coarse
    fx = fem.FEFunction.from_full(m, m.nodes[:, 0])
    fy = fem.FEFunction.from_full(m, m.nodes[:, 1])
    np.testing.assert_allclose(fx.element_b, np.tile([0.0, -1.0], (m.n_triangles, 1)), atol=1e-12)
    np.testing.assert_allclose(fy.element_b, np.tile([1.0, 0.0], (m.n_triangles, 1)), atol=1e-12)
    az, b = fem.eval(fx, [0.3, 0.4])
    assert az == pytest.approx(0.3)


def test_energy_concentric_annulus():
    a, b = 0.5, 1.0
    m = disk_in_annulus(a, b, (b - a) / 40)
    src = bs.SourceSet([(0.0, 0.0, 10.0)])
    f = bs.interpolate_nodal(src, m, "iron")
    w = fem.energy(f, LinearMaterial(1.0), "iron")
    assert w == pytest.approx(MU0 * 100 * np.log(b / a) / (4 * np.pi), rel=0.01)
    w2 = fem.energy(bs.interpolate_nodal(src.scaled(2.0), m, "iron"), LinearMaterial(1.0), "iron")
    assert w2 == pytest.approx(4 * w, rel=1e-12)
    assert fem.energy(f * 0.0, None, "iron") == 0.0


def test_l2_error_basic(tube_coarse):
    f = fem.FEFunction.from_full(tube_coarse, tube_coarse.nodes[:, 0] ** 2)
    assert fem.l2_error(f, f)[0] == 0.0
    zero = f * 0.0
    err, rel = fem.l2_error(f, zero, "all", "Az")
    norm, _ = fem.l2_error(zero, f, "all", "Az")
    assert rel == pytest.approx(1.0)
    assert err == norm


def test_interpolation_error_second_order():
    def exact(p):
        return p[:, 0] ** 2 + p[:, 1] ** 2, np.column_stack([2 * p[:, 1], -2 * p[:, 0]])

    hs, errs = [], []
    for n in (4, 8, 16, 32):
        m = grid_mesh(n, n)
        f = fem.FEFunction.from_full(m, exact(m.nodes)[0])
        hs.append(mesh_length(m))
        errs.append(fem.l2_error(exact, f, "all", "Az", mesh=m)[0])
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.1)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-5, 5), st.floats(-5, 5))
def test_stiffness_linear_in_nu(scale, gx, gy):
    m = grid_mesh(3, 3)
    a = gx * m.nodes[:, 0] + gy * m.nodes[:, 1]
    K1 = fem.assemble_stiffness(m, nu_elements=np.ones(m.n_triangles))
    Ks = fem.assemble_stiffness(m, nu_elements=scale * np.ones(m.n_triangles))
    e1 = 0.5 * a @ (K1 @ a)
    assert e1 == pytest.approx(0.5 * (gx * gx + gy * gy), rel=1e-10, abs=1e-12)
    assert 0.5 * a @ (Ks @ a) == pytest.approx(scale * e1, rel=1e-10, abs=1e-12)
