import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmvp.materials import (
    MU0, NU0, BHTableMaterial, LinearMaterial, MaterialError, default_steel, dnu_db2, load_bh_csv,
    material_from_spec, nu,
)

STEEL = default_steel()
MODELS = [LinearMaterial(1.0), LinearMaterial(4000.0), STEEL]


def test_linear_values():
    assert nu(LinearMaterial(4000.0), 2.5)[()] == pytest.approx(1 / (4000 * MU0))
    assert 1 / (4000 * MU0) == pytest.approx(198.94, rel=1e-4)
    assert nu(LinearMaterial(1.0), [0.0, 3.0]) == pytest.approx([NU0, NU0])
    assert NU0 == pytest.approx(7.9577e5, rel=1e-4)
    assert dnu_db2(LinearMaterial(4000.0), [0.0, 4.0]) == pytest.approx([0.0, 0.0])


def test_table_knots_reproduce_h_over_b():
    b, h = STEEL.b[1:], STEEL.h[1:]
    np.testing.assert_allclose(STEEL.nu(b ** 2), h / b, rtol=1e-12)


def test_derivative_matches_central_difference_interior():
    for b2 in (0.3, 1.7, 2.9, 3.6):
        step = 1e-6 * max(b2, 1.0)
        fd = (STEEL.nu(b2 + step) - STEEL.nu(b2 - step)) / (2 * step)
        assert STEEL.dnu_db2(b2) == pytest.approx(fd, rel=1e-6)


def test_bundled_curve_is_soft_iron_like():
    assert 1000 < STEEL.mu_r_initial < 10000
    assert STEEL.nu(4.0) > 20 * STEEL.nu(0.25)  # saturated by 2 T


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(range(len(MODELS))), st.floats(0.0, 400.0))
def test_positive_and_consistent_derivative(k, b2):
    m = MODELS[k]
    assert m.nu(b2) > 0
    step = 1e-6 * max(b2, 1.0)
    lo, hi = max(b2 - step, 0.0), b2 + step
    if isinstance(m, BHTableMaterial) and b2 == m.b[-1] ** 2:
        hi = b2  # the table end is only C0; the table-side derivative is reported
    fd = (m.nu(hi) - m.nu(lo)) / (hi - lo)
    d = m.dnu_db2(b2)
    assert abs(d - fd) / max(abs(d), 1e-12) < 1e-4 or abs(d - fd) < 1e-6 * abs(m.nu(b2))


def test_reluctivity_non_decreasing():
    b2 = np.linspace(0, 100, 20001)
    assert np.all(np.diff(STEEL.nu(b2)) >= -1e-12 * STEEL.nu(b2[1:]))
    assert np.all(STEEL.dnu_db2(b2) >= 0)


@pytest.mark.parametrize("b, h, match", [
    ([0, 1, 0.5], [0, 100, 200], "increasing"),
    ([0, 1, 2], [0, 100, 100], "increasing"),
    ([0, 1], [0, 100], "three"),
    ([0.1, 1, 2], [0, 100, 200], "start"),
])
def test_invalid_tables(b, h, match):
    with pytest.raises(MaterialError, match=match):
        BHTableMaterial(b, h)


def test_csv_loading(tmp_path):
    p = tmp_path / "bh.csv"
    p.write_text("# comment\nB_T,H_A_per_m\n0,0\n1,200\n2,5000\n")
    m = load_bh_csv(p)
    assert m.nu(1.0) == pytest.approx(200.0)
    bad = tmp_path / "bad.csv"
    bad.write_text("B,H\n0,0\n")
    with pytest.raises(MaterialError, match="header"):
        load_bh_csv(bad)
    assert material_from_spec({"kind": "bh_table", "path": "bh.csv"}, tmp_path).nu(4.0) == pytest.approx(2500.0)


def test_material_from_spec():
    assert material_from_spec({"kind": "linear", "mu_r": 4000}) == LinearMaterial(4000.0)
    assert not material_from_spec({"kind": "bh_table"}).is_linear
    with pytest.raises(MaterialError):
        material_from_spec({"kind": "ferrofluid"})
    with pytest.raises(MaterialError):
        LinearMaterial(-1.0)


def test_extrapolation_follows_saturated_asymptote():
    b_max, h_max = STEEL.b[-1], STEEL.h[-1]
    for b in (b_max, 12.0, 20.0):
        h = STEEL.nu(b * b) * b
        assert h == pytest.approx(h_max + (b - b_max) / MU0, rel=1e-12)
    assert STEEL.dnu_db2(b_max ** 2 * (1 + 1e-9)) == pytest.approx(STEEL.dnu_db2(b_max ** 2), rel=0.05)
