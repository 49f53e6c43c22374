"""Reluctivity models nu(B^2) for linear and saturating materials."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

MU0 = 4e-7 * np.pi  # H/m, exact by convention here
NU0 = 1.0 / MU0


class MaterialError(ValueError):
    pass


@dataclass(frozen=True)
class LinearMaterial:
    """Constant relative permeability."""

    mu_r: float = 1.0
    kind = "linear"

    def __post_init__(self):
        if not (np.isfinite(self.mu_r) and self.mu_r > 0):
            raise MaterialError(f"relative permeability must be positive, got {self.mu_r}")

    @property
    def is_linear(self) -> bool:
        return True

    def nu(self, b_squared):
        return np.full(np.shape(b_squared), 1.0 / (MU0 * self.mu_r))

    def dnu_db2(self, b_squared):
        return np.zeros(np.shape(b_squared))


class BHTableMaterial:
    """Saturating material from a tabulated BH curve.

    The reluctivity H/B is interpolated as a function of B^2 with a
    shape-preserving cubic, so its derivative is non-negative whenever the
    tabulated reluctivity is non-decreasing. Outside the table the last
    reluctivity is held constant.
    """

    kind = "bh_table"

    def __init__(self, b, h, name="bh_table"):
        b = np.asarray(b, dtype=float)
        h = np.asarray(h, dtype=float)
        if b.ndim != 1 or b.shape != h.shape or len(b) < 3:
            raise MaterialError("BH table needs at least three (B, H) pairs")
        if b[0] != 0 or h[0] != 0:
            raise MaterialError("BH table must start at (0, 0)")
        if np.any(np.diff(b) <= 0) or np.any(np.diff(h) <= 0):
            raise MaterialError("BH table must be strictly increasing in both B and H")
        self.name = name
        self.b = b
        self.h = h
        nu = h[1:] / b[1:]
        # B -> 0 limit: initial slope of the table
        x = np.concatenate([[0.0], b[1:] ** 2])
        y = np.concatenate([[nu[0]], nu])
        self._x_max = x[-1]
        self._interp = PchipInterpolator(x, y, extrapolate=False)
        self._deriv = self._interp.derivative()

    def __repr__(self):
        return f"BHTableMaterial(name={self.name!r}, points={len(self.b)})"

    @property
    def is_linear(self) -> bool:
        return False

    @property
    def mu_r_initial(self) -> float:
        return float(self.b[1] / self.h[1] / MU0)

    def nu(self, b_squared):
        b2 = np.asarray(b_squared, dtype=float)
        out = np.empty(b2.shape)
        inside = b2 <= self._x_max
        out[inside] = self._interp(np.maximum(b2[inside], 0.0))
        # beyond the table: H = H_max + (B - B_max) / mu0, the saturated asymptote
        b = np.sqrt(b2[~inside])
        out[~inside] = (self.h[-1] + (b - self.b[-1]) * NU0) / b
        return out

    def dnu_db2(self, b_squared):
        """Derivative of ``nu``; at the last table point the table side is used."""
        b2 = np.asarray(b_squared, dtype=float)
        out = np.empty(b2.shape)
        inside = b2 <= self._x_max
        out[inside] = self._deriv(np.maximum(b2[inside], 0.0))
        b = np.sqrt(b2[~inside])
        out[~inside] = (self.b[-1] * NU0 - self.h[-1]) / (2 * b ** 3)
        return out


MaterialModel = LinearMaterial | BHTableMaterial


def nu(model, b_squared):
    """Reluctivity in m/H."""
    return model.nu(b_squared)


def dnu_db2(model, b_squared):
    """Derivative of the reluctivity with respect to B^2."""
    return model.dnu_db2(b_squared)


def load_bh_csv(path, name=None) -> BHTableMaterial:
    """Read a ``B_T,H_A_per_m`` CSV file (``#`` lines are comments)."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.lstrip().startswith("#")) if r]
    if not rows or [c.strip() for c in rows[0]] != ["B_T", "H_A_per_m"]:
        raise MaterialError(f"{path}: expected header 'B_T,H_A_per_m'")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:]])
    except ValueError:
        raise MaterialError(f"{path}: non-numeric BH entry") from None
    return BHTableMaterial(data[:, 0], data[:, 1], name=name or path.stem)


def default_steel() -> BHTableMaterial:
    """Bundled representative steel curve (mu_r(0) about 4000, saturating near 2 T)."""
    ref = resources.files("rmvp") / "data" / "steel_bh.csv"
    with resources.as_file(ref) as p:
        return load_bh_csv(p, name="steel_bh_v1")


def material_from_spec(spec, base_dir=None):
    """Build a material from a config mapping.

    Accepted forms: ``{"kind": "linear", "mu_r": 4000}``,
    ``{"kind": "bh_table", "path": "curve.csv"}`` and
    ``{"kind": "bh_table"}`` for the bundled steel.
    """
    if isinstance(spec, (LinearMaterial, BHTableMaterial)):
        return spec
    kind = spec.get("kind", "linear")
    if kind == "linear":
        return LinearMaterial(float(spec.get("mu_r", 1.0)))
    if kind == "bh_table":
        if "path" not in spec:
            return default_steel()
        p = Path(spec["path"])
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        return load_bh_csv(p)
    raise MaterialError(f"unknown material kind {kind!r}")
