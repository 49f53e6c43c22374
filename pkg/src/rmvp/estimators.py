"""Estimator-style wrappers around the three solvers.

``fit(mesh, sources)`` solves; ``predict(points)`` returns B (n, 2) in T and
``potential(points)`` returns Az. Constructor arguments are plain
hyper-parameters, so ``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import biot_savart as bs
from . import formulations as fm
from .fem import l2_error
from .materials import material_from_spec
from .mesh import Mesh


def check_sources_arg(sources) -> bs.SourceSet:
    """Accept a SourceSet, a list of LineCurrent or an (n, 3) array x, y, I."""
    if isinstance(sources, bs.SourceSet):
        return sources
    if len(sources) and isinstance(sources[0], bs.LineCurrent):
        return bs.SourceSet(sources)
    arr = check_array(sources, ensure_min_samples=0, dtype=float)
    if arr.shape[1] != 3:
        raise ValueError(f"sources must have 3 columns (x, y, I), got {arr.shape[1]}")
    return bs.SourceSet.from_arrays(arr[:, :2], arr[:, 2])


def check_points(points) -> np.ndarray:
    pts = check_array(np.atleast_2d(np.asarray(points, dtype=float)), dtype=float)
    if pts.shape[1] != 2:
        raise ValueError(f"points must have 2 columns, got {pts.shape[1]}")
    return pts


class _FieldSolver(BaseEstimator):
    def _material(self):
        return material_from_spec(self.material) if isinstance(self.material, dict) else self.material

    def _newton(self):
        return fm.NewtonOptions(self.newton_tol, self.newton_max_iter)

    def _check_mesh(self, mesh):
        if not isinstance(mesh, Mesh):
            raise TypeError(f"expected a Mesh, got {type(mesh).__name__}")
        return mesh

    def predict(self, points) -> np.ndarray:
        """Flux density B at ``points`` (n, 2)."""
        check_is_fitted(self, "field_")
        return self.field_.evaluate(check_points(points))[1]

    def potential(self, points) -> np.ndarray:
        check_is_fitted(self, "field_")
        return self.field_.evaluate(check_points(points))[0]

    def score(self, reference, region="eval"):
        """Negative relative L2 error of B against another fitted solver's field."""
        check_is_fitted(self, "field_")
        other = reference.field_ if isinstance(reference, _FieldSolver) else reference
        return -l2_error(other, self.field_, region, "B", mesh=self.mesh_)[1]


class ReferenceSolver(_FieldSolver):
    """Volumetric solve with windings and/or line currents as point loads."""

    def __init__(self, material=None, newton_tol=1e-8, newton_max_iter=50):
        self.material = material
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter

    def fit(self, mesh, sources=None, windings=()):
        mesh = self._check_mesh(mesh)
        lines = None if sources is None else check_sources_arg(sources)
        if not windings and (lines is None or not len(lines)):
            raise ValueError("ReferenceSolver.fit needs windings or line currents")
        self.field_, self.report_ = fm.solve_reference(mesh, list(windings), self._material(), lines,
                                                       self._newton())
        self.mesh_ = mesh
        return self


class OriginalRMVP(_FieldSolver):
    """Reduced formulation with the source potential projected on every node."""

    def __init__(self, material=None, projection="nodal", newton_tol=1e-8, newton_max_iter=50, workers=1):
        self.material = material
        self.projection = projection
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter
        self.workers = workers

    def fit(self, mesh, sources):
        mesh = self._check_mesh(mesh)
        src = check_sources_arg(sources)
        self.field_, self.report_ = fm.solve_original(mesh, src, self._material(), self.projection,
                                                      self._newton(), self.workers)
        self.mesh_ = mesh
        return self


class UpdatedRMVP(_FieldSolver):
    """Reduced formulation with sources sampled on the air-iron interface only."""

    def __init__(self, material=None, min_gap_fraction=fm.MIN_GAP_FRACTION, warn_delta=fm.WARN_DELTA,
                 newton_tol=1e-8, newton_max_iter=50, workers=1):
        self.material = material
        self.min_gap_fraction = min_gap_fraction
        self.warn_delta = warn_delta
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter
        self.workers = workers

    def fit(self, mesh, sources):
        mesh = self._check_mesh(mesh)
        src = check_sources_arg(sources)
        opts = fm.UpdatedOptions(self.min_gap_fraction, self.warn_delta, self._newton(), False, self.workers)
        self.field_, self.report_ = fm.solve_updated(mesh, src, self._material(), opts)
        self.mesh_ = mesh
        return self

    @property
    def parts_(self):
        check_is_fitted(self, "field_")
        return self.field_.parts
