"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array, check_scalar

from .geometry import SimplicialManifold
from .spectrum import DensityPair

__all__ = ["check_mesh", "check_index", "check_cell_field", "check_densities", "check_tolerance"]


def check_mesh(mesh) -> SimplicialManifold:
    if not isinstance(mesh, SimplicialManifold):
        raise TypeError(f"expected a SimplicialManifold, got {type(mesh).__name__}")
    return mesh


def check_index(k, name: str = "k") -> int:
    """Eigenvalue index, an integer ``>= 1``."""
    if isinstance(k, bool) or not isinstance(k, numbers.Integral):
        raise TypeError(f"{name} must be an integer")
    check_scalar(int(k), name, numbers.Integral, min_val=1)
    return int(k)


def check_tolerance(x, name: str) -> float:
    check_scalar(x, name, numbers.Real, min_val=0.0, include_boundaries="neither")
    return float(x)


def check_cell_field(mesh: SimplicialManifold, values, name: str = "field", positive: bool = False) -> np.ndarray:
    """Per-cell array; per-vertex input is averaged onto cells."""
    a = check_array(np.asarray(values, dtype=float), ensure_2d=False, input_name=name)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if a.shape == (mesh.n_vertices,) and mesh.n_vertices != mesh.n_cells:
        a = mesh.cell_average(a)
    if a.shape != (mesh.n_cells,):
        raise ValueError(f"{name} has {a.size} entries; mesh has {mesh.n_cells} cells")
    if positive and np.any(a <= 0):
        raise ValueError(f"{name} must be positive")
    if np.any(a < 0):
        raise ValueError(f"{name} must be non-negative")
    return a


def check_densities(mesh: SimplicialManifold, densities) -> DensityPair:
    """Accept a DensityPair or an ``(alpha, beta)`` pair of per-cell arrays."""
    if isinstance(densities, DensityPair):
        if densities.alpha.shape != (mesh.n_cells,):
            raise ValueError("densities do not match the mesh")
        return densities
    alpha, beta = densities
    return DensityPair(check_cell_field(mesh, alpha, "alpha"), check_cell_field(mesh, beta, "beta"))
