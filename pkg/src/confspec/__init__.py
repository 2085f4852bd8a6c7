"""Maximization of conformal Laplace eigenvalues on simplicial meshes.

Submodules
----------
geometry    meshes of spheres and flat tori, geodesic balls, refinement
spectrum    weighted P1 eigenproblems and the normalized eigenvalue
maximize    subgradient ascent over density pairs
nharmonic   regularized n-harmonic maps into spheres
certify     extremality residuals, concentration scan, embedding probes
cli         configuration-driven runs, records and field export
"""

__version__ = "0.1.0"

from .exceptions import (ConfigError, ConfspecError, DegenerateDensityError, DegenerateMeshError,  # noqa: E402
                         EmptyBallError, SolverFailure)
from .geometry import (GeodesicBall, SimplicialManifold, build_flat_torus, build_icosphere,  # noqa: E402
                       build_sphere3, geodesic_ball, read_mesh, refine, write_mesh)
from .spectrum import (DensityPair, Spectrum, compute_spectrum, eigensolve, local_star_eigenvalue,  # noqa: E402
                       normalized_eigenvalue)
from .maximize import (AscentState, LineSearch, StopRule, direction_find, maximize, nu_mode,  # noqa: E402
                       nu_value, project_constraints, subdifferential_elements)
from .nharmonic import (SphereMap, bochner_check, el_residual, eps_regularity_check,  # noqa: E402
                        harmonic_replacement, solve_tau_harmonic, tau_energy)
from .certify import (BadPointReport, Certificate, certify_state, compactness_probe,  # noqa: E402
                      concentration_scan, sobolev_embedding_check, sphere_certificate)
from .estimators import ConformalSpectrumMaximizer, TauHarmonicMap  # noqa: E402

__all__ = [
    "__version__",
    "ConfigError", "ConfspecError", "DegenerateDensityError", "DegenerateMeshError", "EmptyBallError",
    "SolverFailure",
    "GeodesicBall", "SimplicialManifold", "build_flat_torus", "build_icosphere", "build_sphere3",
    "geodesic_ball", "read_mesh", "refine", "write_mesh",
    "DensityPair", "Spectrum", "compute_spectrum", "eigensolve", "local_star_eigenvalue",
    "normalized_eigenvalue",
    "AscentState", "LineSearch", "StopRule", "direction_find", "maximize", "nu_mode", "nu_value",
    "project_constraints", "subdifferential_elements",
    "SphereMap", "bochner_check", "el_residual", "eps_regularity_check", "harmonic_replacement",
    "solve_tau_harmonic", "tau_energy",
    "BadPointReport", "Certificate", "certify_state", "compactness_probe", "concentration_scan",
    "sobolev_embedding_check", "sphere_certificate",
    "ConformalSpectrumMaximizer", "TauHarmonicMap",
]
