"""Estimator-style wrappers around the functional API.

The "data" passed to ``fit`` is a mesh; fitted quantities end with ``_``.
Hyperparameters are constructor arguments, so ``get_params``/``set_params``
and ``sklearn.base.clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .certify import certify_state, normalized_view
from .geometry import GeodesicBall, SimplicialManifold
from .maximize import LineSearch, StopRule, maximize, nu_value
from .nharmonic import SphereMap, el_residual, harmonic_replacement, tau_energy
from .spectrum import DensityPair
from .validation import check_densities, check_index, check_mesh, check_tolerance

__all__ = ["ConformalSpectrumMaximizer", "TauHarmonicMap", "smooth_perturbation", "initial_densities"]


def smooth_perturbation(mesh: SimplicialManifold, rng=None) -> np.ndarray:
    """Nodal field in [0, 1] varying on the scale of the manifold.

    Spheres use a Gaussian bump ``exp(-|x - c|^2 / 0.5)`` at a random point
    ``c`` of the sphere; tori use ``prod_i (1 + cos(2 pi x_i / P_i + phi_i)) / 2``
    with random phases.
    """
    rng = np.random.default_rng(rng)
    X = mesh.vertices
    if mesh.periods is None:
        c = rng.normal(size=X.shape[1])
        c /= np.linalg.norm(c)
        return np.exp(-np.sum((X - c) ** 2, axis=1) / 0.5)
    ph = rng.uniform(0.0, 2 * np.pi, size=X.shape[1])
    return np.prod(0.5 * (1.0 + np.cos(2 * np.pi * X / mesh.periods + ph)), axis=1)


def initial_densities(mesh: SimplicialManifold, kind: str = "perturbed", amplitude: float = 0.2,
                      rng=None) -> DensityPair:
    """Uniform pair, or ``(1 + a p_1, 1 + a p_2)`` with independent smooth bumps ``p_i``."""
    if kind == "uniform":
        return DensityPair.uniform(mesh)
    if kind != "perturbed":
        raise ValueError("kind must be 'uniform' or 'perturbed'")
    rng = np.random.default_rng(rng)
    pa = mesh.cell_average(smooth_perturbation(mesh, rng))
    pb = mesh.cell_average(smooth_perturbation(mesh, rng))
    return DensityPair(1.0 + amplitude * pa, 1.0 + amplitude * pb)


class ConformalSpectrumMaximizer(BaseEstimator):
    """Maximize the normalized eigenvalue ``lambar_k`` over density pairs.

    Parameters
    ----------
    k : int
        Eigenvalue index, ``k >= 1``.
    mode : {"maximize", "nu"}
        ``"nu"`` freezes alpha at 1 and maximizes over beta only.
    init : {"uniform", "perturbed"}
        Starting pair when ``fit`` receives no ``init_densities``.
    init_amplitude : float
        Relative size of the smooth perturbation.
    delta_stop, rel_delta, max_iters : stopping rule (see ``StopRule``).
    mult_tol, eig_tol : eigen-solver tolerances.
    h0 : float
        Initial line-search step.
    budget : int
        Gradient evaluations of the direction finder.
    cluster_tol, cluster_min : float
        Initial and final relative cluster widths.
    step_direction : {"fisher", "pseudo"}
    alpha_norm : {"functional", "half"}
    smoothing : bool
        One-ring averaging of the step direction.
    cert_cluster_tol : float
        Eigenvalue group width for the certificate.
    random_state : int, Generator or None
        Seeds the initial perturbation.

    Attributes
    ----------
    state_ : AscentState
    densities_ : DensityPair
        Final pair, normalized as in the objective.
    spectrum_ : Spectrum
    lambda_bar_ : float
    history_ : list of dict
    n_iter_ : int
    certificate_ : Certificate
    nu_ : float
        Only in ``"nu"`` mode: ``lam_k int beta`` at ``alpha = 1``.
    """

    def __init__(self, k=1, mode="maximize", init="perturbed", init_amplitude=0.2, delta_stop=None,
                 rel_delta=1e-4, max_iters=200, mult_tol=1e-6, eig_tol=1e-10, h0=0.5, budget=200,
                 cluster_tol=1e-2, cluster_min=1e-4, step_direction="fisher", alpha_norm="functional",
                 smoothing=False, cert_cluster_tol=1e-2, random_state=None):
        self.k = k
        self.mode = mode
        self.init = init
        self.init_amplitude = init_amplitude
        self.delta_stop = delta_stop
        self.rel_delta = rel_delta
        self.max_iters = max_iters
        self.mult_tol = mult_tol
        self.eig_tol = eig_tol
        self.h0 = h0
        self.budget = budget
        self.cluster_tol = cluster_tol
        self.cluster_min = cluster_min
        self.step_direction = step_direction
        self.alpha_norm = alpha_norm
        self.smoothing = smoothing
        self.cert_cluster_tol = cert_cluster_tol
        self.random_state = random_state

    def _check_params(self):
        check_index(self.k)
        for name in ("rel_delta", "mult_tol", "eig_tol", "h0", "cluster_tol", "cluster_min", "cert_cluster_tol"):
            check_tolerance(getattr(self, name), name)
        if self.delta_stop is not None:
            check_tolerance(self.delta_stop, "delta_stop")
        if self.mode not in ("maximize", "nu"):
            raise ValueError("mode must be 'maximize' or 'nu'")

    def fit(self, X, y=None, init_densities=None, callback=None):
        """Run the ascent on mesh ``X``.

        ``init_densities`` (a DensityPair or ``(alpha, beta)``) overrides the
        ``init`` parameter; ``callback`` is called with every accepted state.
        """
        self._check_params()
        mesh = check_mesh(X)
        if init_densities is None:
            d0 = initial_densities(mesh, self.init, self.init_amplitude, self.random_state)
        else:
            d0 = check_densities(mesh, init_densities)
        d0 = d0.with_(alpha_norm=self.alpha_norm)
        stop = StopRule(self.delta_stop, self.rel_delta, self.max_iters)
        kw = dict(ls=LineSearch(self.h0), step_direction=self.step_direction, budget=self.budget,
                  cluster_tol=self.cluster_tol, mult_tol=self.mult_tol, eig_tol=self.eig_tol,
                  cluster_min=self.cluster_min, smooth=self.smoothing, callback=callback)
        if self.mode == "nu":
            d0 = d0.with_(alpha=np.ones(mesh.n_cells), conformal=False)
            st = maximize(mesh, self.k, d0, stop, freeze_alpha=True, **kw)
            self.nu_ = nu_value(mesh, st)
        else:
            st = maximize(mesh, self.k, d0, stop, **kw)
        self.state_ = st
        self.mesh_ = mesh
        self.spectrum_ = st.spectrum
        self.densities_ = st.densities
        self.lambda_bar_ = st.lambda_bar
        self.history_ = list(st.history)
        self.n_iter_ = st.iteration
        self.certificate_ = certify_state(mesh, st.densities, st.spectrum, self.k, self.cert_cluster_tol)
        return self

    def transform(self, X=None):
        """Per-cell conformal factor of the fitted pair (normalized)."""
        check_is_fitted(self, "state_")
        d, _ = normalized_view(self.mesh_, self.densities_, self.spectrum_)
        return d.conformal_factor(self.mesh_.dim)

    def score(self, X=None, y=None) -> float:
        """Final ``lambar_k``."""
        check_is_fitted(self, "state_")
        return float(self.lambda_bar_)


class TauHarmonicMap(BaseEstimator):
    """Harmonic replacement of a sphere-valued map on a ball.

    Parameters
    ----------
    tau0 : float or None
        First regularizer; default is the mean of ``|grad Psi|^2`` on the ball.
    J : int
        Number of halvings of tau.
    tol : float
        EL residual tolerance of each stage.
    max_iter : int
        Iteration cap of each stage.

    Attributes
    ----------
    map_ : SphereMap
    report_ : dict
    energy_ : float
        ``E_tau`` on the ball at the final tau.
    residual_ : float
        EL residual at the final tau.
    """

    def __init__(self, tau0=None, J=20, tol=1e-8, max_iter=2000):
        self.tau0 = tau0
        self.J = J
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None, init: SphereMap = None, ball: GeodesicBall = None):
        mesh = check_mesh(X)
        if init is None or ball is None:
            raise ValueError("fit needs an initial SphereMap and a GeodesicBall")
        check_tolerance(self.tol, "tol")
        if self.tau0 is not None:
            check_tolerance(self.tau0, "tau0")
        out = harmonic_replacement(mesh, init, ball, self.tau0, self.J, tol=self.tol, max_iter=self.max_iter)
        tau = out.report["tau_final"]
        self.mesh_ = mesh
        self.ball_ = ball
        self.map_ = out
        self.report_ = out.report
        self.energy_ = tau_energy(mesh, out, tau, ball).energy
        self.residual_ = el_residual(mesh, out, tau, ball)[1]
        return self

    def transform(self, X=None):
        check_is_fitted(self, "map_")
        return np.array(self.map_.values)

    def score(self, X=None, y=None) -> float:
        """Negative final energy (larger is better)."""
        check_is_fitted(self, "map_")
        return -float(self.energy_)
