"""Weighted P1 forms and the generalized eigenproblem ``K(alpha) x = lam M(beta) x``.

The Dirichlet weight ``alpha`` and the mass weight ``beta`` are per-cell
densities. The mass form is lumped (vertex-average quadrature), so cell values
of ``phi**2`` are vertex averages and every weighted integral used by the
ascent is exact for the discrete problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .exceptions import DegenerateDensityError, EmptyBallError, SolverFailure
from .geometry import GeodesicBall, SimplicialManifold

logger = logging.getLogger(__name__)

__all__ = [
    "DensityPair",
    "Spectrum",
    "assemble",
    "eigensolve",
    "dense_eigensolve",
    "compute_spectrum",
    "normalized_eigenvalue",
    "local_star_eigenvalue",
    "alpha_exponent",
]

MULT_TOL = 1e-6
MASS_FLOOR = 1e-12


def alpha_exponent(n: int) -> float:
    """Exponent q in the denominator ``(int alpha^q)^(1/q)``; ``inf`` for n = 2."""
    return np.inf if n == 2 else n / (n - 2)


@dataclass(frozen=True, eq=False)
class DensityPair:
    """Per-cell Dirichlet weight ``alpha`` and mass weight ``beta``.

    ``alpha_norm`` selects which power of alpha is normalized to one by
    :func:`confspec.maximize.project_constraints`: ``"functional"`` uses the
    exponent n/(n-2) of the objective's denominator, ``"half"`` uses n/2.
    For n = 2 the alpha normalization is ``max(alpha) = 1``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    conformal: bool = False
    alpha_normalized: bool = False
    beta_normalized: bool = False
    alpha_norm: str = "functional"

    def __post_init__(self):
        for name in ("alpha", "beta"):
            a = np.array(getattr(self, name), dtype=float, copy=True)
            if a.ndim != 1:
                raise ValueError(f"{name} must be a 1-d per-cell array")
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite and non-negative")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.alpha.shape != self.beta.shape:
            raise ValueError("alpha and beta must have one value per cell")
        if self.alpha_norm not in ("functional", "half"):
            raise ValueError("alpha_norm must be 'functional' or 'half'")

    @classmethod
    def uniform(cls, mesh: SimplicialManifold, **kw) -> "DensityPair":
        one = np.ones(mesh.n_cells)
        return cls(one, one, conformal=True, **kw)

    @classmethod
    def from_conformal_factor(cls, mesh: SimplicialManifold, f) -> "DensityPair":
        """Densities of the metric ``f g``: alpha = f^((n-2)/2), beta = f^(n/2)."""
        f = np.asarray(f, dtype=float)
        if f.shape == (mesh.n_vertices,):
            f = mesh.cell_average(f)
        n = mesh.dim
        return cls(f ** ((n - 2) / 2), f ** (n / 2), conformal=True)

    def conformal_factor(self, n: int) -> np.ndarray:
        """f with alpha = f^((n-2)/2); for n = 2 the area density beta."""
        if n == 2:
            return self.beta.copy()
        return self.alpha ** (2.0 / (n - 2))

    def with_(self, **kw) -> "DensityPair":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Smallest eigenpairs of the weighted problem.

    ``vectors[:, i]`` are nodal eigenfunctions, orthonormal in the lumped
    beta-mass inner product.
    """

    values: np.ndarray
    vectors: np.ndarray
    k: int
    mult_tol: float = MULT_TOL
    residuals: Optional[np.ndarray] = None
    mass_floor: float = 0.0
    floor_influence: float = 0.0

    def groups(self, tol: Optional[float] = None):
        """Index groups whose consecutive relative gaps are below ``tol``."""
        tol = self.mult_tol if tol is None else tol
        lam = self.values
        out, cur = [], [0]
        for i in range(1, lam.size):
            scale = max(abs(lam[i]), abs(lam[i - 1]), 1e-300)
            if (lam[i] - lam[i - 1]) / scale < tol:
                cur.append(i)
            else:
                out.append(cur)
                cur = [i]
        out.append(cur)
        return out

    def group_of(self, k: Optional[int] = None, tol: Optional[float] = None):
        k = self.k if k is None else k
        if k >= self.values.size:
            raise IndexError(f"index {k} exceeds computed spectrum of size {self.values.size}")
        for g in self.groups(tol):
            if k in g:
                return list(g)
        raise IndexError(k)  # pragma: no cover

    def multiplicity(self, k: Optional[int] = None, tol: Optional[float] = None) -> int:
        return len(self.group_of(k, tol))


def assemble(mesh: SimplicialManifold, densities: DensityPair):
    """Weighted stiffness ``K(alpha)`` and lumped mass ``M(beta)`` as CSR matrices."""
    return stiffness(mesh, densities.alpha), mass(mesh, densities.beta)


def stiffness(mesh: SimplicialManifold, weight) -> sp.csr_matrix:
    w = mesh.volumes * np.asarray(weight, dtype=float)
    g = mesh.gradients
    local = np.einsum("c,cid,cjd->cij", w, g, g)
    k = mesh.dim + 1
    rows = np.repeat(mesh.cells, k, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, k)).ravel()
    K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2).tocsr()
    K.sum_duplicates()
    return K


def mass(mesh: SimplicialManifold, weight) -> sp.csr_matrix:
    return sp.diags(mesh.lumped_mass(weight)).tocsr()


def _floor(mesh, M):
    # MASS_FLOOR times the mean cell mass int(beta) / C; for beta = 1 this is
    # the mean cell volume, and it scales with beta so dilations stay exact
    eps = MASS_FLOOR * float(M.diagonal().sum()) / mesh.n_cells
    return (M + eps * sp.identity(M.shape[0], format="csr")).tocsr(), eps


def _dead_dofs(K, M, eps):
    """Nodes with neither stiffness nor (pre-floor) mass; they decouple."""
    kd = np.abs(K.diagonal())
    md = M.diagonal()
    scale = max(kd.max(), 1e-300)
    return (kd <= 1e-14 * scale) & (md <= 2 * eps)


def eigensolve(K, M, k: int, tol: float = 1e-10, *, nev: Optional[int] = None, mesh=None,
               mult_tol: float = MULT_TOL, maxiter: Optional[int] = None, dense_threshold: int = 400,
               _floor_eps=None) -> Spectrum:
    """Smallest ``nev`` (default ``k + 1`` plus padding) eigenpairs of ``K x = lam M x``.

    Both routes use the shift-invert form about a small negative shift:
    problems with at most ``dense_threshold`` live nodes are solved densely,
    larger ones by Lanczos. The request is widened
    until the eigenvalue group containing ``k`` is complete. ``M`` must already
    be positive definite (see :func:`compute_spectrum` for the mass floor).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    K = sp.csr_matrix(K)
    M = sp.csr_matrix(M)
    N = K.shape[0]
    eps = _floor_eps if _floor_eps is not None else 0.0
    dead = _dead_dofs(K, M, eps)
    live = np.flatnonzero(~dead)
    Kl, Ml = K[live][:, live], M[live][:, live]
    Nl = live.size
    want = max(nev or 0, k + 1 + max(4, k // 2))
    diag = Kl.diagonal() / np.maximum(Ml.diagonal(), 1e-300)
    sigma = -1e-3 * float(np.median(diag))
    while True:
        want = min(want, Nl)
        if Nl <= dense_threshold or want >= Nl - 1:
            # largest mu of M x = mu (K - sigma M) x; stays accurate when the
            # mass floor makes M badly conditioned
            Md = Ml.toarray()
            mu, X = la.eigh(Md, Kl.toarray() - sigma * Md, subset_by_index=[Nl - want, Nl - 1])
            lam, X = sigma + 1.0 / mu[::-1], X[:, ::-1]
        else:
            try:
                lam, X = eigsh(Kl, k=want, M=Ml, sigma=sigma, which="LM", tol=tol * 1e-2,
                               maxiter=maxiter)
            except ArpackNoConvergence as exc:
                res = _residuals(Kl, Ml, exc.eigenvalues, exc.eigenvectors)
                raise SolverFailure("eigensolver did not converge", residuals=res) from exc
            order = np.argsort(lam)
            lam, X = lam[order], X[:, order]
        lam = np.where(np.abs(lam) < 1e-13 * max(abs(lam[-1]), 1.0), np.abs(lam), lam)
        spec = Spectrum(lam, X, k, mult_tol)
        grp = spec.group_of(k)
        if grp[-1] < lam.size - 1 or want >= Nl:
            break
        want = want + max(4, want // 2)
    # beta-orthonormalize within computed vectors (guards against solver drift)
    G = X.T @ (Ml @ X)
    Lc = np.linalg.cholesky(0.5 * (G + G.T))
    X = la.solve_triangular(Lc, X.T, lower=True).T
    res = _residuals(Kl, Ml, lam, X)
    bad = res > max(tol, 1e-8) * 10
    if np.any(bad):
        raise SolverFailure("eigenpairs above residual tolerance", residuals=res)
    full = np.zeros((N, X.shape[1]))
    full[live] = X
    return Spectrum(lam, full, k, mult_tol, residuals=res)


def _residuals(K, M, lam, X):
    """``||K x - lam M x|| / ||K x||``, with ``||K x||`` floored at ``lam_max ||M x||``.

    The floor keeps the kernel vector (``K x = 0``) measurable.
    """
    lam = np.asarray(lam)
    MX = M @ X
    KX = K @ X
    R = KX - MX * lam
    floor = np.max(np.abs(lam)) * np.linalg.norm(MX, axis=0)
    scale = np.maximum(np.linalg.norm(KX, axis=0), floor)
    return np.linalg.norm(R, axis=0) / np.maximum(scale, 1e-300)


def dense_eigensolve(K, M, count: int):
    """Dense generalized eigenvalues, the oracle for :func:`eigensolve`."""
    return la.eigh(np.asarray(sp.csr_matrix(K).toarray()), np.asarray(sp.csr_matrix(M).toarray()),
                   eigvals_only=True, subset_by_index=[0, count - 1])


def compute_spectrum(mesh: SimplicialManifold, densities: DensityPair, k: int, tol: float = 1e-10,
                     mult_tol: float = MULT_TOL, nev: Optional[int] = None) -> Spectrum:
    """Assemble, floor the mass form and solve for the eigenpairs up to ``k``."""
    K, M0 = assemble(mesh, densities)
    if not np.any(densities.beta > 0):
        raise DegenerateDensityError("beta integrates to zero")
    M, eps = _floor(mesh, M0)
    spec = eigensolve(K, M, k, tol, nev=nev, mult_tol=mult_tol, _floor_eps=eps)
    m0 = M0.diagonal()
    live = m0 > 0
    influence = eps / float(m0[live].min()) if np.any(live) else np.inf
    return replace(spec, mass_floor=eps, floor_influence=influence)


def _norms(mesh, densities):
    vol = mesh.volumes
    B = float(vol @ densities.beta)
    n = mesh.dim
    if n == 2:
        D = float(densities.alpha.max())
    else:
        q = n / (n - 2)
        D = float(vol @ densities.alpha ** q) ** (1.0 / q)
    return B, D


def normalized_eigenvalue(mesh: SimplicialManifold, densities: DensityPair, spectrum: Spectrum,
                          k: Optional[int] = None) -> float:
    """Scale-invariant ``lam_k * int(beta) / (int alpha^(n/(n-2)))^((n-2)/n)``.

    For n = 2 the denominator is ``max(alpha)`` (the limit of the L^q norm as
    q -> inf), which reduces to ``lam_k * area`` for the conformal pair.
    """
    k = spectrum.k if k is None else k
    B, D = _norms(mesh, densities)
    if D <= 0:
        raise DegenerateDensityError("alpha integrates to zero")
    return float(spectrum.values[k] * B / D)


def local_star_eigenvalue(mesh: SimplicialManifold, densities: DensityPair, ball: GeodesicBall,
                          K=None, M=None) -> float:
    """Smallest Dirichlet eigenvalue of the weighted problem on ``ball``.

    Nodal values outside ``ball.interior`` are pinned to zero. ``K`` and ``M``
    may be passed to reuse a global assembly.
    """
    idx = ball.interior
    if idx.size == 0:
        raise EmptyBallError("ball has empty interior")
    if K is None or M is None:
        K, M0 = assemble(mesh, densities)
        M, _ = _floor(mesh, M0)
    if idx.size == mesh.n_vertices:
        spec = eigensolve(K, M, 0)
        return float(spec.values[0])
    Ki = K[idx][:, idx]
    Mi = M[idx][:, idx]
    if idx.size <= 600:
        lam = la.eigh(Ki.toarray(), Mi.toarray(), eigvals_only=True, subset_by_index=[0, 0])
        return float(lam[0])
    lam = eigsh(Ki, k=1, M=Mi, sigma=0.0, which="LM", return_eigenvectors=False, tol=1e-12)
    return float(np.min(lam))
