"""Distance of a computed state from the extremal structure.

A critical pair admits eigenfunctions ``Phi`` in the cluster at ``k`` with
``|Phi| = 1``; then ``beta = alpha^(n/(n-2))``, the conformal factor equals
``|grad Phi|^2 / lam`` and ``int |grad Phi|^n = lam^(n/2)``. The residuals of
:class:`Certificate` measure each of these identities on the mesh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import DegenerateDensityError, EmptyBallError
from .geometry import SimplicialManifold, geodesic_ball, refine
from .nharmonic import SphereMap
from .spectrum import (DensityPair, Spectrum, assemble, compute_spectrum, local_star_eigenvalue,
                       _floor)

logger = logging.getLogger(__name__)

__all__ = [
    "Certificate",
    "BadPointReport",
    "sphere_certificate",
    "extremal_residuals",
    "certify_state",
    "concentration_scan",
    "sobolev_embedding_check",
    "hat_embedding_ratio",
    "compactness_probe",
    "normalized_view",
    "density_fields",
]

CERT_CLUSTER_TOL = 1e-2


@dataclass(frozen=True, eq=False)
class Certificate:
    """Gram witness ``W`` on the cluster and the residuals it achieves.

    ``Phi`` holds the raw nodal map ``E W^(1/2)`` (not renormalized);
    :attr:`sphere_map` is its nodal projection onto the unit sphere.
    Residuals left as ``nan`` have not been computed yet.
    """

    gram: np.ndarray
    Phi: np.ndarray
    indices: tuple
    lam: float
    norm_dev: float
    conf_dev: float = np.nan
    density_dev: float = np.nan
    energy_gap: float = np.nan
    bad_points: tuple = ()
    density_dev_inf: float = np.nan

    @property
    def p(self) -> int:
        return self.Phi.shape[1] - 1

    @property
    def omega(self) -> np.ndarray:
        """Nodal ``|Phi|``."""
        return np.linalg.norm(self.Phi, axis=1)

    @property
    def sphere_map(self) -> SphereMap:
        om = self.omega
        vals = self.Phi / np.where(om > 0, om, 1.0)[:, None]
        vals[om == 0, 0] = 1.0
        return SphereMap(vals)

    @property
    def energy_gap_rel(self) -> float:
        n2 = self._n / 2
        return float(self.energy_gap / self.lam ** n2)

    _n: int = field(default=2, repr=False)

    def residuals(self) -> dict:
        return dict(norm_dev=self.norm_dev, conf_dev=self.conf_dev, density_dev=self.density_dev,
                    density_dev_inf=self.density_dev_inf, energy_gap=self.energy_gap)

    def to_dict(self) -> dict:
        return dict(indices=list(self.indices), lam=self.lam, gram=self.gram.tolist(), p=self.p,
                    bad_points=[list(b) for b in self.bad_points], **self.residuals())


def normalized_view(mesh: SimplicialManifold, densities: DensityPair, spectrum: Spectrum):
    """Rescale densities to the functional normalization and adjust the spectrum.

    ``(s alpha, t beta)`` has eigenvalues ``lam s / t`` and beta-orthonormal
    vectors ``E / sqrt(t)``, so no eigensolve is needed.
    """
    from .maximize import project_constraints

    d = project_constraints(mesh, replace(densities, alpha_norm="functional"))
    i = int(np.argmax(densities.beta))
    j = int(np.argmax(densities.alpha))
    t = d.beta[i] / densities.beta[i]
    s = d.alpha[j] / densities.alpha[j]
    spec = replace(spectrum, values=spectrum.values * s / t, vectors=spectrum.vectors / np.sqrt(t))
    return d, spec


def _cell_products(mesh, E):
    loc = E[mesh.cells]
    return np.einsum("cvi,cvj->cij", loc, loc) / (mesh.dim + 1)


def _psd_clip(W):
    w, V = np.linalg.eigh(0.5 * (W + W.T))
    return (V * np.maximum(w, 0.0)) @ V.T


def _sqrtm_psd(W):
    w, V = np.linalg.eigh(0.5 * (W + W.T))
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


def sphere_certificate(mesh: SimplicialManifold, spectrum: Spectrum, densities: DensityPair, k: int,
                       cluster_tol: Optional[float] = CERT_CLUSTER_TOL, iters: int = 2000) -> Certificate:
    """Least-squares PSD Gram fit of ``sum W_ij phi_i phi_j = 1``.

    Minimizes ``sum_c vol_c (<W, G_c> - 1)^2`` over ``W >= 0`` by accelerated
    projected gradient (eigenvalue clipping), with ``G_c`` the cell vertex
    average of ``e_i e_j``; then rescales so ``int |Phi|^2 beta = int beta``.
    The cluster is the eigenvalue group of ``k`` at relative width
    ``cluster_tol`` (``None`` uses the spectrum's ``mult_tol``).
    """
    idx = tuple(spectrum.group_of(k, cluster_tol))
    if len(idx) == 0:  # pragma: no cover - group_of always returns k
        raise IndexError("empty eigenvalue group")
    E = spectrum.vectors[:, list(idx)]
    m = len(idx)
    vol = mesh.volumes
    G = _cell_products(mesh, E).reshape(mesh.n_cells, -1)
    Q = G.T @ (vol[:, None] * G)
    r = G.T @ vol
    L = max(np.linalg.eigvalsh(Q).max(), 1e-300)
    W = np.eye(m) * (float(vol @ densities.beta) / m)
    Y, Wp, t = W.copy(), W.copy(), 1.0
    for _ in range(iters):
        g = (Q @ Y.ravel() - r).reshape(m, m)
        Wn = _psd_clip(Y - g / L)
        if np.abs(Wn - Wp).max() <= 1e-14 * max(1.0, np.abs(Wn).max()):
            Wp = Wn
            break
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        Y = Wn + ((t - 1) / tn) * (Wn - Wp)
        Wp, t = Wn, tn
    W = _psd_clip(Wp)
    tr = np.trace(W)
    if tr > 0:
        W = W * (float(vol @ densities.beta) / tr)
    Phi = E @ _sqrtm_psd(W)
    nd = float(np.abs(np.sum(Phi ** 2, axis=1) - 1.0).max())
    return Certificate(W, Phi, idx, float(spectrum.values[k]), nd, _n=mesh.dim)


def extremal_residuals(mesh: SimplicialManifold, densities: DensityPair, spectrum: Spectrum,
                       cert: Certificate, k: int) -> Certificate:
    """Fill ``conf_dev``, ``density_dev`` and ``energy_gap``.

    Densities are assumed functionally normalized (``int beta = 1``,
    ``int alpha^(n/(n-2)) = 1``; for n = 2 ``max alpha = 1``), as produced by
    the ascent; use :func:`certify_state` for arbitrary scalings.

    * ``conf_dev = int |beta - alpha^(n/(n-2))|``; for n = 2, where the
      Dirichlet weight of a conformal metric is constant, ``int |alpha - 1|``.
    * ``density_dev = int |f - |grad Phi|^2 / lam|`` with ``f = alpha^(2/(n-2))``
      (``f = beta`` for n = 2); ``density_dev_inf`` is the largest cellwise gap.
    * ``energy_gap = |lam^(n/2) - int |grad Phi|^n|``.
    """
    n = mesh.dim
    vol = mesh.volumes
    a, b = densities.alpha, densities.beta
    lam = float(spectrum.values[k])
    if n == 2:
        conf = float(vol @ np.abs(a / a.max() - 1.0))
    else:
        conf = float(vol @ np.abs(b - a ** (n / (n - 2))))
    fl = density_fields(mesh, densities, cert.Phi, lam)
    diff = np.abs(fl["f"] - fl["grad_phi2_over_lambda"])
    energy = float(vol @ fl["grad_phi2"] ** (n / 2))
    gap = abs(lam ** (n / 2) - energy)
    return replace(cert, conf_dev=conf, density_dev=float(vol @ diff), density_dev_inf=float(diff.max()),
                   energy_gap=gap, lam=lam)


def density_fields(mesh: SimplicialManifold, densities: DensityPair, Phi, lam: float) -> dict:
    """Per-cell ``f``, ``|grad Phi|^2`` and ``|grad Phi|^2 / lam``.

    ``f = alpha^(2/(n-2))`` for n >= 3 and ``f = beta`` for n = 2.
    """
    n = mesh.dim
    f = densities.beta if n == 2 else densities.alpha ** (2.0 / (n - 2))
    gP = mesh.cell_gradient(np.asarray(Phi, dtype=float))
    B = np.einsum("cmd,cmd->c", gP, gP)
    return {"f": np.asarray(f, dtype=float), "grad_phi2": B, "grad_phi2_over_lambda": B / lam}


def certify_state(mesh: SimplicialManifold, densities: DensityPair, spectrum: Spectrum, k: int,
                  cluster_tol: Optional[float] = CERT_CLUSTER_TOL) -> Certificate:
    """Normalize, fit the Gram witness and compute all residuals."""
    d, spec = normalized_view(mesh, densities, spectrum)
    cert = sphere_certificate(mesh, spec, d, k, cluster_tol)
    return extremal_residuals(mesh, d, spec, cert, k)


# --------------------------------------------------------------------------
# concentration

@dataclass(frozen=True)
class BadPointReport:
    """Flagged ``(vertex, radius)`` pairs with their local eigenvalue and mass.

    ``scanned`` lists every evaluated pair as ``(vertex, radius, lam_star, mass)``.
    """

    threshold: float
    flagged: tuple
    scanned: tuple
    skipped: int = 0

    @property
    def vertices(self):
        return sorted({f[0] for f in self.flagged})

    def __len__(self):
        return len(self.flagged)


def concentration_scan(mesh: SimplicialManifold, densities: DensityPair, lam_k: float,
                       radii: Sequence[float], subsample: int = 64, rng=None, vertices=None,
                       rings: int = 3) -> BadPointReport:
    """Flag balls whose Dirichlet eigenvalue falls below ``lam_k``.

    If ``k + 1`` disjoint balls all had ``lam_star < lam_k``, their ground
    states would give a ``(k+1)``-dimensional space with Rayleigh quotient
    below ``lam_k``; so at most ``k`` disjoint flagged balls exist and flags
    mark mass concentration. ``mass`` is the lumped ``int_B beta`` over the
    ball's interior vertices.

    Centers are ``vertices`` if given, else ``subsample`` vertices drawn from
    ``rng`` (all vertices when ``subsample >= V``). Radii giving an empty
    ball are skipped.
    """
    V = mesh.n_vertices
    if vertices is None:
        if subsample >= V:
            vertices = np.arange(V)
        else:
            rng = np.random.default_rng(rng)
            vertices = np.sort(rng.choice(V, size=subsample, replace=False))
    K, M0 = assemble(mesh, densities)
    M, _ = _floor(mesh, M0)
    mv = M0.diagonal()
    flagged, scanned, skipped = [], [], 0
    for v in vertices:
        for r in radii:
            try:
                ball = geodesic_ball(mesh, int(v), float(r), rings=rings)
            except EmptyBallError:
                skipped += 1
                continue
            ls = local_star_eigenvalue(mesh, densities, ball, K, M)
            mass = float(mv[ball.interior].sum())
            scanned.append((int(v), float(r), ls, mass))
            if ls < lam_k:
                flagged.append((int(v), float(r), ls, mass))
    return BadPointReport(float(lam_k), tuple(flagged), tuple(scanned), skipped)


# --------------------------------------------------------------------------
# Sobolev embedding probe

def _as_cell(mesh, f):
    f = np.asarray(f, dtype=float)
    if f.shape == (mesh.n_vertices,):
        return mesh.cell_average(f)
    if f.shape != (mesh.n_cells,):
        raise ValueError("f must be given per vertex or per cell")
    if np.any(f < 0):
        raise ValueError("f must be non-negative")
    return f


def _embedding_ratio(mesh, fc, u, ball_cells, r, kappa0):
    n = mesh.dim
    vol = mesh.volumes[ball_cells]
    cells = mesh.cells[ball_cells]
    up = np.abs(u[cells]) ** (2 * kappa0)
    lhs = float(vol @ (up.mean(axis=1) * fc[ball_cells] ** (n / 2))) ** (1.0 / kappa0)
    g = np.einsum("ck,ckd->cd", u[cells], mesh.gradients[ball_cells])
    w = fc[ball_cells] ** ((n - 2) / 2) if n > 2 else np.ones(len(ball_cells))
    rhs = r ** (2 - n * (kappa0 - 1) / kappa0) * float(vol @ (w * np.sum(g * g, axis=1)))
    if rhs <= 0:
        return np.inf if lhs > 0 else 0.0
    return lhs / rhs


def sobolev_embedding_check(mesh: SimplicialManifold, f, kappa0: float, r: float, samples: int = 8,
                            centers=None, subsample: int = 16, rng=None, rings: int = 3,
                            return_all: bool = False):
    """Worst ratio ``(int_B u^(2 k0) f^(n/2))^(1/k0) / (r^(2 - n(k0-1)/k0) int_B |grad u|^2 f^((n-2)/2))``.

    Test functions are ``(1 - d/r)^2`` cutoffs times ``1 + 0.5 cos(w.x + c)``
    with random low-frequency ``w``, so they are smooth at the mesh scale and
    transfer across refinements. Requires ``1 < kappa0 < n/(n-1)``.
    """
    n = mesh.dim
    if not 1.0 < kappa0 < n / (n - 1):
        raise ValueError(f"kappa0 must lie in (1, {n / (n - 1)})")
    fc = _as_cell(mesh, f)
    rng = np.random.default_rng(rng)
    V = mesh.n_vertices
    if centers is None:
        centers = np.arange(V) if subsample >= V else np.sort(rng.choice(V, size=subsample, replace=False))
    worst, ratios = 0.0, []
    for c in centers:
        ball = geodesic_ball(mesh, int(c), r, rings=rings)
        d = np.where(np.isfinite(ball.distance), ball.distance, np.inf)
        base = np.clip(1.0 - d / r, 0.0, None) ** 2
        X = mesh.displacement(np.full(V, int(c)), np.arange(V))
        for _ in range(samples):
            w = rng.normal(size=X.shape[1]) * (np.pi / r) * 0.5
            ph = rng.uniform(0, 2 * np.pi)
            u = base * (1.0 + 0.5 * np.cos(X @ w + ph))
            q = _embedding_ratio(mesh, fc, u, ball.cells, r, kappa0)
            assert np.isfinite(q), "RHS vanished for a non-zero test function"
            ratios.append(q)
            worst = max(worst, q)
    return (worst, np.array(ratios)) if return_all else worst


def hat_embedding_ratio(mesh: SimplicialManifold, f, kappa0: float, r: float, vertex: int) -> float:
    """Closed-form ratio for the single hat function at ``vertex``.

    With lumped quadrature ``int hat^(2 k0) f^(n/2) = sum_{c ni v} vol_c f_c^(n/2) / (n+1)``
    and ``int |grad hat|^2 f^((n-2)/2) = sum_{c ni v} vol_c f_c^((n-2)/2) |grad e_v|_c^2``.
    """
    n = mesh.dim
    fc = _as_cell(mesh, f)
    cells, slot = np.nonzero(mesh.cells == vertex)
    vol = mesh.volumes[cells]
    g = mesh.gradients[cells, slot]
    lhs = (float(vol @ fc[cells] ** (n / 2)) / (n + 1)) ** (1.0 / kappa0)
    w = fc[cells] ** ((n - 2) / 2) if n > 2 else np.ones(len(cells))
    rhs = r ** (2 - n * (kappa0 - 1) / kappa0) * float(vol @ (w * np.sum(g * g, axis=1)))
    return lhs / rhs


# --------------------------------------------------------------------------
# spectral discreteness probe

def compactness_probe(mesh: SimplicialManifold, f, count: int, levels: int = 1, project: bool = None) -> dict:
    """First ``count`` eigenvalues of the metric ``f g`` on ``mesh`` and its refinements.

    Densities are ``alpha = f^((n-2)/2)``, ``beta = f^(n/2)``. Per-cell ``f`` is
    inherited by child cells. Returns ``{"eigenvalues": [...], "deltas": [...]}``
    with one array per level and relative changes between levels.
    """
    fc = _as_cell(mesh, f)
    if not np.any(fc > 0):
        raise DegenerateDensityError("f vanishes identically")
    if project is None:
        project = mesh.periods is None and bool(np.allclose(np.linalg.norm(mesh.vertices, axis=1), 1.0, atol=1e-9))
    out, cur, fcur = [], mesh, fc
    for lev in range(levels + 1):
        d = DensityPair.from_conformal_factor(cur, fcur)
        spec = compute_spectrum(cur, d, count - 1, nev=count)
        out.append(np.array(spec.values[:count]))
        if lev < levels:
            cur, parent = refine(cur, project=project)
            fcur = fcur[parent]
    deltas = [np.abs(out[i + 1] - out[i]) / np.maximum(np.abs(out[i + 1]), 1e-300) for i in range(levels)]
    return {"eigenvalues": out, "deltas": deltas}
