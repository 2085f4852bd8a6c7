"""Sphere-valued maps minimizing the regularized n-energy.

``E_tau(Psi) = int (|grad Psi|^2 + tau)^(n/2)`` over P1 maps whose nodal values
lie on the unit sphere of ``R^(p+1)``. With ``B = |grad Psi|^2`` constant per
cell and ``P = (B + tau)^((n-2)/2)``, the gradient of ``E_tau`` with respect to
the (unconstrained) nodal values is ``n K(P) Psi``, and the Euler-Lagrange
residual is its projection onto the tangent spaces of the sphere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra
from scipy.sparse.linalg import splu

from .geometry import GeodesicBall, SimplicialManifold
from .spectrum import stiffness

logger = logging.getLogger(__name__)

__all__ = [
    "SphereMap",
    "TauEnergyReport",
    "tau_energy",
    "el_residual",
    "energy_gradient",
    "solve_tau_harmonic",
    "harmonic_replacement",
    "bochner_check",
    "BochnerReport",
    "ellipticity_bounds",
    "eps_regularity_check",
    "annulus_region",
]

UNIT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SphereMap:
    """Nodal map into ``S^p``: ``values`` has shape (V, p+1) with unit rows.

    ``boundary`` lists vertices whose values solvers must not change.
    ``report`` carries solver diagnostics when the map is a solver output.
    """

    values: np.ndarray
    boundary: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    report: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 2 or v.shape[1] < 2:
            raise ValueError("values must have shape (V, p+1) with p >= 1")
        dev = np.abs(np.linalg.norm(v, axis=1) - 1.0)
        if dev.size and dev.max() > 1e-10:
            raise ValueError(f"nodal values must have unit norm (max deviation {dev.max():.2e})")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        b = np.unique(np.asarray(self.boundary, dtype=np.int64))
        b.setflags(write=False)
        object.__setattr__(self, "boundary", b)

    @classmethod
    def normalized(cls, raw, boundary=()) -> "SphereMap":
        raw = np.asarray(raw, dtype=float)
        return cls(raw / np.linalg.norm(raw, axis=1, keepdims=True), boundary)

    @classmethod
    def constant(cls, V: int, p: int) -> "SphereMap":
        v = np.zeros((V, p + 1))
        v[:, 0] = 1.0
        return cls(v)

    @property
    def p(self) -> int:
        return self.values.shape[1] - 1

    @property
    def n_vertices(self) -> int:
        return self.values.shape[0]


def _region(mesh: SimplicialManifold, region):
    """(cells, free vertices) of ``region``.

    ``region`` is None (whole mesh), a GeodesicBall (its cells and interior),
    a ``(cells, free)`` pair, or a cell index array (all its vertices free).
    """
    if region is None:
        return np.arange(mesh.n_cells), np.arange(mesh.n_vertices)
    if isinstance(region, GeodesicBall):
        return np.asarray(region.cells), np.asarray(region.interior)
    if isinstance(region, tuple):
        return np.asarray(region[0], dtype=np.int64), np.asarray(region[1], dtype=np.int64)
    cells = np.asarray(region, dtype=np.int64)
    return cells, np.unique(mesh.cells[cells])


def annulus_region(mesh: SimplicialManifold, center: int, r_in: float, r_out: float) -> GeodesicBall:
    """Vertices with ``r_in < |x - x_center| < r_out`` as a ball-shaped region.

    Distances are straight-line (minimum image on tori), so the region is an
    exact annulus on flat meshes. ``boundary`` lists the fixed vertices of
    the region's cells; ``distance`` holds the distance of every vertex.
    """
    if not 0 <= r_in < r_out:
        raise ValueError("need 0 <= r_in < r_out")
    V = mesh.n_vertices
    d = np.linalg.norm(mesh.displacement(np.full(V, int(center)), np.arange(V)), axis=1)
    inside = (d > r_in) & (d < r_out)
    interior = np.flatnonzero(inside)
    cells = np.flatnonzero(np.asarray(mesh.incidence[interior].sum(axis=0)).ravel() > 0)
    verts = np.unique(mesh.cells[cells])
    return GeodesicBall(int(center), float(r_out), interior, verts[~inside[verts]], cells, d)


def _cell_B(mesh, values, cells):
    g = np.einsum("ckm,ckd->cmd", values[mesh.cells[cells]], mesh.gradients[cells])
    return np.einsum("cmd,cmd->c", g, g), g


@dataclass(frozen=True, eq=False)
class TauEnergyReport:
    """Energy ``E_tau`` and the per-cell fields ``B``, ``mu``, ``P``, ``u``."""

    tau: float
    energy: float
    B: np.ndarray
    mu: np.ndarray
    P: np.ndarray
    u: np.ndarray
    el_residual: float = np.nan
    cells: Optional[np.ndarray] = field(default=None, repr=False)


def tau_energy(mesh: SimplicialManifold, smap: SphereMap, tau: float, region=None,
               with_residual: bool = False) -> TauEnergyReport:
    """``E_tau`` integrated exactly over the cells of ``region`` (default: all)."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    n = mesh.dim
    cells, _ = _region(mesh, region)
    B, _ = _cell_B(mesh, smap.values, cells)
    mu = np.sqrt(B + tau)
    P = mu ** (n - 2)
    u = mu ** n
    E = float(mesh.volumes[cells] @ u)
    res = el_residual(mesh, smap, tau, region)[1] if with_residual else np.nan
    return TauEnergyReport(float(tau), E, B, mu, P, u, res, cells)


def _weighted_stiffness(mesh, cells, weight):
    w = np.zeros(mesh.n_cells)
    w[cells] = weight
    return stiffness(mesh, w)


def energy_gradient(mesh: SimplicialManifold, values, tau: float, region=None) -> np.ndarray:
    """Gradient ``n K(P) Psi`` of ``E_tau`` in the unconstrained nodal values."""
    n = mesh.dim
    cells, _ = _region(mesh, region)
    values = np.asarray(values, dtype=float)
    B, _ = _cell_B(mesh, values, cells)
    P = (B + tau) ** ((n - 2) / 2)
    K = _weighted_stiffness(mesh, cells, P)
    return n * (K @ values)


def _energy_hessian(mesh, values, tau, cells, free):
    """Euclidean Hessian of ``E_tau`` in the free nodal values (CSC, size free*(p+1)).

    Per cell: ``n vol P [ (g_k . g_l) I + (n-2)/(B+tau) v_k v_l^T ]`` with
    ``v_k = grad Psi g_k``; positive definite because ``E_tau`` is convex in
    the unconstrained values.
    """
    n = mesh.dim
    m = values.shape[1]
    V = mesh.n_vertices
    B, g = _cell_B(mesh, values, cells)  # g (C, m, d)
    P = (B + tau) ** ((n - 2) / 2)
    G = mesh.gradients[cells]  # (C, k, d)
    vol = mesh.volumes[cells]
    kk = G.shape[1]
    gg = np.einsum("ckd,cld->ckl", G, G)
    v = np.einsum("cmd,ckd->ckm", g, G)  # (C, k, m)
    blk = gg[:, :, :, None, None] * np.eye(m)[None, None, None]
    blk = blk + ((n - 2) / (B + tau))[:, None, None, None, None] * np.einsum("ckm,clj->cklmj", v, v)
    blk *= (n * vol * P)[:, None, None, None, None]
    nodes = mesh.cells[cells]
    rows = (nodes[:, :, None, None, None] * m + np.arange(m)[None, None, None, :, None])
    cols = (nodes[:, None, :, None, None] * m + np.arange(m)[None, None, None, None, :])
    rows = np.broadcast_to(rows, blk.shape).ravel()
    cols = np.broadcast_to(cols, blk.shape).ravel()
    H = sp.coo_matrix((blk.ravel(), (rows, cols)), shape=(V * m, V * m)).tocsr()
    idx = (free[:, None] * m + np.arange(m)).ravel()
    Hf = H[idx][:, idx]
    eps = 1e-10 * max(abs(Hf.diagonal()).max(), 1e-300)
    return (Hf + eps * sp.identity(idx.size)).tocsc()


def _tangent(values, g):
    return g - np.sum(g * values, axis=1, keepdims=True) * values


def el_residual(mesh: SimplicialManifold, smap: SphereMap, tau: float, region=None):
    """Tangent residual of ``-div(P grad Psi) = P B Psi`` at the free nodes.

    Returns ``(field, norm)``; ``field`` is (V, p+1) with zeros at fixed
    nodes, ``norm = sqrt(sum |r_v|^2 / m_v)`` with ``m_v`` the lumped volume.
    Nodes in ``smap.boundary`` and, for a ball, outside its interior, are fixed.
    """
    n = mesh.dim
    cells, free = _region(mesh, region)
    free = np.setdiff1d(free, smap.boundary)
    g = energy_gradient(mesh, smap.values, tau, region) / n
    r = np.zeros_like(g)
    r[free] = _tangent(smap.values[free], g[free])
    w = np.zeros(mesh.n_cells)
    w[cells] = 1.0
    mv = mesh.lumped_mass(w)
    norm = float(np.sqrt(np.sum(np.sum(r[free] ** 2, axis=1) / np.maximum(mv[free], 1e-300))))
    return r, norm


def solve_tau_harmonic(mesh: SimplicialManifold, init: SphereMap, tau: float, region=None, *,
                       tol: float = 1e-8, max_iter: int = 2000, precondition: bool = True) -> SphereMap:
    """Local minimizer of ``E_tau`` with the fixed nodes of ``init`` held.

    Projected preconditioned gradient descent: the tangent gradient is
    preconditioned by the Euclidean Hessian of ``E_tau`` on the free nodes
    (a projected Newton step), stepped with Armijo backtracking (only strict
    energy decreases are accepted), then renormalized nodewise. Without
    preconditioning the step length is Barzilai-Borwein. Stops when the EL
    residual norm drops below ``tol``.

    The output's ``report`` holds ``converged``, ``iterations``,
    ``energies`` (one per accepted iterate), ``residual``, ``stalled`` and
    ``precision_floor``. The last marks a stop because the predicted energy
    decrease fell below the floating-point resolution of ``E_tau`` (the line
    search fails, or the residual stagnates over three iterations); such a
    state counts as converged.
    """
    if not tau > 0:
        raise ValueError("tau must be > 0")
    n = mesh.dim
    cells, free = _region(mesh, region)
    free = np.setdiff1d(free, init.boundary)
    X = np.array(init.values, dtype=float)
    vol = mesh.volumes[cells]
    w_all = np.zeros(mesh.n_cells)
    w_all[cells] = 1.0
    mv = mesh.lumped_mass(w_all)

    def energy(Y):
        B, _ = _cell_B(mesh, Y, cells)
        return float(vol @ (B + tau) ** (n / 2))

    def delta(Y, X):
        # E(Y) - E(X) cellwise from the gradient difference, exact to rounding of the change
        _, gx = _cell_B(mesh, X, cells)
        _, gd = _cell_B(mesh, Y - X, cells)
        Bx = np.einsum("cmd,cmd->c", gx, gx) + tau
        dB = np.einsum("cmd,cmd->c", gd, 2 * gx + gd)
        return float(vol @ (Bx ** (n / 2) * np.expm1((n / 2) * np.log1p(dB / Bx))))

    def grad(Y):
        B, _ = _cell_B(mesh, Y, cells)
        P = (B + tau) ** ((n - 2) / 2)
        K = _weighted_stiffness(mesh, cells, P)
        return n * (K @ Y), K

    E = energy(X)
    energies = [E]
    s_prev = y_prev = None
    step = 1.0
    converged, stalled, floor, it, res = False, False, False, 0, np.inf
    if free.size == 0:
        converged, res = True, 0.0
    T_prev = None
    res_hist = []
    for it in range(1, max_iter + 1):
        if free.size == 0:
            break
        G, K = grad(X)
        T = _tangent(X[free], G[free])
        res = float(np.sqrt(np.sum(np.sum(T ** 2, axis=1) / np.maximum(mv[free], 1e-300)))) / n
        if res < tol:
            converged = True
            break
        D = T
        if precondition:
            H = _energy_hessian(mesh, X, tau, cells, free)
            try:
                D = _tangent(X[free], splu(H).solve(T.ravel()).reshape(T.shape))
            except RuntimeError:
                D = T
        slope = float(np.sum(T * D))
        if not slope > 0:
            D, slope = T, float(np.sum(T * T))
        res_hist.append(res)
        if slope <= 1e-10 * max(abs(E), 1e-300) and len(res_hist) > 3 and res > 0.9 * res_hist[-4]:
            # residual stagnates where the predicted decrease is below rounding of E
            converged = floor = True
            break
        if not precondition and s_prev is not None:
            sy = float(np.sum(s_prev * (T - T_prev)))
            if sy > 0:
                step = min(max(float(np.sum(s_prev * s_prev)) / sy, 1e-12), 1e6)
        h, accepted, first = step, False, True
        fallback = None
        for _ in range(60):
            Y = X.copy()
            Y[free] = X[free] - h * D
            Y[free] /= np.linalg.norm(Y[free], axis=1, keepdims=True)
            dE = delta(Y, X)
            if dE < -1e-4 * h * slope:
                accepted = True
                break
            if fallback is None and dE < 0 and h < 1e-6 * step:
                fallback = (Y, dE, h)
            h *= 0.5
            first = False
        if not accepted:
            if slope <= 1e-10 * max(abs(E), 1e-300):
                # no resolvable decrease left: stationary to working precision
                converged = floor = True
                break
            if fallback is None:
                stalled = True
                break
            Y, dE, h = fallback
        if precondition:
            step = min(2.0 * h, 1.0) if first else h
        s_prev, T_prev = (Y - X)[free], T
        X, E = Y, E + dE
        energies.append(E)
        logger.debug('it %d res %.3e h %.3e E %.12g', it, res, h, E)
    report = dict(converged=bool(converged), iterations=it, energies=energies, residual=float(res),
                  stalled=bool(stalled), precision_floor=bool(floor), tau=float(tau))
    if not converged:
        logger.info("tau-harmonic solve stopped at residual %.3g (tau=%.3g)", res, tau)
    bnd = np.setdiff1d(np.arange(mesh.n_vertices), free)
    out = SphereMap.__new__(SphereMap)
    X[bnd] = init.values[bnd]
    object.__setattr__(out, "values", X)
    X.setflags(write=False)
    object.__setattr__(out, "boundary", init.boundary)
    object.__setattr__(out, "report", report)
    return out


def harmonic_replacement(mesh: SimplicialManifold, smap: SphereMap, ball: GeodesicBall,
                         tau0: Optional[float] = None, J: int = 20, *, tol: float = 1e-8,
                         max_iter: int = 2000) -> SphereMap:
    """Replace ``smap`` inside ``ball`` by a minimizer of ``E_tau`` with the same boundary values.

    Runs ``tau_j = tau0 2^-j``, j = 0..J, each stage warm-started from the
    previous one; ``tau0`` defaults to the mean of ``B`` over the ball.
    Values outside ``ball.interior`` are untouched. The report lists one
    stage report per ``tau``.
    """
    if ball.interior.size == 0:
        raise ValueError("ball interior is empty")
    if tau0 is None:
        B, _ = _cell_B(mesh, smap.values, ball.cells)
        tau0 = float(np.mean(B))
        if tau0 <= 0:
            tau0 = 1.0
    cur = smap
    stages = []
    for j in range(J + 1):
        tau = tau0 * 2.0 ** (-j)
        cur = solve_tau_harmonic(mesh, cur, tau, ball, tol=tol, max_iter=max_iter)
        stages.append(cur.report)
    report = dict(stages=stages, tau0=tau0, J=J, converged=all(s["converged"] for s in stages),
                  tau_final=tau0 * 2.0 ** (-J))
    return _with_report(cur, report)


def _with_report(smap, report):
    out = SphereMap.__new__(SphereMap)
    object.__setattr__(out, "values", smap.values)
    object.__setattr__(out, "boundary", smap.boundary)
    object.__setattr__(out, "report", report)
    return out


# --------------------------------------------------------------------------
# a-priori estimates

def ellipticity_bounds(mesh: SimplicialManifold, smap: SphereMap, tau: float, X=None, rng=None):
    """Per-cell ``a^tau = (I + (n-2) grad Psi^T grad Psi / (B + tau)) / n`` and its quadratic forms.

    Returns ``(a, q, lower, upper)`` where ``q = X . a X`` for test vectors
    ``X`` (one per cell, random if not given), ``lower = |X|^2 / n`` and
    ``upper = (n-1) |X|^2 / n``.
    """
    n = mesh.dim
    cells = np.arange(mesh.n_cells)
    B, g = _cell_B(mesh, smap.values, cells)
    d = mesh.gradients.shape[2]
    gg = np.einsum("cmi,cmj->cij", g, g)
    a = (np.eye(d)[None] + (n - 2) * gg / (B + tau)[:, None, None]) / n
    if X is None:
        X = np.random.default_rng(rng).normal(size=(mesh.n_cells, d))
        if mesh.periods is None and d > n:
            # restrict to cell tangent planes on embedded meshes
            G = mesh.gradients
            X = np.einsum("ckd,ck->cd", G, np.random.default_rng(rng).normal(size=G.shape[:2]))
    q = np.einsum("ci,cij,cj->c", X, a, X)
    x2 = np.sum(X * X, axis=1)
    return a, q, x2 / n, (n - 1) * x2 / n


def _recover(mesh, cell_field):
    """Lumped L2 projection of a cell field onto nodal P1 values."""
    vol = mesh.volumes
    I = mesh.incidence
    num = I @ (vol[:, None] * cell_field.reshape(mesh.n_cells, -1))
    den = np.asarray(I @ vol).ravel()
    return (num / den[:, None]).reshape((mesh.n_vertices,) + cell_field.shape[1:])


@dataclass(frozen=True, eq=False)
class BochnerReport:
    """Weak-form slack per tested node (scaled by the node's lumped volume).

    ``min_slack`` is the most negative scaled slack; ``a_ok`` records that the
    ellipticity bounds of ``a^tau`` held on every cell.
    """

    slack: np.ndarray
    nodes: np.ndarray
    min_slack: float
    a_ok: bool
    lhs: np.ndarray = field(repr=False, default=None)


def _inner_nodes(mesh, fixed, margin=None):
    """Vertices farther than ``margin`` (path length) from every fixed vertex.

    The default margin is a third of the largest such distance, which keeps
    the recovered second derivatives clear of the seam between the solved
    region and the frozen data.
    """
    fixed = np.asarray(fixed, dtype=np.int64)
    if fixed.size == 0:
        return np.arange(mesh.n_vertices)
    dist = dijkstra(mesh.distance_graph(3), directed=False, indices=fixed, min_only=True)
    if margin is None:
        margin = dist.max() / 3.0
    return np.flatnonzero(dist > margin)


def bochner_check(mesh: SimplicialManifold, smap: SphereMap, tau: float, nodes=None, kappa: Optional[float] = None,
                  rng=None, margin: Optional[float] = None) -> BochnerReport:
    """Weak form of ``mu^(n-2) B (kappa + B) >= -div(a^tau grad mu^n) + |Hess Psi|^2 mu^(n-2) + (n-2)/4 mu^(n-4) |grad B|^2``.

    Each side is integrated against the hat function of every tested node.
    ``B`` and ``mu^n`` enter through their recovered (lumped L2 projected)
    nodal interpolants; ``Hess Psi`` is the cell gradient of the recovered
    nodal gradient of ``Psi``. The slack ``lhs - rhs`` is divided by the
    node's lumped volume. ``nodes`` defaults to vertices farther than
    ``margin`` from the fixed vertices ``smap.boundary`` (see ``_inner_nodes``).
    """
    if not tau > 0:
        raise ValueError("tau must be > 0")
    n = mesh.dim
    kappa = mesh.kappa if kappa is None else kappa
    cells = np.arange(mesh.n_cells)
    vol = mesh.volumes
    B, g = _cell_B(mesh, smap.values, cells)  # g (C, m, d)
    Bn = _recover(mesh, B)
    mun_nodes = (Bn + tau) ** (n / 2)
    mu = np.sqrt(B + tau)
    gv = _recover(mesh, g)  # (V, m, d)
    hess = np.einsum("ckmd,cke->cmde", gv[mesh.cells], mesh.gradients)
    H2 = np.einsum("cmde,cmde->c", hess, hess)
    gB = mesh.cell_gradient(Bn)
    gmun = mesh.cell_gradient(mun_nodes)
    a, q, lo, hi = ellipticity_bounds(mesh, smap, tau, rng=rng)
    a_ok = bool(np.all(q >= lo * (1 - 1e-12) - 1e-300) and np.all(q <= hi * (1 + 1e-12) + 1e-300))
    cell_src = mu ** (n - 2) * B * (kappa + B) - H2 * mu ** (n - 2) \
        - (n - 2) / 4 * mu ** (n - 4) * np.sum(gB * gB, axis=1)
    lumped = mesh.lumped_mass(cell_src)
    flux = np.einsum("cij,cj->ci", a, gmun)  # (C, d)
    div_w = np.einsum("ci,cki->ck", flux, mesh.gradients) * vol[:, None]
    weak_div = np.zeros(mesh.n_vertices)
    np.add.at(weak_div, mesh.cells, div_w)
    slack_all = lumped - weak_div
    mv = mesh.lumped_mass()
    if nodes is None:
        nodes = _inner_nodes(mesh, smap.boundary, margin)
    nodes = np.asarray(nodes)
    sl = slack_all[nodes] / mv[nodes]
    return BochnerReport(sl, nodes, float(sl.min()) if sl.size else 0.0, a_ok, lumped[nodes] / mv[nodes])


def eps_regularity_check(mesh: SimplicialManifold, smap: SphereMap, balls: Sequence[GeodesicBall],
                         eps0: float = 0.1) -> dict:
    """Empirical constant ``r^n max_{B_(r/2)} |grad Psi|^n / int_(B_r) |grad Psi|^n``.

    The energy integral runs over the ball's cells, the maximum over cells
    touching vertices at distance below ``r/2``. Balls with energy above
    ``eps0`` are skipped with a note; zero energy gives ratio 0.
    """
    n = mesh.dim
    B, _ = _cell_B(mesh, smap.values, np.arange(mesh.n_cells))
    dens = B ** (n / 2)
    ratios, notes = [], []
    for ball in balls:
        E = float(mesh.volumes[ball.cells] @ dens[ball.cells])
        if E > eps0:
            notes.append(f"ball at {ball.center} r={ball.radius:g} skipped: energy {E:.4g} > eps0")
            continue
        half = np.flatnonzero(ball.distance < ball.radius / 2)
        hc = np.flatnonzero(np.asarray(mesh.incidence[half].sum(axis=0)).ravel() > 0)
        top = float(dens[hc].max()) if hc.size else 0.0
        ratios.append(0.0 if E == 0 else ball.radius ** n * top / E)
    return dict(max_ratio=max(ratios) if ratios else 0.0, ratios=ratios, notes=notes)
