"""Ascent on the two-density normalized eigenvalue.

The objective is ``lambar_k(alpha, beta)`` (see
:func:`confspec.spectrum.normalized_eigenvalue`). Its generalized gradient at
a multiple eigenvalue is the convex hull of paired fields built from unit
combinations of the eigenvectors in the cluster at ``k``. Every field in the
hull is an affine function of a trace-one PSD matrix ``W`` on the cluster.

Two directions are available:

* ``"pseudo"``: the maximizer of ``min_W <tau, psi(W)>`` over normalized
  non-negative ``tau``, found by conditional gradient. Its value is the
  pseudo-norm used in the stopping rule.
* ``"fisher"`` (default step direction): the minimum-norm element of the hull
  in the Fisher-Rao metric ``int alpha psi_1^2 + int beta psi_2^2``, mapped to
  the multiplicative update ``(alpha psi_1, beta psi_2)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .exceptions import DegenerateDensityError
from .geometry import SimplicialManifold
from .spectrum import DensityPair, Spectrum, compute_spectrum, normalized_eigenvalue

logger = logging.getLogger(__name__)

__all__ = [
    "SubgradientFamily",
    "SubgradientDirection",
    "AscentState",
    "LineSearch",
    "StopRule",
    "subdifferential_elements",
    "direction_find",
    "fisher_direction",
    "ascent_step",
    "project_constraints",
    "maximize",
    "nu_mode",
    "nu_value",
    "cluster_indices",
    "one_ring_smooth",
]

M_MAX = 64
CLUSTER_TOL = 1e-2


# --------------------------------------------------------------------------
# normalization

def _alpha_power(n: int, alpha_norm: str) -> float:
    if n == 2:
        return np.inf if alpha_norm == "functional" else 1.0
    return n / (n - 2) if alpha_norm == "functional" else n / 2


def project_constraints(mesh: SimplicialManifold, densities: DensityPair) -> DensityPair:
    """Rescale to ``int beta = 1`` and unit alpha norm; ``lambar`` is unchanged.

    The alpha norm is ``(int alpha^p)^(1/p)`` with p = n/(n-2) (``"functional"``)
    or p = n/2 (``"half"``); for n = 2 the functional norm is ``max(alpha)``.
    """
    vol = mesh.volumes
    a, b = densities.alpha, densities.beta
    B = float(vol @ b)
    if not B > 0:
        raise DegenerateDensityError("int beta = 0")
    p = _alpha_power(mesh.dim, densities.alpha_norm)
    D = float(a.max()) if np.isinf(p) else float(vol @ a ** p) ** (1.0 / p)
    if not D > 0:
        raise DegenerateDensityError("alpha vanishes identically")
    return replace(densities, alpha=a / D, beta=b / B, alpha_normalized=True, beta_normalized=True)


# --------------------------------------------------------------------------
# generalized gradient

@dataclass(frozen=True, eq=False)
class SubgradientFamily:
    """Paired fields ``(psi_1, psi_2)(W)`` for trace-one PSD ``W`` on the cluster.

    ``psi_1 = s1 <W, G1_c> + h1_c`` and ``psi_2 = h2 - s2 <W, G2_c>`` per cell,
    with ``G1_c = grad e_i . grad e_j`` and ``G2_c`` the vertex average of
    ``e_i e_j`` on cell c. For unit ``c`` and ``W = c c^T`` these are the
    derivatives of ``lambar`` along a unit alpha (resp. beta) mass on cell c.
    """

    indices: tuple
    G1: np.ndarray
    G2: np.ndarray
    s1: float
    h1: np.ndarray
    s2: float
    h2: float
    volumes: np.ndarray
    lambda_bar: float

    @property
    def m(self) -> int:
        return len(self.indices)

    def fields(self, W):
        """Cell fields for ``W`` (m x m) or a unit vector ``c`` (m,)."""
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = np.outer(W, W)
        p1 = self.s1 * np.einsum("cij,ij->c", self.G1, W) + self.h1
        p2 = self.h2 - self.s2 * np.einsum("cij,ij->c", self.G2, W)
        return p1, p2

    def matrix(self, a, b) -> np.ndarray:
        """``F(tau)`` with ``<tau, psi(c)> = c^T F c`` for mass coordinates ``a, b``."""
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        F = self.s1 * np.einsum("c,cij->ij", a, self.G1) - self.s2 * np.einsum("c,cij->ij", b, self.G2)
        F += (a @ self.h1 + self.h2 * b.sum()) * np.eye(self.m)
        return 0.5 * (F + F.T)

    def pairing(self, a, b, c) -> float:
        p1, p2 = self.fields(c)
        return float(a @ p1 + b @ p2)


def cluster_indices(spectrum: Spectrum, k: int, tol: Optional[float]) -> tuple:
    """Indices ``i >= k`` in the eigenvalue cluster of ``k`` (relative width ``tol``).

    Restricting to ``i >= k`` keeps the smallest eigenvalue of the derivative
    matrix a lower bound for the derivative of ``lam_k`` (Cauchy interlacing).
    """
    lam = spectrum.values
    if k >= lam.size:
        raise IndexError(f"k={k} exceeds computed spectrum of size {lam.size}")
    if tol is None:
        grp = [i for i in spectrum.group_of(k) if i >= k]
    else:
        grp = [i for i in range(k, lam.size) if lam[i] - lam[k] <= tol * abs(lam[k])]
    if len(grp) > M_MAX:
        raise ValueError(f"cluster of size {len(grp)} exceeds cap {M_MAX}")
    return tuple(grp)


def subdifferential_elements(mesh: SimplicialManifold, spectrum: Spectrum, densities: DensityPair,
                             k: int, cluster_tol: Optional[float] = None) -> SubgradientFamily:
    """Build the paired-field family at index ``k``.

    For unit ``c`` and ``phi = sum c_i e_i`` (beta-normalized)::

        psi_1 = lambar (|grad phi|^2 / lam - alpha^(q-1) / int alpha^q)
        psi_2 = lambar (1 / int beta - phi^2)

    At normalized densities this is ``|grad phi|^2 - lambar alpha^(2/(n-2))``
    and ``lambar (1 - phi^2)``. For n = 2 the alpha term is omitted (alpha is
    held constant by the ascent).
    """
    idx = cluster_indices(spectrum, k, cluster_tol)
    n = mesh.dim
    vol = mesh.volumes
    lam = float(spectrum.values[k])
    lb = normalized_eigenvalue(mesh, densities, spectrum, k)
    E = spectrum.vectors[:, list(idx)]
    grads = mesh.cell_gradient(E)  # (C, m, d)
    G1 = np.einsum("cid,cjd->cij", grads, grads)
    loc = E[mesh.cells]  # (C, n+1, m)
    G2 = np.einsum("cvi,cvj->cij", loc, loc) / (n + 1)
    a = densities.alpha
    if n == 2:
        h1 = np.zeros(mesh.n_cells)
    else:
        q = n / (n - 2)
        h1 = -lb * a ** (q - 1) / float(vol @ a ** q)
    B = float(vol @ densities.beta)
    return SubgradientFamily(idx, G1, G2, lb / lam, h1, lb, lb / B, vol, lb)


# --------------------------------------------------------------------------
# pseudo-norm direction (conditional gradient)

@dataclass(frozen=True, eq=False)
class SubgradientDirection:
    """Normalized non-negative density direction.

    ``value`` is the guaranteed increase rate ``min_c <tau, psi(c)>``;
    ``upper_bound`` the duality bound on the pseudo-norm; ``witness`` the unit
    cluster vector attaining the inner minimum.
    """

    alpha_dot: np.ndarray
    beta_dot: np.ndarray
    value: float
    witness: np.ndarray
    upper_bound: float = np.inf
    converged: bool = True
    iterations: int = 0
    kind: str = "pseudo"


def _lam_min(F):
    w, V = np.linalg.eigh(F)
    return float(w[0]), V[:, 0]


def _golden_max(f, lo=0.0, hi=1.0, tol=1e-10, maxit=80):
    g = (math.sqrt(5) - 1) / 2
    x1, x2 = hi - g * (hi - lo), lo + g * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(maxit):
        if hi - lo < tol:
            break
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + g * (hi - lo)
            f2 = f(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - g * (hi - lo)
            f1 = f(x1)
    cands = [(f(lo), lo), (f1, x1), (f2, x2), (f(hi), hi)]
    return max(cands)[::-1]


def direction_find(mesh: SimplicialManifold, spectrum: Spectrum, densities: DensityPair, k: int,
                   budget: int = 200, *, family: Optional[SubgradientFamily] = None,
                   freeze_alpha: bool = False, cluster_tol: Optional[float] = None,
                   rel_tol: float = 1e-3) -> SubgradientDirection:
    """Maximize ``lam_min(F(tau))`` over the normalized non-negative cone.

    ``tau`` lives in mass coordinates ``a = vol alpha_dot``, ``b = vol beta_dot``
    with ``sum a + sum b = 1``. By minimax duality the optimum equals
    ``min_W max_cells psi(W)`` over trace-one PSD ``W``. The max over cells is
    smoothed by a log-sum-exp of temperature ``mu``; its softmax weights are a
    feasible ``tau`` (a conditional-gradient average of simplex vertices) and
    the smoothed problem in ``W`` is solved by accelerated projected gradient
    while ``mu`` is halved. ``budget`` caps the gradient evaluations.

    The dilation direction (value zero up to the cluster width) seeds the
    best-so-far ``tau``. The returned ``upper_bound`` is the dual value
    ``max_cells psi(W)`` at the best ``W``; ``converged`` is False when the
    relative gap ``(upper - value) / lambar`` still exceeds ``rel_tol``.
    """
    fam = family or subdifferential_elements(mesh, spectrum, densities, k, cluster_tol)
    vol = mesh.volumes
    C = mesh.n_cells
    frozen = freeze_alpha or mesh.dim == 2
    m = fam.m
    scale = max(abs(fam.lambda_bar), 1e-300)

    if frozen:
        a0 = np.zeros(C)
    else:
        a0 = vol * densities.alpha
    b0 = vol * densities.beta
    s0 = a0.sum() + b0.sum()
    a_best, b_best = a0 / s0, b0 / s0
    best, w_best = _lam_min(fam.matrix(a_best, b_best))

    def fields_of(W):
        p1, p2 = fam.fields(W)
        return (np.full(C, -np.inf) if frozen else p1), p2

    if m == 1:
        p1, p2 = fields_of(np.ones((1, 1)))
        i1, i2 = int(np.argmax(p1)), int(np.argmax(p2))
        a, b = np.zeros(C), np.zeros(C)
        if p1[i1] >= p2[i2]:
            a[i1] = 1.0
        else:
            b[i2] = 1.0
        val = float(max(p1[i1], p2[i2]))
        if val < best:
            a, b, val = a_best, b_best, best
        return SubgradientDirection(a / vol, b / vol, val, np.ones(1), val, True, 1, "pseudo")

    def smoothed(W, mu):
        p1, p2 = fields_of(W)
        z = np.concatenate([p1, p2])
        top = z.max()
        e = np.exp((z - top) / mu)
        S = e.sum()
        pa, pb = e[:C] / S, e[C:] / S
        return top + mu * np.log(S), pa, pb, top

    W = np.eye(m) / m
    p1, p2 = fields_of(W)
    upper = float(max(p1.max(), p2.max()))
    W_up = W
    spread = max(upper - best, 1e-12 * scale)
    mu = 0.25 * spread / np.log(2 * C)
    L = 1.0
    Y, W_prev, t = W.copy(), W.copy(), 1.0
    evals = 0
    while evals < budget:
        fy, pa, pb, _ = smoothed(Y, mu)
        G = fam.matrix(pa, pb)
        evals += 1
        if pa.sum() + pb.sum() > 0:
            val, wv = _lam_min(fam.matrix(pa, pb))
            if val > best:
                best, w_best, a_best, b_best = val, wv, pa, pb
        while True:
            Wn = _proj_spectraplex(Y - G / L)
            fn, _, _, top = smoothed(Wn, mu)
            D = Wn - Y
            if fn <= fy + np.sum(G * D) + 0.5 * L * np.sum(D * D) + 1e-14 * scale or L > 1e16:
                break
            L *= 2.0
        if top < upper:
            upper, W_up = float(top), Wn
        tn = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        Y = Wn + ((t - 1) / tn) * (Wn - W_prev)
        W_prev, t = Wn, tn
        L *= 0.7
        gap = upper - best
        if gap <= rel_tol * scale * 0.1:
            break
        if mu * np.log(2 * C) > 0.25 * gap:
            mu *= 0.5
            t = 1.0
            Y = W_prev.copy()
    converged = (upper - best) <= rel_tol * scale
    return SubgradientDirection(a_best / vol, b_best / vol, float(best), w_best, float(max(upper, best)),
                                bool(converged), evals, "pseudo")


# --------------------------------------------------------------------------
# Fisher-Rao minimum-norm direction

def _proj_spectraplex(W):
    w, V = np.linalg.eigh(0.5 * (W + W.T))
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - 1.0
    r = np.nonzero(u - css / np.arange(1, u.size + 1) > 0)[0][-1]
    theta = css[r] / (r + 1.0)
    w = np.maximum(w - theta, 0.0)
    return (V * w) @ V.T


def fisher_direction(mesh: SimplicialManifold, family: SubgradientFamily, densities: DensityPair, *,
                     freeze_alpha: bool = False, iters: int = 400, smooth: bool = False) -> SubgradientDirection:
    """Minimum Fisher-Rao norm element of the hull and its ascent direction.

    Minimizes ``int alpha (psi_1 - <psi_1>_alpha)^2 + int beta (psi_2 - <psi_2>_beta)^2``
    over trace-one PSD ``W`` (means removed because independent dilations of
    alpha and beta leave the objective unchanged). The direction is
    ``(alpha (psi_1 - min psi_1), beta (psi_2 - min psi_2))`` normalized to unit
    total mass, hence non-negative.
    """
    vol = mesh.volumes
    m = family.m
    use_a = not (freeze_alpha or mesh.dim == 2)
    wa = vol * densities.alpha
    wb = vol * densities.beta
    blocks = []
    if use_a:
        X1 = family.s1 * family.G1.reshape(len(vol), -1)
        c1 = family.h1.copy()
        blocks.append((X1, c1, wa))
    X2 = -family.s2 * family.G2.reshape(len(vol), -1)
    c2 = np.full(len(vol), family.h2)
    blocks.append((X2, c2, wb))
    Q = np.zeros((m * m, m * m))
    r = np.zeros(m * m)
    for X, c, wt in blocks:
        sw = wt.sum()
        Xc = X - (wt @ X) / sw
        cc = c - (wt @ c) / sw
        Q += Xc.T @ (wt[:, None] * Xc)
        r += Xc.T @ (wt * cc)
    L = max(np.linalg.eigvalsh(Q).max(), 1e-300)
    W = np.eye(m) / m
    for _ in range(iters):
        g = (Q @ W.ravel() + r).reshape(m, m)
        Wn = _proj_spectraplex(W - g / L)
        if np.abs(Wn - W).max() < 1e-13:
            W = Wn
            break
        W = Wn
    p1, p2 = family.fields(W)
    ad = densities.alpha * (p1 - p1.min()) if use_a else np.zeros_like(p1)
    bd = densities.beta * (p2 - p2.min())
    if smooth:
        ad, bd = one_ring_smooth(mesh, ad), one_ring_smooth(mesh, bd)
    tot = float(vol @ ad + vol @ bd)
    if tot <= 0:
        return SubgradientDirection(np.zeros_like(ad), np.zeros_like(bd), 0.0, _top_vec(W), 0.0, True, 0, "fisher")
    ad, bd = ad / tot, bd / tot
    a, b = vol * ad, vol * bd
    val, c = _lam_min(family.matrix(a, b))
    return SubgradientDirection(ad, bd, val, c, np.inf, True, 0, "fisher")


def _top_vec(W):
    w, V = np.linalg.eigh(W)
    return V[:, -1]


def one_ring_smooth(mesh: SimplicialManifold, cell_field) -> np.ndarray:
    """Average a cell field over cells sharing a vertex (volume weighted)."""
    vol = mesh.volumes
    I = mesh.incidence
    node = (I @ (vol * cell_field)) / np.maximum(I @ vol, 1e-300)
    return np.asarray(node)[mesh.cells].mean(axis=1)


# --------------------------------------------------------------------------
# ascent loop

@dataclass(frozen=True)
class LineSearch:
    """Backtracking schedule ``h0, h0/2, ...``; a step must raise ``lambar``
    by more than ``accept_rtol`` relative (the eigensolver's round-off level)."""

    h0: float = 0.5
    max_halvings: int = 30
    accept_rtol: float = 1e-12


@dataclass(frozen=True)
class StopRule:
    """``delta_stop`` absolute; ``None`` means ``rel_delta * lambar``."""

    delta_stop: Optional[float] = None
    rel_delta: float = 1e-4
    max_iters: int = 200


@dataclass(frozen=True, eq=False)
class AscentState:
    """One point of the ascent together with its history.

    ``history`` holds one dict per iteration with keys ``iter``,
    ``lambda_bar``, ``pseudo_norm``, ``step``, ``multiplicity`` and
    ``crossing`` (the cluster indices changed since the previous iterate).
    """

    densities: DensityPair
    spectrum: Spectrum
    lambda_bar: float
    k: int
    iteration: int = 0
    history: tuple = ()
    stalled: bool = False
    reason: str = ""
    pseudo_norm: float = np.nan
    step: float = 0.0

    @property
    def lambda_bars(self) -> np.ndarray:
        return np.array([h["lambda_bar"] for h in self.history])


def _evaluate(mesh, densities, k, eig_tol, mult_tol):
    spec = compute_spectrum(mesh, densities, k, tol=eig_tol, mult_tol=mult_tol)
    return spec, normalized_eigenvalue(mesh, densities, spec, k)


def ascent_step(mesh: SimplicialManifold, state: AscentState, direction: SubgradientDirection,
                ls: LineSearch = LineSearch(), *, eig_tol: float = 1e-10) -> AscentState:
    """Backtracking step ``project(d + h tau)`` for ``h = h0, h0/2, ...``.

    The first ``h`` raising ``lambar`` above ``(1 + ls.accept_rtol)`` times
    its current value is accepted. If none does, the input state is returned
    with ``stalled=True``.
    """
    d = state.densities
    mult_tol = state.spectrum.mult_tol
    h = ls.h0
    for _ in range(ls.max_halvings + 1):
        trial = replace(d, alpha=d.alpha + h * direction.alpha_dot, beta=d.beta + h * direction.beta_dot,
                        conformal=False)
        trial = project_constraints(mesh, trial)
        spec, lb = _evaluate(mesh, trial, state.k, eig_tol, mult_tol)
        if lb > state.lambda_bar * (1.0 + ls.accept_rtol):
            return replace(state, densities=trial, spectrum=spec, lambda_bar=lb,
                           iteration=state.iteration + 1, stalled=False, step=h)
        h *= 0.5
    return replace(state, stalled=True, step=0.0)


def _lift_alpha(mesh, densities):
    """For n = 2: raise alpha to its maximum everywhere (never lowers lambar)."""
    a = np.full_like(densities.alpha, float(densities.alpha.max()))
    return replace(densities, alpha=a)


def maximize(mesh: SimplicialManifold, k: int, init: DensityPair, stop: StopRule = StopRule(), *,
             ls: LineSearch = LineSearch(), step_direction: str = "fisher", budget: int = 200,
             cluster_tol: float = CLUSTER_TOL, mult_tol: float = 1e-6, eig_tol: float = 1e-10,
             cluster_min: float = 1e-4, freeze_alpha: bool = False, smooth: bool = False,
             callback: Optional[Callable[[AscentState], None]] = None) -> AscentState:
    """Ascend ``lambar_k`` from ``init`` until a discrete Palais-Smale point.

    Stops when the pseudo-norm is below ``delta_stop``, when the line search
    stalls, or after ``max_iters`` steps. The returned state carries the
    whole trajectory in ``history``.

    Eigenvalues within relative distance ``cluster_tol`` of ``lam_k`` are
    treated as one cluster. When the ascent converges or stalls at a given
    width, the width is divided by 10 (down to ``cluster_min``) and the ascent
    resumes from the same point, so the final state is stationary for the
    narrowest cluster.

    For n = 2 alpha is first lifted to the constant ``max(alpha)`` (an
    improving move, since eigenvalues increase with alpha) and then held fixed.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.any(init.alpha <= 0) or np.any(init.beta <= 0):
        raise DegenerateDensityError("initial densities must be positive on every cell")
    if step_direction not in ("fisher", "pseudo"):
        raise ValueError("step_direction must be 'fisher' or 'pseudo'")
    freeze = freeze_alpha or mesh.dim == 2
    d = init
    if mesh.dim == 2 and not freeze_alpha:
        d = _lift_alpha(mesh, d)
    d = project_constraints(mesh, d)
    spec, lb = _evaluate(mesh, d, k, eig_tol, mult_tol)
    state = AscentState(d, spec, lb, k)
    history = []
    prev_idx = None
    width = float(cluster_tol)
    it = 0
    while True:
        fam = subdifferential_elements(mesh, state.spectrum, state.densities, k, width)
        pdir = direction_find(mesh, state.spectrum, state.densities, k, budget, family=fam, freeze_alpha=freeze)
        pn = max(pdir.value, 0.0)
        delta = stop.delta_stop if stop.delta_stop is not None else stop.rel_delta * state.lambda_bar
        sdir = None
        if pn >= delta and it < stop.max_iters:
            if step_direction == "fisher":
                sdir = fisher_direction(mesh, fam, state.densities, freeze_alpha=freeze, smooth=smooth)
            else:
                sdir = pdir
            new = ascent_step(mesh, state, sdir, ls, eig_tol=eig_tol)
            if new.stalled and step_direction == "fisher" and pdir.value > 0:
                new = ascent_step(mesh, state, pdir, ls, eig_tol=eig_tol)
        if (pn < delta or (sdir is not None and new.stalled)) and width > cluster_min * 1.0000001:
            width = max(width / 10.0, cluster_min)
            continue
        crossing = prev_idx is not None and fam.indices != prev_idx
        prev_idx = fam.indices
        rec = dict(iter=it, lambda_bar=state.lambda_bar, pseudo_norm=pn, pseudo_upper=pdir.upper_bound,
                   direction_converged=pdir.converged, step=0.0, multiplicity=fam.m,
                   cluster=list(fam.indices), cluster_width=width, crossing=bool(crossing))
        history.append(rec)
        state = replace(state, history=tuple(history), pseudo_norm=pn)
        if pn < delta:
            state = replace(state, reason="converged")
            break
        if it >= stop.max_iters:
            state = replace(state, reason="max_iters")
            break
        if new.stalled:
            state = replace(state, stalled=True, reason="stalled")
            break
        rec["step"] = new.step
        state = replace(new, history=tuple(history), pseudo_norm=pn)
        it += 1
        if callback is not None:
            callback(state)
        logger.debug("iter %d lambar %.10g pseudo %.3g step %.3g m=%d", it, state.lambda_bar, pn, new.step, fam.m)
    return state


def nu_mode(mesh: SimplicialManifold, k: int, init_beta, stop: StopRule = StopRule(), **kw) -> AscentState:
    """Maximize ``nu_k = lam_k(g, 1, beta) int beta`` with alpha frozen at 1.

    The returned state's ``lambda_bar`` is the alpha-normalized value; the nu
    functional itself is ``state.lambda_bar * Vol^((n-2)/n)`` (see :func:`nu_value`).
    """
    beta = np.asarray(init_beta, dtype=float)
    init = DensityPair(np.ones(mesh.n_cells), beta)
    return maximize(mesh, k, init, stop, freeze_alpha=True, **kw)


def nu_value(mesh: SimplicialManifold, state: AscentState) -> float:
    """``lam_k * int beta`` for the alpha = const state, independent of normalization."""
    n = mesh.dim
    d = state.densities
    # alpha is constant: undo its normalization explicitly
    a0 = float(d.alpha[0])
    lam_unit_alpha = state.spectrum.values[state.k] / a0
    return float(lam_unit_alpha * (mesh.volumes @ d.beta))
