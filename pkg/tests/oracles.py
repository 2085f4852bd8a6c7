"""Independent reference computations used to freeze expected values.

Everything here is written with explicit per-cell loops and dense linear
algebra, sharing no code with the package beyond reading mesh arrays.
"""

import itertools
import math

import numpy as np
import scipy.linalg as la


def cell_frame(X):
    """Edge vectors from the first vertex, as rows."""
    return X[1:] - X[0]


def p1_local(X):
    """Volume and (n+1, d) barycentric gradients of one simplex with vertex rows X."""
    E = cell_frame(X)
    n = E.shape[0]
    G = E @ E.T
    vol = math.sqrt(max(np.linalg.det(G), 0.0)) / math.factorial(n)
    # gradients of barycentrics 1..n in the span of E: grad = E^T G^-1 e_i
    D = E.T @ np.linalg.inv(G)
    grads = np.vstack([-D.sum(axis=1), D.T])
    return vol, grads


def torus_coords(vertices, cell, periods):
    """Unwrap a torus cell around its first vertex (minimum image)."""
    X = vertices[cell].copy()
    d = X - X[0]
    d -= periods * np.round(d / periods)
    return X[0] + d


def dense_matrices(vertices, cells, alpha, beta, periods=None):
    """Dense weighted stiffness and lumped mass by explicit loops."""
    V = vertices.shape[0]
    K = np.zeros((V, V))
    m = np.zeros(V)
    for c, cell in enumerate(cells):
        X = vertices[cell] if periods is None else torus_coords(vertices, cell, np.asarray(periods, float))
        vol, g = p1_local(X)
        k = len(cell)
        for a in range(k):
            m[cell[a]] += vol * beta[c] / k
            for b in range(k):
                K[cell[a], cell[b]] += vol * alpha[c] * g[a] @ g[b]
    return K, m


def dense_eigenvalues(vertices, cells, alpha, beta, periods=None, count=6):
    K, m = dense_matrices(vertices, cells, alpha, beta, periods)
    live = m > 0
    w = la.eigh(K[np.ix_(live, live)], np.diag(m[live]), eigvals_only=True)
    return w[:count]


def flat_torus_spectrum(periods, count):
    """Exact Laplace eigenvalues (2 pi)^2 sum (k_i / P_i)^2 with multiplicity."""
    periods = np.asarray(periods, float)
    r = 4
    vals = []
    for ks in itertools.product(range(-r, r + 1), repeat=len(periods)):
        vals.append((2 * np.pi) ** 2 * float(np.sum((np.array(ks) / periods) ** 2)))
    return np.sort(vals)[:count]


def sphere_volume(n):
    """Volume of the round unit n-sphere."""
    return 2 * math.pi ** ((n + 1) / 2) / math.gamma((n + 1) / 2)


def sphere_value(n, k=1):
    """n (k omega_n)^(2/n) with omega_n the sphere volume."""
    return n * (k * sphere_volume(n)) ** (2.0 / n)


def radial_log_map(points, center, r0, c=0.5):
    """Psi = (cos u, sin u), u = c log(|x - center| / r0).

    |grad u|^(n-2) grad u is proportional to x / |x|^n, which is divergence
    free, so Psi is n-harmonic on any annulus around ``center`` in every
    dimension. Radii below ``r0 / 4`` are clamped so the center stays finite.
    """
    r = np.maximum(np.linalg.norm(points - center, axis=1), 0.25 * r0)
    u = c * np.log(r / r0)
    return np.c_[np.cos(u), np.sin(u)]


def finite_difference(f, x, v, h=1e-6):
    """Fourth-order central difference of f along v."""
    return (-f(x + 2 * h * v) + 8 * f(x + h * v) - 8 * f(x - h * v) + f(x - 2 * h * v)) / (12 * h)
