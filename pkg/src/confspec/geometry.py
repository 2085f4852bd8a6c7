"""Simplicial meshes of closed manifolds and their P1 metric data.

Spheres are triangulated by inscribed simplices (each cell carries the flat
metric of the embedded simplex); flat tori carry their exact metric through
minimum-image edge vectors in a fundamental domain.
"""

from __future__ import annotations

import itertools
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .exceptions import DegenerateMeshError, EmptyBallError

__all__ = [
    "SimplicialManifold",
    "GeodesicBall",
    "build_icosphere",
    "build_flat_torus",
    "build_sphere3",
    "refine",
    "geodesic_ball",
    "read_mesh",
    "write_mesh",
]


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SimplicialManifold:
    """Closed simplicial n-manifold with per-cell P1 metric quantities.

    Parameters
    ----------
    dim : int
        Intrinsic dimension n (2 or 3).
    vertices : (V, d) array
        Vertex coordinates. ``d = n + 1`` for embedded spheres, ``d = n`` for
        tori (fundamental-domain coordinates).
    cells : (C, n + 1) int array
        Vertex indices of each simplex.
    periods : (n,) array or None
        Torus periods; edge vectors use the minimum-image convention.
    kappa : float
        Lower Ricci bound, ``Ric >= -kappa g``.
    name : str
        Free-form label used in records.
    """

    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    periods: Optional[np.ndarray] = None
    kappa: float = 0.0
    name: str = "mesh"
    volumes: np.ndarray = field(init=False, repr=False)
    gradients: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "vertices", _frozen(self.vertices, float))
        set_(self, "cells", _frozen(self.cells, np.int64))
        if self.periods is not None:
            set_(self, "periods", _frozen(self.periods, float))
        if self.dim not in (2, 3):
            raise DegenerateMeshError(f"dimension must be 2 or 3, got {self.dim}")
        if self.cells.ndim != 2 or self.cells.shape[1] != self.dim + 1:
            raise DegenerateMeshError("cells must have n + 1 vertices each")
        vol, grads = _cell_geometry(self.vertices, self.cells, self.periods)
        if np.any(vol <= 0):
            raise DegenerateMeshError("mesh has cells with non-positive volume")
        set_(self, "volumes", _frozen(vol, float))
        set_(self, "gradients", _frozen(grads, float))
        if not self.is_closed():
            raise DegenerateMeshError("mesh is not closed: some face is not shared by exactly two cells")

    # --- sizes -----------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    # --- topology --------------------------------------------------------
    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """(V, C) 0/1 matrix, vertex-to-cell incidence."""
        C, k = self.cells.shape
        rows = self.cells.ravel()
        cols = np.repeat(np.arange(C), k)
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_vertices, C))

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs, shape (E, 2)."""
        pairs = [self.cells[:, [i, j]] for i, j in itertools.combinations(range(self.dim + 1), 2)]
        e = np.sort(np.concatenate(pairs), axis=1)
        e = np.unique(e, axis=0)
        e.setflags(write=False)
        return e

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.displacement(self.edges[:, 0], self.edges[:, 1])
        return np.linalg.norm(d, axis=1)

    @cached_property
    def graph(self) -> sp.csr_matrix:
        """Symmetric edge-length graph (one-ring neighbours)."""
        return self.distance_graph(1)

    def distance_graph(self, rings: int = 1) -> sp.csr_matrix:
        """Shortest-path graph joining every vertex to its ``rings``-ring neighbours.

        Each link is weighted by the straight-line (chord, or minimum-image)
        distance. With ``rings = 1`` this is the edge graph; larger values add
        shortcut links that remove most of the direction bias of edge paths on
        structured meshes.
        """
        rings = int(rings)
        if rings < 1:
            raise ValueError("rings must be >= 1")
        cache = self.__dict__.setdefault("_distance_graphs", {})
        if rings in cache:
            return cache[rings]
        e = self.edges
        V = self.n_vertices
        A = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                          shape=(V, V)).tocsr()
        R = A.copy()
        for _ in range(rings - 1):
            R = R + R @ A
            R.data[:] = 1.0
        R = sp.triu(R, k=1).tocoo()
        w = np.linalg.norm(self.displacement(R.row, R.col), axis=1)
        g = sp.coo_matrix((np.r_[w, w], (np.r_[R.row, R.col], np.r_[R.col, R.row])), shape=(V, V)).tocsr()
        cache[rings] = g
        return g

    def faces(self):
        """Return (F, n) sorted (n-1)-faces and the number of cells sharing each."""
        k = self.dim + 1
        f = np.concatenate([np.delete(self.cells, i, axis=1) for i in range(k)])
        f = np.sort(f, axis=1)
        uniq, counts = np.unique(f, axis=0, return_counts=True)
        return uniq, counts

    def is_closed(self) -> bool:
        _, counts = self.faces()
        return bool(np.all(counts == 2))

    # --- metric ----------------------------------------------------------
    def displacement(self, a, b) -> np.ndarray:
        """Vector from vertex ``a`` to vertex ``b`` (minimum image on tori)."""
        d = self.vertices[b] - self.vertices[a]
        if self.periods is not None:
            d = d - self.periods * np.round(d / self.periods)
        return d

    def cell_gradient(self, values) -> np.ndarray:
        """Constant gradient per cell of nodal ``values``.

        ``values`` of shape (V,) gives (C, d); shape (V, m) gives (C, m, d).
        """
        values = np.asarray(values, dtype=float)
        local = values[self.cells]  # (C, k) or (C, k, m)
        if local.ndim == 2:
            return np.einsum("ck,ckd->cd", local, self.gradients)
        return np.einsum("ckm,ckd->cmd", local, self.gradients)

    def cell_average(self, values) -> np.ndarray:
        """Vertex average over each cell of nodal ``values``."""
        return np.asarray(values, dtype=float)[self.cells].mean(axis=1)

    def lumped_mass(self, weight=None) -> np.ndarray:
        """Lumped nodal mass of a per-cell weight (default 1)."""
        w = self.volumes if weight is None else self.volumes * np.asarray(weight, float)
        return np.asarray(self.incidence @ w).ravel() / (self.dim + 1)

    @cached_property
    def h(self) -> float:
        """Mean edge length."""
        return float(self.edge_lengths.mean())

    def diameter(self) -> float:
        """Edge-graph diameter estimated by a double sweep (exact on the symmetric meshes built here)."""
        d0 = dijkstra(self.graph, directed=False, indices=0)
        d1 = dijkstra(self.graph, directed=False, indices=int(np.argmax(d0)))
        return float(d1.max())


def _cell_geometry(vertices, cells, periods):
    n = cells.shape[1] - 1
    x0 = vertices[cells[:, 0]]
    E = vertices[cells[:, 1:]] - x0[:, None, :]  # (C, n, d)
    if periods is not None:
        E = E - periods * np.round(E / periods)
    G = np.einsum("cid,cjd->cij", E, E)
    det = np.linalg.det(G)
    vol = np.sqrt(np.clip(det, 0.0, None)) / math.factorial(n)
    grads = np.zeros((cells.shape[0], n + 1, vertices.shape[1]))
    ok = det > 0
    if np.any(ok):
        Ginv = np.linalg.inv(G[ok])
        grads[ok, 1:, :] = np.einsum("cij,cjd->cid", Ginv, E[ok])
        grads[ok, 0, :] = -grads[ok, 1:, :].sum(axis=1)
    return vol, grads


@dataclass(frozen=True, eq=False)
class GeodesicBall:
    """Graph-distance ball ``{d(center, .) < radius}`` on a mesh.

    ``interior`` holds the free vertices, ``boundary`` the vertices adjacent to
    the interior but outside it, ``cells`` every cell touching the interior.
    ``distance`` is finite up to one edge length beyond ``radius``.
    """

    center: int
    radius: float
    interior: np.ndarray
    boundary: np.ndarray
    cells: np.ndarray
    distance: np.ndarray = field(repr=False)


def geodesic_ball(mesh: SimplicialManifold, center: int, r: float, rings: int = 3) -> GeodesicBall:
    """Ball of shortest-path radius ``r`` about vertex ``center``.

    Distances are shortest paths in :meth:`SimplicialManifold.distance_graph`
    with the given ``rings``; ``rings=1`` is the plain edge graph.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    # search one edge beyond r so boundary vertices get finite distances
    reach = float(r) + float(mesh.edge_lengths.max()) * (1 + 1e-12)
    dist = dijkstra(mesh.distance_graph(rings), directed=False, indices=int(center), limit=reach)
    inside = dist < r
    if inside.sum() < 2:
        raise EmptyBallError(f"no vertex other than {center} within r={r}")
    interior = np.flatnonzero(inside)
    touching = np.asarray(mesh.incidence[interior].sum(axis=0)).ravel() > 0
    cells = np.flatnonzero(touching)
    verts = np.unique(mesh.cells[cells])
    boundary = verts[~inside[verts]]
    dist = np.where(np.isfinite(dist), dist, np.inf)
    for a in (interior, boundary, cells):
        a.setflags(write=False)
    return GeodesicBall(int(center), float(r), interior, boundary, cells, dist)


# --- builders --------------------------------------------------------------

_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
)


def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), _ICO_FACES.copy()


def build_icosphere(subdivisions: int) -> SimplicialManifold:
    """Unit 2-sphere from an icosahedron refined ``subdivisions`` times."""
    if subdivisions < 0:
        raise DegenerateMeshError("subdivisions must be >= 0")
    v, f = _icosahedron()
    mesh = SimplicialManifold(2, v, f, kappa=1.0, name="icosphere(0)")
    for s in range(subdivisions):
        mesh, _ = refine(mesh, project=True)
    return SimplicialManifold(2, mesh.vertices, mesh.cells, kappa=1.0, name=f"icosphere({subdivisions})")


def build_sphere3(refinement: int) -> SimplicialManifold:
    """Unit 3-sphere from the boundary of the 4-orthoplex, refined and projected."""
    if refinement < 0:
        raise DegenerateMeshError("refinement must be >= 0")
    v = np.concatenate([np.eye(4), -np.eye(4)])
    cells = []
    for signs in itertools.product((0, 4), repeat=4):
        cells.append([i + s for i, s in enumerate(signs)])
    mesh = SimplicialManifold(3, v, np.array(cells), kappa=2.0, name="sphere3(0)")
    for _ in range(refinement):
        mesh, _ = refine(mesh, project=True)
    return SimplicialManifold(3, mesh.vertices, mesh.cells, kappa=2.0, name=f"sphere3({refinement})")


def build_flat_torus(n: int, resolution: int, periods=None) -> SimplicialManifold:
    """Kuhn triangulation of the flat torus R^n / (periods Z^n)."""
    if n not in (2, 3):
        raise DegenerateMeshError("n must be 2 or 3")
    if resolution < 3:
        raise DegenerateMeshError("resolution must be >= 3")
    periods = np.ones(n) if periods is None else np.asarray(periods, dtype=float)
    if periods.shape != (n,) or np.any(periods <= 0):
        raise DegenerateMeshError("periods must be n positive lengths")
    N = resolution
    grid = np.stack(np.meshgrid(*[np.arange(N)] * n, indexing="ij"), axis=-1).reshape(-1, n)
    vertices = grid * (periods / N)

    def vid(idx):
        idx = np.mod(idx, N)
        return np.ravel_multi_index(tuple(idx.T), (N,) * n)

    cells = []
    for perm in itertools.permutations(range(n)):
        chain = [grid.copy()]
        cur = grid.copy()
        for axis in perm:
            cur = cur.copy()
            cur[:, axis] += 1
            chain.append(cur)
        cells.append(np.stack([vid(c) for c in chain], axis=1))
    cells = np.concatenate(cells)
    return SimplicialManifold(n, vertices, cells, periods=periods, kappa=0.0, name=f"torus{n}({N})")


# --- refinement ------------------------------------------------------------


def refine(mesh: SimplicialManifold, project: bool = False):
    """Uniform red refinement (4 triangles / 8 tetrahedra per cell).

    Returns the refined mesh and the parent cell index of every child cell.
    With ``project`` the new vertices are pushed to the unit sphere.
    """
    cells = mesh.cells
    k = mesh.dim + 1
    local_pairs = list(itertools.combinations(range(k), 2))
    pairs = np.sort(np.concatenate([cells[:, [i, j]] for i, j in local_pairs]), axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    inv = inv.ravel()
    V = mesh.n_vertices
    mid = mesh.vertices[uniq[:, 0]] + 0.5 * mesh.displacement(uniq[:, 0], uniq[:, 1])
    if mesh.periods is not None:
        mid = np.mod(mid, mesh.periods)
    if project:
        mid = mid / np.linalg.norm(mid, axis=1, keepdims=True)
    vertices = np.concatenate([mesh.vertices, mid])
    C = cells.shape[0]
    m = {pair: V + inv[i * C:(i + 1) * C] for i, pair in enumerate(local_pairs)}

    def M(a, b):
        return m[(min(a, b), max(a, b))]

    c = [cells[:, i] for i in range(k)]
    if mesh.dim == 2:
        children = [
            (c[0], M(0, 1), M(0, 2)),
            (c[1], M(1, 2), M(0, 1)),
            (c[2], M(0, 2), M(1, 2)),
            (M(0, 1), M(1, 2), M(0, 2)),
        ]
    else:
        children = [
            (c[0], M(0, 1), M(0, 2), M(0, 3)),
            (c[1], M(0, 1), M(1, 2), M(1, 3)),
            (c[2], M(0, 2), M(1, 2), M(2, 3)),
            (c[3], M(0, 3), M(1, 3), M(2, 3)),
        ]
        # inner octahedron: split along its shortest diagonal (after projection)
        diags = [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]
        lengths = []
        for (a, b), (cc, d) in diags:
            p, q = M(a, b), M(cc, d)
            dv = vertices[q] - vertices[p]
            if mesh.periods is not None:
                dv = dv - mesh.periods * np.round(dv / mesh.periods)
            lengths.append(np.linalg.norm(dv, axis=1))
        choice = np.argmin(np.stack(lengths, axis=1), axis=1)
        inner = np.zeros((C, 4, 4), dtype=np.int64)
        for j, ((a, b), (cc, d)) in enumerate(diags):
            p, q = M(a, b), M(cc, d)
            ring = [M(a, cc), M(a, d), M(b, d), M(b, cc)]
            tets = np.stack([np.stack([p, q, ring[i], ring[(i + 1) % 4]], axis=1) for i in range(4)], axis=1)
            inner[choice == j] = tets[choice == j]
        children.extend([tuple(inner[:, i, :].T) for i in range(4)])
    new_cells = np.concatenate([np.stack(ch, axis=1) for ch in children])
    parent = np.tile(np.arange(C), len(children))
    fine = SimplicialManifold(
        mesh.dim, vertices, new_cells, periods=mesh.periods, kappa=mesh.kappa, name=mesh.name + "+r"
    )
    return fine, parent


# --- plain-text mesh format ------------------------------------------------


def write_mesh(mesh: SimplicialManifold, path) -> None:
    """Write ``n V C`` header, vertex lines, cell lines (17 significant digits).

    Torus periods, the Ricci bound and the name follow the header as ``#``
    comment lines.
    """
    lines = [f"{mesh.dim} {mesh.n_vertices} {mesh.n_cells}"]
    if mesh.periods is not None:
        lines.append("# periods " + " ".join(f"{p:.17g}" for p in mesh.periods))
    lines.append(f"# kappa {mesh.kappa:.17g}")
    lines.append(f"# name {mesh.name}")
    lines.extend(" ".join(f"{x:.17g}" for x in row) for row in mesh.vertices)
    lines.extend(" ".join(str(int(i)) for i in row) for row in mesh.cells)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_mesh(path) -> SimplicialManifold:
    meta = {}
    body = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, rest = line[1:].strip().partition(" ")
                meta[key] = rest.strip()
            else:
                body.append(line)
    n, V, C = (int(t) for t in body[0].split())
    if len(body) != 1 + V + C:
        raise DegenerateMeshError(f"expected {V} vertex and {C} cell lines in {path}")
    vertices = np.array([[float(t) for t in ln.split()] for ln in body[1:1 + V]])
    cells = np.array([[int(t) for t in ln.split()] for ln in body[1 + V:]], dtype=np.int64)
    periods = np.array([float(t) for t in meta["periods"].split()]) if "periods" in meta else None
    kappa = float(meta.get("kappa", 0.0))
    return SimplicialManifold(n, vertices, cells, periods=periods, kappa=kappa, name=meta.get("name", "mesh"))
