import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confspec import (DegenerateMeshError, EmptyBallError, build_flat_torus, build_icosphere,
                      build_sphere3, geodesic_ball, read_mesh, refine, write_mesh)
from confspec.geometry import SimplicialManifold


def face_counts(mesh):
    faces = {}
    for cell in mesh.cells:
        for i in range(len(cell)):
            key = tuple(sorted(np.delete(cell, i)))
            faces[key] = faces.get(key, 0) + 1
    return set(faces.values())


def test_icosahedron_counts_and_area():
    m = build_icosphere(0)
    assert (m.n_vertices, m.n_cells) == (12, 20)
    # chord length of the unit-circumradius icosahedron
    a = 4.0 / math.sqrt(10.0 + 2.0 * math.sqrt(5.0))
    assert m.total_volume == pytest.approx(5.0 * math.sqrt(3.0) * a * a, rel=1e-12)
    assert m.total_volume == pytest.approx(9.57, abs=5e-3)


def test_icosphere4_area_close_to_4pi():
    m = build_icosphere(4)
    assert abs(m.total_volume - 4 * np.pi) / (4 * np.pi) < 5e-3


def test_icosphere_area_increases_and_converges():
    areas = [build_icosphere(s).total_volume for s in range(6)]
    assert np.all(np.diff(areas) > 0)
    assert abs(areas[5] - 4 * np.pi) < abs(areas[2] - 4 * np.pi)
    assert areas[5] < 4 * np.pi


@pytest.mark.parametrize("s", [0, 1, 2])
def test_icosphere_closed_unit(s):
    m = build_icosphere(s)
    assert face_counts(m) == {2}
    assert m.is_closed()
    np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-14)
    assert np.all(m.volumes > 0)


def test_flat_torus_volume_exact():
    m = build_flat_torus(2, 16, (1.0, 1.0))
    assert m.total_volume == pytest.approx(1.0, abs=1e-14)
    m = build_flat_torus(3, 5, (1.0, 2.0, 0.5))
    assert m.total_volume == pytest.approx(1.0, abs=1e-13)


def test_flat_torus3_kuhn_count():
    m = build_flat_torus(3, 8, (1.0, 1.0, 1.0))
    assert m.n_cells == 6 * 8 ** 3
    assert m.n_vertices == 8 ** 3
    assert face_counts(m) == {2}


def test_flat_torus_rejects_low_resolution():
    with pytest.raises(DegenerateMeshError):
        build_flat_torus(2, 2)


def test_sphere3_base_counts():
    m = build_sphere3(0)
    assert (m.n_vertices, m.n_cells) == (8, 16)
    assert face_counts(m) == {2}


@pytest.mark.parametrize("r", [0, 1, 2])
def test_sphere3_vertices_on_unit_sphere(r):
    m = build_sphere3(r)
    np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-14)
    assert face_counts(m) == {2}
    assert np.all(m.volumes > 0)


def test_sphere3_volume_increases_towards_2pi2():
    vols = [build_sphere3(r).total_volume for r in range(4)]
    assert np.all(np.diff(vols) > 0)
    assert vols[-1] < 2 * np.pi ** 2


@pytest.mark.xfail(strict=True, reason="refinement 3 is 3.5% below 2 pi^2; see the decisions ledger")
def test_sphere3_refinement3_within_two_percent():
    m = build_sphere3(3)
    assert abs(m.total_volume - 2 * np.pi ** 2) / (2 * np.pi ** 2) < 0.02


def test_kappa_defaults():
    assert build_icosphere(1).kappa == 1.0
    assert build_sphere3(0).kappa == 2.0
    assert build_flat_torus(2, 4).kappa == 0.0


def test_torus_affine_gradient_exact():
    m = build_flat_torus(2, 6, (1.0, 1.0))
    # an affine function is only periodic if constant; use the unwrapped
    # cell coordinates directly instead
    g = np.array([0.3, -1.7])
    for c, cell in enumerate(m.cells[:50]):
        d = m.displacement(np.full(3, cell[0]), cell)
        vals = d @ g
        local = m.gradients[c]
        np.testing.assert_allclose(vals @ local, g, atol=1e-12)


def test_gradient_annihilates_constants():
    for m in (build_icosphere(2), build_sphere3(1), build_flat_torus(3, 3)):
        G = m.cell_gradient(np.ones(m.n_vertices))
        assert np.abs(G).max() < 1e-12


def test_sphere_affine_gradient_is_tangential_projection():
    # gradient of x_3 on the sphere is e_3 - x_3 x; error is O(h)
    errs = []
    for s in (2, 3, 4):
        m = build_icosphere(s)
        G = m.cell_gradient(m.vertices[:, 2])
        c = m.vertices[m.cells].mean(axis=1)
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        exact = np.array([0, 0, 1.0]) - c[:, 2:3] * c
        errs.append(np.abs(G - exact).max())
    assert errs[2] < errs[1] < errs[0]


def test_geodesic_ball_whole_mesh():
    m = build_icosphere(2)
    b = geodesic_ball(m, 0, 10.0)
    assert b.interior.size == m.n_vertices
    assert b.boundary.size == 0
    assert b.cells.size == m.n_cells


def test_geodesic_ball_partial():
    m = build_icosphere(3)
    b = geodesic_ball(m, 0, 0.5)
    assert 1 < b.interior.size < m.n_vertices


def test_geodesic_ball_empty_raises():
    m = build_icosphere(2)
    with pytest.raises(EmptyBallError):
        geodesic_ball(m, 0, 0.5 * m.edge_lengths.min())


def test_geodesic_ball_covers_cells_and_boundary_band():
    m = build_icosphere(3)
    b = geodesic_ball(m, 5, 0.6)
    verts = np.unique(m.cells[b.cells])
    assert set(verts) <= set(b.interior) | set(b.boundary)
    hmax = m.edge_lengths.max()
    assert np.all(np.abs(b.distance[b.boundary] - 0.6) <= hmax + 1e-12)


@given(st.floats(0.35, 2.0), st.floats(0.35, 2.0))
def test_geodesic_ball_nested(r1, r2):
    m = build_icosphere(2)
    lo, hi = sorted((r1, r2))
    a = geodesic_ball(m, 3, lo)
    b = geodesic_ball(m, 3, hi)
    assert set(a.interior) <= set(b.interior)


def test_mesh_roundtrip_exact(tmp_path):
    for m in (build_icosphere(1), build_sphere3(1)):
        p = tmp_path / f"{m.name}.txt"
        write_mesh(m, p)
        first = p.read_text().splitlines()[0].split()
        assert first == [str(m.dim), str(m.n_vertices), str(m.n_cells)]
        back = read_mesh(p)
        assert np.array_equal(back.vertices, m.vertices)
        assert np.array_equal(back.cells, m.cells)


def test_refine_counts_and_parents():
    m = build_icosphere(1)
    fine, parent = refine(m, project=True)
    assert fine.n_cells == 4 * m.n_cells
    np.testing.assert_allclose(np.bincount(parent), 4)
    m3 = build_flat_torus(3, 3)
    fine3, parent3 = refine(m3)
    assert fine3.n_cells == 8 * m3.n_cells
    assert fine3.total_volume == pytest.approx(m3.total_volume, rel=1e-12)


def test_mesh_validation_rejects_open_or_flat():
    m = build_icosphere(0)
    with pytest.raises(DegenerateMeshError):
        SimplicialManifold(2, m.vertices, m.cells[:-1])
    bad = m.cells.copy()
    bad[0] = [0, 0, 1]
    with pytest.raises(DegenerateMeshError):
        SimplicialManifold(2, m.vertices, bad)
