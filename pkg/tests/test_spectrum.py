import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings
from hypothesis import strategies as st

from confspec import (DegenerateDensityError, DensityPair, EmptyBallError, SolverFailure, build_flat_torus,
                      build_icosphere, build_sphere3, compute_spectrum, eigensolve, geodesic_ball,
                      local_star_eigenvalue, normalized_eigenvalue)
from confspec.spectrum import _floor, assemble, dense_eigensolve, mass, stiffness

from oracles import dense_eigenvalues, dense_matrices, flat_torus_spectrum

# values from the explicit-loop dense oracle (tests/oracles.py)
FROZEN = {
    "torus2(8)": [37.4903320081, 74.9806640162],
    "icosphere(1)": [1.99920852456, 5.47991305567],
    "torus3(3)": [27.0, 54.0],
    "sphere3(1)": [2.91539365043, 4.16595691436],
}


def small_meshes():
    return [build_flat_torus(2, 8), build_icosphere(1), build_flat_torus(3, 3), build_sphere3(1)]


@pytest.mark.parametrize("mesh", small_meshes(), ids=lambda m: m.name)
def test_uniform_spectrum_matches_oracle(mesh):
    d = DensityPair.uniform(mesh)
    spec = compute_spectrum(mesh, d, 5)
    one = np.ones(mesh.n_cells)
    ref = dense_eigenvalues(mesh.vertices, mesh.cells, one, one, mesh.periods, 6)
    np.testing.assert_allclose(spec.values[1:6], ref[1:6], rtol=1e-9)
    assert spec.values[1] == pytest.approx(FROZEN[mesh.name][0], rel=1e-10)
    assert spec.values[spec.group_of(1)[-1] + 1] == pytest.approx(FROZEN[mesh.name][1], rel=1e-10)


def test_structured_torus_closed_form():
    # lumped P1 on the structured grid: 4 N^2 sin^2(pi / N)
    for N in (8, 12):
        spec = compute_spectrum(build_flat_torus(2, N), DensityPair.uniform(build_flat_torus(2, N)), 1)
        assert spec.values[1] == pytest.approx(4 * N * N * np.sin(np.pi / N) ** 2, rel=1e-10)


def test_random_densities_match_oracle(rng):
    m = build_icosphere(1)
    a = rng.uniform(0.3, 3.0, m.n_cells)
    b = rng.uniform(0.3, 3.0, m.n_cells)
    spec = compute_spectrum(m, DensityPair(a, b), 5)
    ref = dense_eigenvalues(m.vertices, m.cells, a, b, None, 6)
    np.testing.assert_allclose(spec.values[1:6], ref[1:6], rtol=1e-9)


def test_flat_torus16_first_eigenvalue():
    m = build_flat_torus(2, 16, (1.0, 1.0))
    spec = compute_spectrum(m, DensityPair.uniform(m), 1)
    assert spec.multiplicity(1) == 4
    assert spec.values[1] == pytest.approx(4 * np.pi ** 2, rel=0.02)
    assert flat_torus_spectrum((1, 1), 2)[1] == pytest.approx(4 * np.pi ** 2)


def test_icosphere4_first_eigenvalue():
    m = build_icosphere(4)
    spec = compute_spectrum(m, DensityPair.uniform(m), 1)
    assert spec.multiplicity(1) == 3
    assert spec.values[1] == pytest.approx(2.0, rel=1e-3)


@pytest.mark.parametrize("mesh", small_meshes(), ids=lambda m: m.name)
def test_kernel_constant_and_orthonormal(mesh, rng):
    d = DensityPair(rng.uniform(0.5, 2, mesh.n_cells), rng.uniform(0.5, 2, mesh.n_cells))
    spec = compute_spectrum(mesh, d, 3)
    assert abs(spec.values[0]) < 1e-8 * spec.values[1]
    e0 = spec.vectors[:, 0]
    assert np.ptp(e0) < 1e-8 * np.abs(e0).max()
    K, M0 = assemble(mesh, d)
    G = spec.vectors.T @ (M0 @ spec.vectors)
    np.testing.assert_allclose(G, np.eye(G.shape[0]), atol=1e-9)
    rq = np.einsum("vi,vi->i", spec.vectors, K @ spec.vectors)
    np.testing.assert_allclose(rq[1:], spec.values[1:], rtol=1e-9)


def test_assembly_identities(rng):
    m = build_sphere3(1)
    a = rng.uniform(0.5, 2, m.n_cells)
    K = stiffness(m, a)
    assert abs(K - K.T).max() < 1e-14
    assert np.abs(K @ np.ones(m.n_vertices)).max() < 1e-12
    assert abs(stiffness(m, 2 * a) - 2 * K).max() < 1e-13
    M = mass(m, a)
    assert np.all(M.diagonal() > 0)
    # alpha = 1 on the torus is the standard P1 stiffness: row sums zero, diagonal 4 in 2d
    t = build_flat_torus(2, 6)
    K1 = stiffness(t, np.ones(t.n_cells)).toarray()
    np.testing.assert_allclose(np.diag(K1), 4.0, rtol=1e-12)


def test_zero_alpha_norm_raises():
    m = build_icosphere(1)
    d = DensityPair(np.zeros(m.n_cells), np.ones(m.n_cells))
    spec = compute_spectrum(m, DensityPair.uniform(m), 1)
    with pytest.raises(DegenerateDensityError):
        normalized_eigenvalue(m, d, spec)


def test_round_sphere_normalized_values():
    m = build_icosphere(4)
    d = DensityPair.uniform(m)
    lb = normalized_eigenvalue(m, d, compute_spectrum(m, d, 1))
    assert lb == pytest.approx(8 * np.pi, rel=5e-3)
    m3 = build_sphere3(3)
    d3 = DensityPair.uniform(m3)
    lb3 = normalized_eigenvalue(m3, d3, compute_spectrum(m3, d3, 1))
    assert lb3 == pytest.approx(3 * (2 * np.pi ** 2) ** (2 / 3), rel=0.05)


@settings(max_examples=10)
@given(st.integers(0, 2 ** 31 - 1))
def test_beta_monotonicity(seed):
    rng = np.random.default_rng(seed)
    m = build_icosphere(1)
    a, b = rng.uniform(0.5, 2, m.n_cells), rng.uniform(0.5, 2, m.n_cells)
    lo = compute_spectrum(m, DensityPair(a, b), 5).values[:6]
    hi = compute_spectrum(m, DensityPair(a, b * (1 + rng.uniform(0, 1, m.n_cells))), 5).values[:6]
    assert np.all(hi[1:] <= lo[1:] * (1 + 1e-10))


@settings(max_examples=10)
@given(st.integers(0, 2 ** 31 - 1))
def test_alpha_monotonicity(seed):
    rng = np.random.default_rng(seed)
    m = build_flat_torus(3, 3)
    a, b = rng.uniform(0.5, 2, m.n_cells), rng.uniform(0.5, 2, m.n_cells)
    lo = compute_spectrum(m, DensityPair(a, b), 5).values[:6]
    hi = compute_spectrum(m, DensityPair(a * (1 + rng.uniform(0, 1, m.n_cells)), b), 5).values[:6]
    assert np.all(hi[1:] >= lo[1:] * (1 - 1e-10))


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(1, 3))
def test_dilation_invariance(s, t, k):
    m = build_sphere3(1)
    rng = np.random.default_rng(k)
    d = DensityPair(rng.uniform(0.5, 2, m.n_cells), rng.uniform(0.5, 2, m.n_cells))
    ref = normalized_eigenvalue(m, d, compute_spectrum(m, d, k), k)
    ds = DensityPair(s * d.alpha, t * d.beta)
    assert normalized_eigenvalue(m, ds, compute_spectrum(m, ds, k), k) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("mesh", [build_sphere3(1), build_icosphere(2)], ids=lambda m: m.name)
def test_conformal_consistency(mesh, rng):
    # lambar of (f^((n-2)/2), f^(n/2)) equals lam_k(f g) Vol(f g)^(2/n);
    # for n = 2 alpha = 1, so the max-alpha denominator is 1
    n = mesh.dim
    f = rng.uniform(0.5, 2.0, mesh.n_cells)
    d = DensityPair.from_conformal_factor(mesh, f)
    lb = normalized_eigenvalue(mesh, d, compute_spectrum(mesh, d, 1))
    K, m = dense_matrices(mesh.vertices, mesh.cells, f ** ((n - 2) / 2), f ** (n / 2), mesh.periods)
    lam = la.eigh(K, np.diag(m), eigvals_only=True)[1]
    vol = float(mesh.volumes @ f ** (n / 2))
    assert lb == pytest.approx(lam * vol ** (2 / n), rel=1e-9)


def test_iterative_matches_dense(rng):
    m = build_flat_torus(2, 17)
    d = DensityPair(rng.uniform(0.2, 5, m.n_cells), rng.uniform(0.2, 5, m.n_cells))
    K, M0 = assemble(m, d)
    M, eps = _floor(m, M0)
    it = eigensolve(K, M, 5, dense_threshold=0, _floor_eps=eps).values[:6]
    de = dense_eigensolve(K, M, 6)
    assert np.all(np.abs(it - de) <= 1e-8 * np.maximum(np.abs(de), de[1]))


def test_k_out_of_range_and_negative():
    m = build_icosphere(0)
    d = DensityPair.uniform(m)
    spec = compute_spectrum(m, d, 1)
    with pytest.raises(IndexError):
        spec.group_of(50)
    K, M0 = assemble(m, d)
    with pytest.raises(ValueError):
        eigensolve(K, M0, -1)


def test_solver_failure_carries_residuals():
    m = build_flat_torus(2, 24)
    d = DensityPair.uniform(m)
    K, M0 = assemble(m, d)
    M, eps = _floor(m, M0)
    with pytest.raises(SolverFailure) as exc:
        eigensolve(K, M, 10, dense_threshold=0, maxiter=1, _floor_eps=eps)
    assert exc.value.residuals is not None


def test_mass_floor_reported():
    m = build_icosphere(2)
    b = np.ones(m.n_cells)
    b[: m.n_cells // 4] = 0.0
    spec = compute_spectrum(m, DensityPair(np.ones(m.n_cells), b), 2)
    assert spec.mass_floor > 0
    assert spec.floor_influence > 0
    assert np.all(np.isfinite(spec.values))


def test_local_star_whole_mesh_is_zero():
    m = build_icosphere(2)
    ball = geodesic_ball(m, 0, 10.0)
    assert abs(local_star_eigenvalue(m, DensityPair.uniform(m), ball)) < 1e-8


def test_local_star_monotone_in_radius():
    m = build_icosphere(3)
    d = DensityPair.uniform(m)
    vals = [local_star_eigenvalue(m, d, geodesic_ball(m, 7, r)) for r in (0.3, 0.5, 0.8, 1.2)]
    assert np.all(np.diff(vals) <= 1e-12)


def test_local_star_disk_oracle():
    m = build_flat_torus(2, 48)
    c = int(np.argmin(np.linalg.norm(m.vertices - 0.5, axis=1)))
    lam = local_star_eigenvalue(m, DensityPair.uniform(m), geodesic_ball(m, c, 0.25))
    assert lam == pytest.approx((2.404825557695773 / 0.25) ** 2, rel=0.10)


def test_local_star_empty_ball():
    m = build_icosphere(2)
    with pytest.raises(EmptyBallError):
        geodesic_ball(m, 0, 1e-3)
