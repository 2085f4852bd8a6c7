import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confspec import (DegenerateDensityError, DensityPair, StopRule, build_flat_torus, build_icosphere,
                      build_sphere3, compute_spectrum, direction_find, maximize, normalized_eigenvalue, nu_mode,
                      nu_value, project_constraints, subdifferential_elements)
from confspec.estimators import initial_densities
from confspec.maximize import AscentState, LineSearch, ascent_step, cluster_indices, fisher_direction


def state_of(mesh, d, k):
    d = project_constraints(mesh, d)
    spec = compute_spectrum(mesh, d, k)
    return AscentState(d, spec, normalized_eigenvalue(mesh, d, spec, k), k)


def random_pair(mesh, rng, lo=0.5, hi=2.0):
    return DensityPair(rng.uniform(lo, hi, mesh.n_cells), rng.uniform(lo, hi, mesh.n_cells))


# --- project_constraints -----------------------------------------------------

def test_project_identity_on_normalized(s3_1, rng):
    d = project_constraints(s3_1, random_pair(s3_1, rng))
    again = project_constraints(s3_1, d)
    np.testing.assert_allclose(again.alpha, d.alpha, rtol=1e-15)
    np.testing.assert_allclose(again.beta, d.beta, rtol=1e-15)
    vol = s3_1.volumes
    assert vol @ d.beta == pytest.approx(1.0, abs=1e-14)
    assert vol @ d.alpha ** 3 == pytest.approx(1.0, abs=1e-14)


def test_project_scaled_input(s3_1, rng):
    d = random_pair(s3_1, rng)
    a = project_constraints(s3_1, d)
    b = project_constraints(s3_1, DensityPair(2 * d.alpha, 3 * d.beta))
    np.testing.assert_allclose(a.alpha, b.alpha, rtol=1e-14)
    np.testing.assert_allclose(a.beta, b.beta, rtol=1e-14)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=10)
def test_project_preserves_lambar(seed):
    rng = np.random.default_rng(seed)
    m = build_icosphere(1)
    d = random_pair(m, rng)
    p = project_constraints(m, d)
    before = normalized_eigenvalue(m, d, compute_spectrum(m, d, 1))
    after = normalized_eigenvalue(m, p, compute_spectrum(m, p, 1))
    assert after == pytest.approx(before, rel=1e-12)


def test_project_degenerate():
    m = build_icosphere(0)
    with pytest.raises(DegenerateDensityError):
        project_constraints(m, DensityPair(np.ones(20), np.zeros(20)))
    m3 = build_sphere3(0)
    with pytest.raises(DegenerateDensityError):
        project_constraints(m3, DensityPair(np.zeros(16), np.ones(16)))


def test_half_norm_flag(s3_1, rng):
    d = random_pair(s3_1, rng).with_(alpha_norm="half")
    p = project_constraints(s3_1, d)
    assert s3_1.volumes @ p.alpha ** 1.5 == pytest.approx(1.0, abs=1e-13)


# --- subdifferential family --------------------------------------------------

def test_psi2_integrates_to_zero(ico3, rng):
    st_ = state_of(ico3, random_pair(ico3, rng), 1)
    fam = subdifferential_elements(ico3, st_.spectrum, st_.densities, 1, 1e-2)
    vol = ico3.volumes
    for _ in range(5):
        c = rng.normal(size=fam.m)
        c /= np.linalg.norm(c)
        _, p2 = fam.fields(c)
        assert abs(vol @ (p2 * st_.densities.beta)) < 1e-10 * fam.lambda_bar


def test_round_sphere_family(ico3, rng):
    st_ = state_of(ico3, DensityPair.uniform(ico3), 1)
    fam = subdifferential_elements(ico3, st_.spectrum, st_.densities, 1, 1e-2)
    assert fam.m == 3
    c = rng.normal(size=3)
    c /= np.linalg.norm(c)
    _, p2 = fam.fields(c)
    assert abs(ico3.volumes @ (p2 * st_.densities.beta)) < 1e-10 * fam.lambda_bar


def test_simple_eigenvalue_sign_symmetry(rng):
    m = build_icosphere(2)
    st_ = state_of(m, random_pair(m, rng, 0.2, 3.0), 1)
    fam = subdifferential_elements(m, st_.spectrum, st_.densities, 1, None)
    if fam.m == 1:
        a1, b1 = fam.fields(np.ones(1))
        a2, b2 = fam.fields(-np.ones(1))
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(b1, b2)


def test_flat_torus_psi1_fourier_oracle():
    # at alpha = beta = 1 on the unit torus, n = 2: psi_1 has no alpha term and
    # for phi = sqrt(2) cos(2 pi x) (unit area) |grad phi|^2 = 8 pi^2 sin^2(2 pi x)
    N = 32
    m = build_flat_torus(2, N)
    st_ = state_of(m, DensityPair.uniform(m), 1)
    fam = subdifferential_elements(m, st_.spectrum, st_.densities, 1, 1e-2)
    E = st_.spectrum.vectors[:, list(fam.indices)]
    x = m.vertices[:, 0]
    target = np.sqrt(2) * np.cos(2 * np.pi * x)
    M = m.lumped_mass()
    c = E.T @ (M * target)
    c /= np.linalg.norm(c)
    p1, _ = fam.fields(c)
    # cells in the x-direction strip: compare against the closed form with the
    # discrete eigenvalue; psi_1 = (lambar / lam) |grad phi|^2
    xc = m.vertices[m.cells][:, :, 0]
    span = np.ptp(xc, axis=1) < 0.5
    mid = xc.mean(axis=1)
    lam = st_.spectrum.values[1]
    closed = (st_.lambda_bar / lam) * 2 * (2 * np.pi) ** 2 * np.sin(2 * np.pi * mid) ** 2
    err = np.abs(p1[span] - closed[span]).max() / closed.max()
    assert err < 0.1


def test_cluster_indices_and_cap(ico3):
    st_ = state_of(ico3, DensityPair.uniform(ico3), 1)
    assert cluster_indices(st_.spectrum, 1, 1e-2) == (1, 2, 3)
    assert cluster_indices(st_.spectrum, 2, 1e-2) == (2, 3)
    with pytest.raises(IndexError):
        cluster_indices(st_.spectrum, 40, 1e-2)


# --- direction finder --------------------------------------------------------

def test_direction_flat_torus_is_zero(torus2):
    st_ = state_of(torus2, DensityPair.uniform(torus2), 1)
    d = direction_find(torus2, st_.spectrum, st_.densities, 1)
    assert abs(d.value) < 1e-8 * st_.lambda_bar


def test_direction_feasible_and_bounds(rng):
    m = build_sphere3(1)
    st_ = state_of(m, random_pair(m, rng), 1)
    fam = subdifferential_elements(m, st_.spectrum, st_.densities, 1, 1e-2)
    d = direction_find(m, st_.spectrum, st_.densities, 1, family=fam)
    vol = m.volumes
    assert np.all(d.alpha_dot >= 0) and np.all(d.beta_dot >= 0)
    assert vol @ d.alpha_dot + vol @ d.beta_dot == pytest.approx(1.0, abs=1e-12)
    # value is attained: lam_min at the returned tau
    F = fam.matrix(vol * d.alpha_dot, vol * d.beta_dot)
    assert np.linalg.eigvalsh(F)[0] == pytest.approx(d.value, abs=1e-10 * fam.lambda_bar)
    # 100 random feasible tau stay below the duality bound
    for _ in range(100):
        a = rng.exponential(size=m.n_cells) * (rng.uniform() < 0.5)
        b = rng.exponential(size=m.n_cells)
        s = a.sum() + b.sum()
        val = np.linalg.eigvalsh(fam.matrix(a / s, b / s))[0]
        assert val <= d.upper_bound + 1e-9


def test_direction_simple_eigenvalue_vertex(rng):
    m = build_sphere3(1)
    for seed in range(20):
        st_ = state_of(m, random_pair(m, np.random.default_rng(seed), 0.2, 3.0), 1)
        fam = subdifferential_elements(m, st_.spectrum, st_.densities, 1, None)
        if fam.m == 1:
            break
    else:
        pytest.skip("no simple eigenvalue found")
    d = direction_find(m, st_.spectrum, st_.densities, 1, family=fam)
    p1, p2 = fam.fields(np.ones(1))
    assert d.value == pytest.approx(max(p1.max(), p2.max()), rel=1e-12)
    assert np.count_nonzero(d.alpha_dot) + np.count_nonzero(d.beta_dot) == 1


@settings(max_examples=10)
@given(st.integers(0, 2 ** 31 - 1))
def test_value_function_concave(seed):
    rng = np.random.default_rng(seed)
    m = build_icosphere(2)
    st_ = state_of(m, DensityPair.uniform(m), 1)
    fam = subdifferential_elements(m, st_.spectrum, st_.densities, 1, 1e-2)
    C = m.n_cells

    def f(a, b):
        return np.linalg.eigvalsh(fam.matrix(a, b))[0]

    x = rng.exponential(size=2 * C)
    y = rng.exponential(size=2 * C)
    x /= x.sum()
    y /= y.sum()
    t = rng.uniform()
    z = t * x + (1 - t) * y
    assert f(z[:C], z[C:]) >= t * f(x[:C], x[C:]) + (1 - t) * f(y[:C], y[C:]) - 1e-10 * fam.lambda_bar


# --- ascent ------------------------------------------------------------------

def test_step_on_flat_torus_stalls(torus2):
    st_ = state_of(torus2, DensityPair.uniform(torus2), 1)
    d = direction_find(torus2, st_.spectrum, st_.densities, 1)
    new = ascent_step(torus2, st_, d, LineSearch(0.5, 10))
    assert new.stalled


def test_step_increases_on_perturbed_sphere(ico3):
    d0 = initial_densities(ico3, "perturbed", 0.2, 0)
    st_ = state_of(ico3, d0.with_(alpha=np.full(ico3.n_cells, d0.alpha.max())), 1)
    assert st_.lambda_bar < 8 * np.pi
    fam = subdifferential_elements(ico3, st_.spectrum, st_.densities, 1, 1e-2)
    d = fisher_direction(ico3, fam, st_.densities, freeze_alpha=True)
    new = ascent_step(ico3, st_, d)
    assert not new.stalled
    assert new.lambda_bar > st_.lambda_bar


def test_flat_torus_terminates_immediately(torus2):
    st_ = maximize(torus2, 1, DensityPair.uniform(torus2))
    assert st_.reason == "converged"
    assert st_.iteration == 0
    assert st_.history[-1]["pseudo_norm"] < 1e-4 * st_.lambda_bar


def test_maximize_monotone_and_bounded(ico3):
    d0 = initial_densities(ico3, "perturbed", 0.2, 1)
    st_ = maximize(ico3, 1, d0, StopRule(max_iters=15))
    lb = st_.lambda_bars
    assert np.all(np.diff(lb) >= 0)
    area = ico3.total_volume
    assert lb.max() <= 8 * np.pi * (1 + 3 * abs(area - 4 * np.pi) / (4 * np.pi))


def test_maximize_n3_monotone(s3_1):
    d0 = initial_densities(s3_1, "perturbed", 0.2, 2)
    st_ = maximize(s3_1, 1, d0, StopRule(max_iters=8))
    assert np.all(np.diff(st_.lambda_bars) >= 0)
    assert st_.reason in ("converged", "stalled", "max_iters")


def test_maximize_rejects_bad_input(ico2):
    with pytest.raises(ValueError):
        maximize(ico2, 0, DensityPair.uniform(ico2))
    z = np.zeros(ico2.n_cells)
    with pytest.raises(DegenerateDensityError):
        maximize(ico2, 1, DensityPair(np.ones(ico2.n_cells), z))


def test_nu_mode_freezes_alpha(ico3):
    b0 = initial_densities(ico3, "perturbed", 0.2, 3).beta
    st_ = nu_mode(ico3, 1, b0, StopRule(max_iters=5))
    assert np.ptp(st_.densities.alpha) == 0
    nu = nu_value(ico3, st_)
    assert nu == pytest.approx(st_.lambda_bar, rel=1e-12)


def test_nu_beta_scaling(ico3):
    b = initial_densities(ico3, "perturbed", 0.2, 4).beta
    vals = []
    for t in (1.0, 7.5):
        d = DensityPair(np.ones(ico3.n_cells), t * b)
        spec = compute_spectrum(ico3, d, 1)
        vals.append(spec.values[1] * (ico3.volumes @ d.beta))
    assert vals[0] == pytest.approx(vals[1], rel=1e-12)
