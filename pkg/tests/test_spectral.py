import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scbf.spectral import (
    Grid, SpectralField, WaveIndex, agmon_ratio, calibrate_agmon, field_from_bytes,
    field_from_json, field_to_bytes, field_to_json, get_basis, leray_project, norm,
    random_field, stokes_pow,
)

seeds = st.integers(0, 2 ** 32 - 1)


def gradient_grid(b, rng, n_terms=6):
    """Grid samples of grad(phi) for a random real trigonometric polynomial phi."""
    X, Y = b.grid_points()
    gx, gy = np.zeros_like(X), np.zeros_like(X)
    for _ in range(n_terms):
        k1, k2 = rng.integers(-b.N, b.N + 1, size=2)
        a, c = rng.standard_normal(2)
        arg = b.kappa * (k1 * X + k2 * Y)
        d = -a * np.sin(arg) + c * np.cos(arg)
        gx += b.kappa * k1 * d
        gy += b.kappa * k2 * d
    return np.stack([gx, gy])


def test_gradient_projects_to_zero(basis4, rng):
    out = leray_project(Grid(basis4.M, basis4.L, gradient_grid(basis4, rng)), basis4)
    assert np.max(np.abs(out.coords)) < 1e-12


def test_projection_is_idempotent(basis4, rng):
    x = random_field(basis4, rng)
    again = leray_project(x.grid(), basis4)
    np.testing.assert_allclose(again.coords, x.coords, atol=1e-12)


def test_projection_accepts_fourier_coefficients(basis4, rng):
    x = random_field(basis4, rng)
    fine = get_basis(4, M=2 * basis4.M)
    out = leray_project(Grid(fine.M, fine.L, fine.velocity(x.coords)).fourier(), basis4)
    np.testing.assert_allclose(out.coords, x.coords, atol=1e-12)


def test_weak_divergence_vanishes(basis4, rng):
    vals = rng.standard_normal((2, basis4.M, basis4.M))
    out = leray_project(Grid(basis4.M, basis4.L, vals), basis4)
    u = basis4.velocity(out.coords)
    for _ in range(20):
        # int (div u) phi = - int u . grad(phi)
        g = gradient_grid(basis4, rng, n_terms=3)
        assert abs(basis4.cell * np.sum(u * g)) <= 1e-10


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_grid_divergence_is_zero(seed):
    b = get_basis(3)
    x = random_field(b, np.random.default_rng(seed))
    du = b.velocity_gradient(x.coords)
    div = du[0, 0] + du[1, 1]
    assert np.max(np.abs(div)) <= 1e-12 * max(1.0, np.max(np.abs(du)))


def test_stokes_power_examples(basis4, rng):
    e = SpectralField.unit(basis4, (1, 0))
    np.testing.assert_allclose(stokes_pow(e, 1.0).coords, e.coords * 1.0)
    e2 = SpectralField.unit(basis4, (0, 2), 1)
    np.testing.assert_allclose(stokes_pow(e2, 1.0).coords, 4.0 * e2.coords)
    x = random_field(basis4, rng)
    np.testing.assert_array_equal(stokes_pow(x, 0.0).coords, x.coords)
    y = stokes_pow(e + e2, 0.5)
    assert y.coords[basis4.coordinate((1, 0))] == pytest.approx(1.0)
    assert y.coords[basis4.coordinate((0, 2), 1)] == pytest.approx(2.0)


@given(seeds, st.floats(-2, 2), st.floats(-2, 2))
@settings(max_examples=25, deadline=None)
def test_stokes_power_composes(seed, a, c):
    b = get_basis(3)
    x = random_field(b, np.random.default_rng(seed))
    np.testing.assert_allclose(stokes_pow(stokes_pow(x, a), c).coords, stokes_pow(x, a + c).coords,
                               rtol=1e-12, atol=1e-300)


def test_norms_of_zero_and_unit_mode(basis4):
    z = SpectralField.zeros(basis4)
    for space in ("H", "V", ("frac", 0.4), ("Lp", 2), ("Lp", 3), ("Lp", 4), ("Lp", 6), ("Lp", np.inf)):
        assert norm(z, space) == 0
    e = SpectralField.unit(basis4, (1, 0))
    assert norm(e) == pytest.approx(1.0)
    assert norm(e, "V") == pytest.approx(1.0)
    assert norm(e, ("frac", 0.5 + 0.375)) == pytest.approx(1.0)


def test_l2_norm_matches_parseval(basis4, rng):
    x = random_field(basis4, rng, size=10)
    np.testing.assert_allclose(norm(x, ("Lp", 2)), norm(x), rtol=1e-12)


def test_lp_norm_single_mode_closed_form(basis4):
    # unit (1,0) mode has velocity (0, -(sqrt2/L) sin x1)
    e = SpectralField.unit(basis4, (1, 0))
    L = basis4.L
    assert norm(e, ("Lp", 4)) ** 4 == pytest.approx(3 / (2 * L ** 2), rel=1e-12)
    grid_max = np.max(np.abs(np.sin(2 * np.pi * np.arange(basis4.M) / basis4.M)))
    assert norm(e, ("Lp", np.inf)) == pytest.approx(math.sqrt(2) / L * grid_max, rel=1e-12)


def test_lp_rejects_unsupported_exponent(basis4):
    with pytest.raises(ValueError):
        norm(SpectralField.zeros(basis4), ("Lp", 5))


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_poincare(seed):
    b = get_basis(3, L=3.0)
    x = random_field(b, np.random.default_rng(seed))
    assert norm(x, "V") ** 2 >= b.lambda1 * norm(x) ** 2 * (1 - 1e-12)


@given(seeds, st.sampled_from([0.3, 0.45]), st.floats(0.5, 8.0), st.floats(0.2, 3.0))
@settings(max_examples=40, deadline=None)
def test_fractional_power_inequalities(seed, d, L, smooth):
    b = get_basis(4, L=L)
    x = random_field(b, np.random.default_rng(seed), smoothness=smooth)
    l1 = b.lambda1
    hi, lo = norm(x, ("frac", d + 0.5)), norm(x, ("frac", d))
    slack = 1e-12 * max(hi, 1.0)
    assert hi >= l1 ** d * norm(x, "V") - slack
    assert lo >= l1 ** d * norm(x) - slack
    assert hi >= math.sqrt(l1) * lo - slack
    half = norm(x, ("frac", 0.5))
    assert half >= l1 ** (0.5 - d) * lo - slack
    if l1 >= 1:
        # the weaker exponent d - 1/2 is only valid once lambda_1 >= 1
        assert half >= l1 ** (d - 0.5) * lo - slack


def test_weak_exponent_form_fails_below_unit_lambda1():
    b = get_basis(2, L=4 * np.pi)
    e = SpectralField.unit(b, (1, 0))
    d = 0.3
    assert norm(e, ("frac", 0.5)) < b.lambda1 ** (d - 0.5) * norm(e, ("frac", d))


@given(seeds, st.sampled_from([0.3, 0.375, 0.45]))
@settings(max_examples=40, deadline=None)
def test_interpolation_estimates(seed, d):
    b = get_basis(4)
    x = random_field(b, np.random.default_rng(seed))
    lo, hi = norm(x, ("frac", d)), norm(x, ("frac", d + 0.5))
    assert norm(x, "V") <= lo ** (2 * d) * hi ** (1 - 2 * d) * (1 + 1e-12)
    assert norm(x, ("frac", 2 * d)) <= lo ** (1 - 2 * d) * hi ** (2 * d) * (1 + 1e-12)


def test_agmon_ratio_bounded(basis4):
    ca = calibrate_agmon(basis4, 0.375, n_fields=300, seed=1)
    rng = np.random.default_rng(7)
    for smooth in (0.5, 1.0, 2.0):
        x = random_field(basis4, rng, size=200, smoothness=smooth)
        assert np.all(np.isfinite(agmon_ratio(x, 0.375)))
    assert 0 < ca < 10


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_conjugate_symmetry_round_trips(seed):
    b = get_basis(3)
    x = random_field(b, np.random.default_rng(seed))
    c = x.coeffs
    for w, v in c.items():
        assert c[w.conjugate()] == pytest.approx(np.conj(v))
    y = SpectralField.from_coeffs(b, c)
    np.testing.assert_allclose(y.coords, x.coords, atol=1e-14)
    # the synthesised grid field is real and projects back to itself
    np.testing.assert_allclose(leray_project(x.grid(), b).coords, x.coords, atol=1e-12)


def test_from_coeffs_rejects_broken_symmetry(basis4):
    with pytest.raises(ValueError):
        SpectralField.from_coeffs(basis4, {WaveIndex(1, 0): 1.0, WaveIndex(-1, 0): 2.0})
    with pytest.raises(ValueError):
        SpectralField.from_coeffs(basis4, {WaveIndex(9, 0): 1.0})


def test_serialization_round_trips(basis4, rng):
    x = random_field(basis4, rng)
    np.testing.assert_allclose(field_from_json(field_to_json(x)).coords, x.coords, atol=1e-15)
    np.testing.assert_array_equal(field_from_bytes(field_to_bytes(x)).coords, x.coords)
    with pytest.raises(ValueError):
        field_from_bytes(b"garbage" + bytes(20))
    bad = field_to_bytes(x)[:-8]
    with pytest.raises(ValueError):
        field_from_bytes(bad)


def test_dense_and_fft_transforms_agree(rng):
    b = get_basis(2)
    assert b.dense
    x = random_field(b, rng, size=3).coords
    g = rng.standard_normal((3, 2, b.M, b.M))
    dense_vv, dense_pg = b.velocity_vorticity(x), b.project_grid(g)
    b.DENSE_MAX_CELLS = 0
    try:
        np.testing.assert_allclose(b.velocity_vorticity(x), dense_vv, atol=1e-13)
        np.testing.assert_allclose(b.project_grid(g), dense_pg, atol=1e-13)
    finally:
        del b.DENSE_MAX_CELLS
