import math

import numpy as np
import pytest

from scbf import functionals as fn
from scbf.measure import (
    EmpiricalMeasure, check_conditions, energy_trace_residual, ergodicity_gap, kb_estimate, moment,
    moment_report_csv,
)
from scbf.operators import ModelParams, NoiseSpec
from scbf.spectral import SpectralField


@pytest.fixture(scope="module")
def two_measures():
    p = ModelParams(N=2)
    q = NoiseSpec.power_law(p.basis, 0.5)
    x0a = SpectralField.zeros(p.basis)
    x0b = SpectralField.unit(p.basis, (1, 0)) * 2.0
    ma = kb_estimate(x0a, p, q, 20.0, streams=range(16), dt=0.01, seed=1)
    mb = kb_estimate(x0b, p, q, 20.0, streams=range(100, 116), dt=0.01, seed=1)
    return p, q, ma, mb


def test_zero_noise_measure_collapses():
    p = ModelParams(N=2)
    m = kb_estimate(SpectralField.unit(p.basis, (1, 1)) * 3.0, p, None, 15.0, burn_in=10.0,
                     streams=range(2), dt=0.01)
    assert np.max(np.abs(m.snapshots)) < 1e-3
    assert moment(m, "A2").value < 1e-6
    for f in ("expH", "V2_expH", "Lr_expH"):
        r = moment(m, f, sigma=1.0)
        assert r.value == pytest.approx(1.0 if f == "expH" else 0.0, abs=1e-6)


def test_weights_and_meta(two_measures):
    p, _, ma, _ = two_measures
    assert ma.weights.sum() == pytest.approx(1.0)
    assert ma.meta["stride"] >= ma.meta["decorrelation_stride"] - ma.meta["dt"] / 2
    with pytest.raises(ValueError):
        kb_estimate(SpectralField.zeros(p.basis), p, None, 0.1)


def test_measures_from_different_starts_agree(two_measures):
    _, _, ma, mb = two_measures
    a = ma.integrate(np.sum(ma.snapshots ** 2, axis=1))
    b = mb.integrate(np.sum(mb.snapshots ** 2, axis=1))
    assert abs(a.value - b.value) <= 3 * math.hypot(a.se, b.se)


def test_exponential_moment_bounds(two_measures):
    p, q, ma, _ = two_measures
    sigma = 0.5 * check_conditions(p, q).improve_bound
    for f in ("expH", "V2_expH", "Lr_expH"):
        r = moment(ma, f, q, sigma=sigma)
        assert not r.flagged and r.within_bound
    assert moment(ma, "expH", q, sigma=1e3).flagged


def test_energy_trace_identity(two_measures):
    _, q, ma, mb = two_measures
    for m in (ma, mb):
        e = energy_trace_residual(m, q)
        assert abs(e.value) <= 3 * e.se


def test_second_moment_of_A_stable_under_doubling():
    p = ModelParams(N=2)
    q = NoiseSpec.power_law(p.basis, 0.5)
    x0 = SpectralField.zeros(p.basis)
    a = moment(kb_estimate(x0, p, q, 20.0, streams=range(16), dt=0.01, seed=2), "A2")
    b = moment(kb_estimate(x0, p, q, 40.0, streams=range(16), dt=0.01, seed=2), "A2")
    assert np.isfinite(a.value) and abs(a.value - b.value) <= 3 * math.hypot(a.se, b.se)


def test_weighted_moment_is_finite(two_measures):
    _, q, ma, _ = two_measures
    r = moment(ma, "weighted", q, nu=0.5, power=2)
    assert np.isfinite(r.value) and r.bound is None


def test_condition_arithmetic():
    p = ModelParams(N=2)
    rep = check_conditions(p, NoiseSpec.power_law(p.basis, 0.5))
    assert rep.cond419 and rep.lhs419 == pytest.approx(3.0) and rep.rhs419 == pytest.approx(2.0)
    assert rep.improve_bound == pytest.approx(3.0)
    assert rep.gamma1 == 1.0 and "gamma1" in rep.note
    p2 = ModelParams(N=2, mu=0.1, alpha=0.0)
    rep2 = check_conditions(p2, NoiseSpec.power_law(p2.basis, 1.0))
    assert not rep2.cond419 and rep2.lhs419 == pytest.approx(0.001)
    assert rep2.cond439 == (rep2.lhs439 > rep2.rhs439)
    assert "cond419" in rep.table()


def test_ergodicity_gap_trivial_cases():
    p = ModelParams(N=2)
    q = NoiseSpec.power_law(p.basis, 0.5)
    x0 = SpectralField.unit(p.basis, (1, 0))
    tests = [fn.normH2(), fn.cylinder(np.ones(p.basis.dim) * 0.3)]
    same = ergodicity_gap(x0, x0, p, q, tests, 1.0, n_paths=50, dt=0.01)
    assert same.gap == 0.0
    g0 = ergodicity_gap(SpectralField.zeros(p.basis), x0, p, q, [fn.normH2()], 0.0, n_paths=10, dt=0.01)
    assert g0.gap == pytest.approx(1.0)


def test_ergodicity_gap_decreases():
    p = ModelParams(N=2)
    q = NoiseSpec.power_law(p.basis, 0.5)
    xa = SpectralField.zeros(p.basis)
    xb = SpectralField.unit(p.basis, (1, 0)) * 1.5
    gaps = [ergodicity_gap(xa, xb, p, q, [fn.normH2()], t, n_paths=2000, dt=0.01, seed=3)
            for t in (1.0, 2.0, 4.0)]
    for a, b in zip(gaps, gaps[1:]):
        assert a.gap - b.gap > 3 * math.hypot(a.se, b.se)


def test_export_round_trip(tmp_path, two_measures):
    _, q, ma, _ = two_measures
    sub = ma.subset(slice(0, 12))
    sub.export(tmp_path / "m")
    back = EmpiricalMeasure.load(tmp_path / "m")
    np.testing.assert_array_equal(back.snapshots, sub.snapshots)
    np.testing.assert_array_equal(back.traj_ids, sub.traj_ids)
    assert back.meta == sub.meta
    text = moment_report_csv([moment(sub, "expH", q, sigma=0.5)])
    assert text.splitlines()[0] == "functional,value,SE,bound,pass"
