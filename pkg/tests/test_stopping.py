import math

import numpy as np
import pytest

from scbf import functionals as fn
from scbf import stopping as stp
from scbf.operators import ModelParams, NoiseSpec


@pytest.fixture(scope="module")
def setup():
    p = ModelParams(N=2)
    q = NoiseSpec(np.full(p.basis.dim, 0.5), 2.5, p.N, p.L)
    return p, q


def problem(p, F, G, T=0.5, n=61, w=3.0):
    return stp.ObstacleProblem(F, G, T, (np.linspace(-w, w, n),), stp.default_coords(p, 1))


def test_problem_validation(setup):
    p, _ = setup
    with pytest.raises(ValueError):
        stp.ObstacleProblem(fn.normH2(), fn.normH2(), 1.0, (np.array([0.0, 1.0, 3.0]),), (0,))
    with pytest.raises(ValueError):
        stp.ObstacleProblem(fn.normH2(), fn.normH2(), 1.0, (np.linspace(0, 1, 5),), (0, 1))


def test_generator_on_polynomials(setup):
    p, q = setup
    prob = problem(p, fn.normH2(), fn.normH2())
    y = prob.grid[0]
    inner = slice(1, -1)
    gen = stp.build_generator(p, q, prob, drift_override=np.zeros((len(y), 1)))
    np.testing.assert_allclose((gen.matrix @ (y * y))[inner], 0.5, rtol=1e-9)
    gen = stp.build_generator(p, q, prob, drift_override=np.full((len(y), 1), 0.3))
    np.testing.assert_allclose((gen.matrix @ y)[inner], 0.3, rtol=1e-9)
    full = stp.build_generator(p, q, prob)
    np.testing.assert_allclose(full.matrix @ np.ones(len(y)), 0.0, atol=1e-9)
    off = full.matrix - np.diag(full.matrix.diagonal())
    assert off.min() >= 0.0
    assert full.peclet < 2


def test_vi_step_without_constraint():
    L = np.array([[-1.0, 1.0], [1.0, -1.0]])
    dt = 0.1
    A = np.eye(2) - dt * L
    phi = np.array([1.0, 2.0])
    nxt, z = stp.vi_step(phi, dt, lambda r: np.linalg.solve(A, r), np.array([0.5, 0.5]), np.full(2, 1e9))
    np.testing.assert_allclose(nxt, np.linalg.solve(A, phi + dt * 0.5))
    np.testing.assert_array_equal(z, 0.0)


def test_full_contact(setup):
    p, q = setup
    sol = stp.solve_vi(problem(p, fn.normV2(p.basis), fn.constant(0.0)), p, q, n_steps=50)
    np.testing.assert_array_equal(sol.phi, 0.0)
    assert np.all(sol.zeta >= 0)
    r = stp.extract_regions(sol)
    assert r.stop.all() and not r.cont.any()


def test_dp_oracle_trivial_cases(setup):
    p, q = setup
    prob = problem(p, fn.constant(1.0), fn.constant(2.0))
    np.testing.assert_array_equal(stp.dp_oracle(prob, p, q, n_steps=0), 2.0)
    # stopping at once is optimal when continuing costs and G is flat
    np.testing.assert_allclose(stp.dp_oracle(prob, p, q, n_steps=20), 2.0)


def test_pure_decay_without_noise():
    # single linear mode, G = |x|^2, no running cost: never stop, V = y^2 e^{-4T}
    p = ModelParams(N=2, beta=0.0)
    prob = problem(p, fn.constant(0.0), fn.normH2(), T=0.5, n=121)
    y = prob.grid[0]
    exact = y * y * math.exp(-2 * 2 * 0.5)
    inner = np.abs(y) <= 2.0
    dp = stp.dp_oracle(prob, p, None, n_steps=400)
    np.testing.assert_allclose(dp[inner], exact[inner], rtol=5e-3, atol=1e-3)
    vi = stp.solve_vi(prob, p, None, n_steps=400).phi[-1]
    np.testing.assert_allclose(vi[inner], exact[inner], rtol=0.1, atol=0.02)


def test_obstacle_and_complementarity(setup):
    p, q = setup
    prob = stp.default_problem(p, T=0.5, n_nodes=81)
    sol = stp.solve_vi(prob, p, q, n_steps=100)
    assert np.all(sol.phi <= sol.G[None])
    assert np.all(sol.zeta >= 0)
    assert np.all(sol.zeta * (sol.G[None] - sol.phi) == 0.0)
    r = stp.extract_regions(sol)
    assert np.array_equal(r.stop, ~r.cont)
    assert r.cont[-1].any() and r.stop[-1].any()


def test_monotone_in_obstacle(setup):
    p, q = setup
    base = stp.default_problem(p, T=0.5, n_nodes=81)
    lower = stp.solve_vi(base, p, q, n_steps=100).phi
    raised = stp.ObstacleProblem(base.F, base.G.shifted(0.5), base.T, base.grid, base.coords)
    upper = stp.solve_vi(raised, p, q, n_steps=100).phi
    assert np.all(lower <= upper + 1e-12)


def test_vi_agrees_with_dp(setup):
    p, q = setup
    prob = stp.default_problem(p, T=0.5, n_nodes=121)
    vi = stp.solve_vi(prob, p, q, n_steps=400).phi[-1]
    dp = stp.dp_oracle(prob, p, q, n_steps=400)
    assert stp.sup_gap(vi, dp) <= 0.05


def test_supermartingale_of_constant(setup):
    p, q = setup
    rows = stp.check_supermartingale_G(fn.constant(1.5), p, q, [0.0, 0.1], np.zeros((2, p.basis.dim)),
                                       n_paths=16, dt=0.05)
    assert len(rows) == 4
    for r in rows:
        assert r.PtG == pytest.approx(1.5) and not r.violated


def test_stopped_cost_immediate_stop(setup):
    p, _ = setup
    prob = problem(p, fn.constant(1.0), fn.constant(2.0))
    sol = stp.solve_vi(prob, p, None, n_steps=20)
    c = stp.simulate_stopped_cost(sol, [0.5], p, None, n_paths=10)
    assert c.estimate.value == 2.0 and np.all(c.stop_times == 0.0) and c.grid_value == 2.0


def test_csv_tables(setup):
    p, q = setup
    sol = stp.solve_vi(stp.default_problem(p, T=0.2, n_nodes=21), p, q, n_steps=10)
    lines = stp.solution_csv(sol).splitlines()
    assert lines[0] == "y0,phi,zeta,stop" and len(lines) == 22
    assert stp.boundary_csv(sol).splitlines()[0] == "t_to_go,y0"
