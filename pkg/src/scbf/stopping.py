"""Optimal stopping on a one- or two-mode Galerkin reduction.

The value function in time-to-go form solves phi' = L phi + F - zeta with
phi <= G and zeta in the normal cone.  Each step solves the implicit linear
problem and projects onto {phi <= G}; the projection defect is zeta.  An
independent backward-induction oracle uses Gauss-Hermite quadrature of the
one-step Gaussian transition.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .functionals import Functional, normV2, obstacle_energy
from .operators import DriftKernel, ModelParams, NoiseSpec
from .sde import sample_paths
from .spectral import WaveIndex
from .stats import Estimate, mean_se

log = logging.getLogger(__name__)


def default_coords(p: ModelParams, dims: int) -> tuple:
    """Retained real coordinates: Re of wave (1,0), then Re of wave (0,1)."""
    b = p.basis
    waves = [WaveIndex(1, 0), WaveIndex(0, 1)]
    return tuple(b.coordinate(w, 0) for w in waves[:dims])


@dataclass
class ObstacleProblem:
    """Running cost F, obstacle G, horizon T on a tensor grid over retained coordinates."""

    F: Functional
    G: Functional
    T: float
    grid: tuple
    coords: tuple
    phi0: np.ndarray | None = None

    def __post_init__(self):
        self.grid = tuple(np.asarray(g, dtype=float) for g in self.grid)
        if len(self.grid) not in (1, 2) or len(self.grid) != len(self.coords):
            raise ValueError("dims must be 1 or 2, with one grid axis per retained coordinate")
        for g in self.grid:
            if len(g) < 3 or not np.allclose(np.diff(g), g[1] - g[0]):
                raise ValueError("grid axes must be uniform with at least 3 nodes")

    @property
    def dims(self) -> int:
        return len(self.grid)

    @property
    def shape(self) -> tuple:
        return tuple(len(g) for g in self.grid)

    def nodes(self) -> np.ndarray:
        """Grid nodes as (n_nodes, dims), C order."""
        mesh = np.meshgrid(*self.grid, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def embed(self, y: np.ndarray, dim: int) -> np.ndarray:
        y = np.atleast_2d(y)
        x = np.zeros((len(y), dim))
        for a, c in enumerate(self.coords):
            x[:, c] = y[:, a]
        return x

    def on_nodes(self, f: Functional, dim: int) -> np.ndarray:
        return f.eval(self.embed(self.nodes(), dim))


def default_problem(p: ModelParams, T: float = 1.0, dims: int = 1, half_width: float = 3.0,
                    n_nodes: int = 121, kappa: float = 0.1, s0: float = 4.0) -> ObstacleProblem:
    """F = enstrophy, G = k(|x|^2)|x|^2 with k(s) = kappa min(s, s0)."""
    g = np.linspace(-half_width, half_width, n_nodes)
    return ObstacleProblem(normV2(p.basis), obstacle_energy(kappa, s0), T, (g,) * dims,
                           default_coords(p, dims))


def reduced_drift(y: np.ndarray, p: ModelParams, coords: Sequence[int]) -> np.ndarray:
    """-(mu A x + alpha x + B(x) + beta C(x)) on the retained coordinates, others frozen at 0."""
    y = np.atleast_2d(y)
    x = np.zeros((len(y), p.basis.dim))
    x[:, list(coords)] = y
    nl, _ = DriftKernel(p).evaluate(x)
    full = p.linear_rates() * x + nl
    return -full[:, list(coords)]


@dataclass
class Generator:
    matrix: sp.csr_matrix
    drift: np.ndarray
    diffusion: np.ndarray
    peclet: float


def build_generator(p: ModelParams, q: NoiseSpec | None, problem: ObstacleProblem,
                    drift_override: np.ndarray | None = None) -> Generator:
    """Finite differences of 1/2 sum mu_k d_k^2 + b . grad on the grid.

    Advection is central where the cell Peclet number |b| h / mu_k is at most 1
    and upwind elsewhere, so off-diagonal entries stay nonnegative.
    Boundary rows reflect: the ghost node mirrors the first interior node, and
    advection pointing out of the box is dropped.  The matrix is an M-matrix.
    """
    nodes = problem.nodes()
    shape = problem.shape
    n = nodes.shape[0]
    b = reduced_drift(nodes, p, problem.coords) if drift_override is None else np.atleast_2d(drift_override)
    mu = np.zeros(problem.dims) if q is None else q.eig[list(problem.coords)]
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []
    peclet = 0.0
    for a in range(problem.dims):
        h = problem.grid[a][1] - problem.grid[a][0]
        m = shape[a]
        pos = np.indices(shape)[a].ravel()
        me = idx.ravel()
        up = np.moveaxis(idx, a, 0)
        plus = np.moveaxis(np.concatenate([up[1:], up[-2:-1]], axis=0), 0, a).ravel()
        minus = np.moveaxis(np.concatenate([up[1:2], up[:-1]], axis=0), 0, a).ravel()
        d = 0.5 * mu[a] / h ** 2
        ba = b[:, a]
        # central where it keeps the M-matrix sign pattern, upwind elsewhere
        central = np.abs(ba) * h <= mu[a]
        fwd = np.where(central, 0.5 * ba / h, np.maximum(ba, 0.0) / h)
        bwd = np.where(central, -0.5 * ba / h, np.maximum(-ba, 0.0) / h)
        # at the walls central terms cancel on the mirrored node; outward upwinding is dropped
        fwd = np.where((pos == m - 1) & ~central, 0.0, fwd)
        bwd = np.where((pos == 0) & ~central, 0.0, bwd)
        cp = d + fwd
        cm = d + bwd
        rows += [me, me, me]
        cols += [plus, minus, me]
        vals += [cp, cm, -(cp + cm)]
        if mu[a] > 0:
            peclet = max(peclet, float(np.max(np.abs(ba))) * h / mu[a])
        elif np.any(ba != 0):
            peclet = math.inf
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    L.sum_duplicates()
    if peclet > 2:
        log.warning("cell Peclet number %.3g exceeds 2; refine the grid by a factor %.1f",
                    peclet, peclet / 2)
    return Generator(L, b, mu, peclet)


def vi_step(phi: np.ndarray, dt: float, solver, Fv: np.ndarray, Gv: np.ndarray) -> tuple:
    """(I - dt L) phi* = phi + dt F, then phi_next = min(phi*, G), zeta = (phi* - phi_next)/dt."""
    star = solver(phi + dt * Fv)
    if not np.all(np.isfinite(star)):
        raise np.linalg.LinAlgError("implicit solve produced non-finite values")
    nxt = np.minimum(star, Gv)
    return nxt, (star - nxt) / dt


@dataclass
class VISolution:
    problem: ObstacleProblem
    times: np.ndarray
    phi: np.ndarray
    zeta: np.ndarray
    G: np.ndarray
    F: np.ndarray

    def stopping_set(self, n: int, tol: float = 1e-10) -> np.ndarray:
        return self.phi[n] >= self.G - tol

    def value(self, y: np.ndarray, n: int | None = None) -> np.ndarray:
        n = len(self.times) - 1 if n is None else n
        return _interp(self.problem, self.phi[n], y)


def solve_vi(problem: ObstacleProblem, p: ModelParams, q: NoiseSpec | None, n_steps: int = 200,
             generator: Generator | None = None) -> VISolution:
    """Projected implicit stepping over time-to-go from phi0 (default G) to T."""
    dim = p.basis.dim
    gen = build_generator(p, q, problem) if generator is None else generator
    Gv = problem.on_nodes(problem.G, dim)
    Fv = problem.on_nodes(problem.F, dim)
    phi = np.minimum(Gv if problem.phi0 is None else np.asarray(problem.phi0, float).ravel(), Gv)
    dt = problem.T / n_steps if n_steps else 0.0
    phis, zetas = [phi], [np.zeros_like(phi)]
    if n_steps:
        A = (sp.identity(len(phi), format="csc") - dt * gen.matrix.tocsc())
        solver = spla.factorized(A)
        for _ in range(n_steps):
            phi, z = vi_step(phi, dt, solver, Fv, Gv)
            phis.append(phi)
            zetas.append(z)
    return VISolution(problem, np.linspace(0.0, problem.T, n_steps + 1), np.array(phis),
                      np.array(zetas), Gv, Fv)


def _interp(problem: ObstacleProblem, values: np.ndarray, y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    if problem.dims == 1:
        return np.interp(y[:, 0], problem.grid[0], values)
    lo = np.array([g[0] for g in problem.grid])
    hi = np.array([g[-1] for g in problem.grid])
    f = RegularGridInterpolator(problem.grid, values.reshape(problem.shape), method="linear")
    return f(np.clip(y, lo, hi))


def _interp_cubic(problem: ObstacleProblem, values: np.ndarray, y: np.ndarray) -> np.ndarray:
    # linear interpolation would add O(h^2) diffusion per step once sqrt(mu dt) < h
    y = np.atleast_2d(y)
    lo = np.array([g[0] for g in problem.grid])
    hi = np.array([g[-1] for g in problem.grid])
    yc = np.clip(y, lo, hi)
    if problem.dims == 1:
        return CubicSpline(problem.grid[0], values)(yc[:, 0])
    f = RegularGridInterpolator(problem.grid, values.reshape(problem.shape), method="cubic")
    return f(yc)


def dp_oracle(problem: ObstacleProblem, p: ModelParams, q: NoiseSpec | None, n_steps: int = 200,
              n_quad: int = 20, drift_fn: Callable | None = None) -> np.ndarray:
    """Backward induction V = min(G, F dt + E V(y + b dt + sqrt(mu dt) Z)); returns V at T."""
    dim = p.basis.dim
    nodes = problem.nodes()
    Gv = problem.G.eval(problem.embed(nodes, dim))
    Fv = problem.F.eval(problem.embed(nodes, dim))
    V = Gv.copy()
    if n_steps == 0:
        return V
    dt = problem.T / n_steps
    if drift_fn is None:
        x = problem.embed(nodes, dim)
        kern = DriftKernel(p)
        full = p.linear_rates() * x + kern.evaluate(x)[0]
        bvec = -full[:, list(problem.coords)]
    else:
        bvec = np.atleast_2d(drift_fn(nodes))
    mu = np.zeros(problem.dims) if q is None else q.eig[list(problem.coords)]
    z, w = np.polynomial.hermite_e.hermegauss(n_quad)
    w = w / w.sum()
    if problem.dims == 1:
        pts = [(nodes + bvec * dt + np.sqrt(mu * dt) * zi, wi) for zi, wi in zip(z, w)]
    else:
        pts = [(nodes + bvec * dt + np.sqrt(mu * dt) * np.array([zi, zj]), wi * wj)
               for zi, wi in zip(z, w) for zj, wj in zip(z, w)]
    for _ in range(n_steps):
        cont = Fv * dt + sum(wt * _interp_cubic(problem, V, y) for y, wt in pts)
        V = np.minimum(Gv, cont)
    return V


def sup_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Relative sup-norm distance |a - b|_inf / |b|_inf."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@dataclass(frozen=True)
class SupermartingaleRow:
    t: float
    x_index: int
    PtG: float
    se: float
    G: float
    violated: bool


def check_supermartingale_G(G: Functional, p: ModelParams, q: NoiseSpec, times: Sequence[float],
                            x_samples: np.ndarray, n_paths: int = 1000, dt: float = 1e-2,
                            seed: int = 0) -> list:
    """Monte-Carlo P_t G(x) against G(x); violations beyond 3 SE are flagged."""
    x_samples = np.atleast_2d(x_samples)
    steps = [int(round(t / dt)) for t in times]
    rows = []
    for i, x in enumerate(x_samples):
        ids = np.arange(i * n_paths, (i + 1) * n_paths)
        rec = sample_paths(x, p, q, dt, [s for s in steps if s > 0] or [0], seed, ids)
        g0 = float(G.eval(x[None])[0])
        pos = {s: j for j, s in enumerate(sorted(set(s for s in steps if s > 0)))}
        for t, s in zip(times, steps):
            if s == 0:
                rows.append(SupermartingaleRow(float(t), i, g0, 0.0, g0, False))
                continue
            e = mean_se(G.eval(rec[:, pos[s]]))
            rows.append(SupermartingaleRow(float(t), i, e.value, e.se, g0, e.value - g0 > 3 * e.se))
    return rows


@dataclass
class Regions:
    stop: np.ndarray
    cont: np.ndarray


def extract_regions(sol: VISolution, tol: float = 1e-10) -> Regions:
    """Per-time stopping masks {phi = G} and continuation masks {phi < G}."""
    stop = sol.phi >= sol.G[None] - tol
    return Regions(stop, ~stop)


@dataclass(frozen=True)
class StoppedCost:
    estimate: Estimate
    stop_times: np.ndarray
    grid_value: float


def simulate_stopped_cost(sol: VISolution, y0: Sequence[float], p: ModelParams, q: NoiseSpec | None,
                          n_paths: int = 10_000, seed: int = 0, tol: float = 1e-10) -> StoppedCost:
    """Simulate the reduced dynamics at the solution's step and stop on first entry into S.

    Time-to-go index m runs from the final index down to 0; the path pays F dt
    per continued step and G at the stopping time (or at the horizon).
    """
    prob = sol.problem
    dim = p.basis.dim
    n_steps = len(sol.times) - 1
    dt = prob.T / n_steps if n_steps else 0.0
    mu = np.zeros(prob.dims) if q is None else q.eig[list(prob.coords)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5709]))
    y = np.tile(np.asarray(y0, dtype=float), (n_paths, 1))
    alive = np.ones(n_paths, dtype=bool)
    cost = np.zeros(n_paths)
    tau = np.full(n_paths, prob.T)
    for k in range(n_steps + 1):
        m = n_steps - k
        gap = _interp(prob, sol.phi[m] - sol.G, y)
        stop_now = alive & ((gap >= -tol) | (m == 0))
        if np.any(stop_now):
            cost[stop_now] += prob.G.eval(prob.embed(y[stop_now], dim))
            tau[stop_now] = k * dt
            alive &= ~stop_now
        if not np.any(alive) or m == 0:
            break
        z = rng.standard_normal(y.shape)
        cost[alive] += prob.F.eval(prob.embed(y[alive], dim)) * dt
        b = reduced_drift(y, p, prob.coords)
        y = np.where(alive[:, None], y + b * dt + np.sqrt(mu * dt) * z, y)
    return StoppedCost(mean_se(cost), tau, float(sol.value(np.asarray(y0, float)[None])[0]))


def solution_csv(sol: VISolution, n: int | None = None) -> str:
    """Grid table at time-to-go index n: coordinates, phi, zeta, region flag (1 = stop)."""
    n = len(sol.times) - 1 if n is None else n
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dims = sol.problem.dims
    w.writerow([f"y{a}" for a in range(dims)] + ["phi", "zeta", "stop"])
    stop = sol.stopping_set(n)
    for node, ph, z, s in zip(sol.problem.nodes(), sol.phi[n], sol.zeta[n], stop):
        w.writerow([repr(float(v)) for v in node] + [repr(float(ph)), repr(float(z)), int(s)])
    return buf.getvalue()


def boundary_csv(sol: VISolution) -> str:
    """Stopping-set nodes adjacent to the continuation set, per time-to-go index."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dims = sol.problem.dims
    w.writerow(["t_to_go"] + [f"y{a}" for a in range(dims)])
    nodes = sol.problem.nodes()
    shape = sol.problem.shape
    for n, t in enumerate(sol.times):
        s = sol.stopping_set(n).reshape(shape)
        edge = np.zeros_like(s)
        for a in range(dims):
            d = np.diff(s.astype(int), axis=a) != 0
            lo = [slice(None)] * dims
            hi = [slice(None)] * dims
            lo[a], hi[a] = slice(0, -1), slice(1, None)
            edge[tuple(lo)] |= d
            edge[tuple(hi)] |= d
        for node in nodes[(edge & s).ravel()]:
            w.writerow([repr(float(t))] + [repr(float(v)) for v in node])
    return buf.getvalue()
