"""Kolmogorov operator, Monte-Carlo semigroup and resolvent, and their diagnostics.

Resolvents are time quadratures of discounted path averages.  Each step of
length dt gets the exact discount weight; the remainder after T_max is closed
by e^{-lambda T_max} f(X(T_max)) / lambda.  Gradients use the variation flow
along the same paths, so values and gradients share common random numbers.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .functionals import Functional
from .measure import EmpiricalMeasure
from .operators import (DriftKernel, ModelParams, NoiseSpec, forchheimer_grid, self_convection,
                        truncation_scales)
from .sde import Integrator, BatchNoise, StepInfo, sample_paths
from .spectral import SpectralField
from .stats import Estimate, combined_se, mean_se

log = logging.getLogger(__name__)


def _coords(x):
    return x.coords if isinstance(x, SpectralField) else np.asarray(x, dtype=float)


# generator on cylinder-type functionals

def drift(q: np.ndarray, p: ModelParams) -> np.ndarray:
    """mu A x + alpha x + B(x) + beta C(x) on coordinate batches."""
    nl, _ = DriftKernel(p).evaluate(q)
    return p.linear_rates() * q + nl


def apply_N0(f: Functional, x, p: ModelParams, q: NoiseSpec) -> np.ndarray:
    """(N0 f)(x) = 1/2 sum_k mu_k (D^2 f e_k, e_k) - (drift(x), Df(x))."""
    if f.grad is None or (f.hess_vec is None and f.hess_trace is None):
        raise ValueError(f"{f.name} lacks the derivatives needed by the generator")
    c = _coords(x)
    return 0.5 * f.weighted_hessian_trace(c, q.eig) - np.sum(drift(c, p) * f.grad(c), axis=-1)


def sqrtQ_grad_sq(f: Functional, x, q: NoiseSpec) -> np.ndarray:
    """|sqrt(Q) Df(x)|^2."""
    g = f.grad(_coords(x))
    return np.sum(q.eig * g * g, axis=-1)


def invariance_residuals(fs: Sequence[Functional], m: EmpiricalMeasure, q: NoiseSpec) -> list:
    """Empirical integrals of N0 f over the measure, one Estimate per functional."""
    return [m.integrate(apply_N0(f, m.snapshots, m.params, q)) for f in fs]


@dataclass(frozen=True)
class CarreDuChamp:
    generator_term: Estimate
    gradient_term: Estimate
    residual: float
    se: float

    @property
    def passes(self) -> bool:
        return self.residual <= 3 * self.se


def carre_du_champ_residual(f: Functional, m: EmpiricalMeasure, q: NoiseSpec) -> CarreDuChamp:
    """|int N0 f . f + 1/2 int |sqrt(Q) Df|^2| with the combined SE of both integrals."""
    x = m.snapshots
    a = m.integrate(apply_N0(f, x, m.params, q) * f.eval(x))
    b = m.integrate(0.5 * sqrtQ_grad_sq(f, x, q))
    return CarreDuChamp(a, b, abs(a.value + b.value), combined_se(a.se, b.se))


@dataclass(frozen=True)
class Dissipativity:
    lhs: float
    rhs: float
    se: float

    @property
    def passes(self) -> bool:
        return self.lhs <= self.rhs + 3 * self.se


def dissipativity_check(f: Functional, m: EmpiricalMeasure, q: NoiseSpec, lam: float) -> Dissipativity:
    """|f| <= (1/lambda) |lambda f - N0 f| in L2 of the empirical measure."""
    x = m.snapshots
    fv = f.eval(x)
    g = lam * fv - apply_N0(f, x, m.params, q)
    a = m.integrate(fv * fv)
    b = m.integrate(g * g)
    lhs, rhs = math.sqrt(a.value), math.sqrt(b.value) / lam
    # delta method on the square roots
    se = combined_se(a.se / (2 * max(lhs, 1e-300)), b.se / (2 * lam * lam * max(rhs, 1e-300)))
    return Dissipativity(lhs, rhs, se)


# semigroup

def semigroup_eval(f: Functional, x, t: float, p: ModelParams, q: NoiseSpec | None,
                   n_paths: int = 1000, dt: float = 1e-3, seed: int = 0,
                   stream_offset: int = 0) -> Estimate:
    """Monte-Carlo (P_t f)(x) = E f(X(t, x))."""
    c = _coords(x)
    if t < 0:
        raise ValueError("t must be nonnegative")
    n = int(round(t / dt))
    if n == 0:
        return Estimate(float(f.eval(c)), 0.0)
    ids = np.arange(stream_offset, stream_offset + n_paths)
    if q is None:
        ids = ids[:1]
    xs = sample_paths(c, p, q, dt, [n], seed, ids)[:, 0]
    vals = f.eval(xs)
    if len(vals) == 1:
        return Estimate(float(vals[0]), 0.0)
    return mean_se(vals)


def semigroup_nested(f: Functional, x, t: float, s: float, p: ModelParams, q: NoiseSpec,
                     n_outer: int = 200, n_inner: int = 50, dt: float = 1e-3, seed: int = 0,
                     stream_offset: int = 0) -> Estimate:
    """P_t(P_s f)(x) with inner streams disjoint from the outer ones."""
    c = _coords(x)
    nt, ns = int(round(t / dt)), int(round(s / dt))
    outer = np.arange(stream_offset, stream_offset + n_outer)
    mid = sample_paths(c, p, q, dt, [nt], seed, outer)[:, 0] if nt else np.tile(c, (n_outer, 1))
    inner_base = stream_offset + n_outer
    ids = inner_base + np.arange(n_outer * n_inner)
    starts = np.repeat(mid, n_inner, axis=0)
    ends = sample_paths(starts, p, q, dt, [ns], seed, ids)[:, 0] if ns else starts
    inner_means = f.eval(ends).reshape(n_outer, n_inner).mean(axis=1)
    return mean_se(inner_means)


# resolvent

@dataclass
class SampleCloud:
    """Points drawn from an empirical measure, with optional values and sqrt(Q)-gradients."""

    basis: object
    points: np.ndarray
    values: np.ndarray | None = None
    grads: np.ndarray | None = None
    source_index: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.values is not None and not np.all(np.isfinite(self.values)):
            raise ValueError("cloud values must be finite")

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_measure(cls, m: EmpiricalMeasure, n: int, seed: int = 0) -> "SampleCloud":
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(m.n, size=min(n, m.n), replace=False))
        return cls(m.params.basis, m.snapshots[idx].copy(), source_index=idx)

    def l2(self, v: np.ndarray) -> float:
        """Empirical L2 norm over the cloud; vector values are normed along the last axis."""
        v = np.asarray(v, dtype=float)
        sq = v * v if v.ndim == 1 else np.sum(v * v, axis=-1)
        return math.sqrt(float(np.mean(sq)))


# features map coordinate batches (P, dim) to (values (P, F), gradients (P, F, dim))
Features = Callable[[np.ndarray], tuple]


def functional_features(fs: Sequence[Functional]) -> Features:
    def feats(x):
        vals = np.stack([f.eval(x) for f in fs], axis=-1)
        grads = np.stack([f.grad(x) for f in fs], axis=-2) if all(f.grad is not None for f in fs) else None
        return vals, grads
    return feats


@dataclass
class ResolventData:
    """Discounted path integrals of F features at each cloud point for several lambdas.

    values[l, i, f] estimates R(lambda_l) f(x_i); grads[l, i, f, d] estimates
    (D R(lambda_l) f(x_i), h_d) for the seed directions h_d.  The *_blocks arrays
    hold the same estimates per block of paths, for jackknife errors.
    """

    lambdas: np.ndarray
    points: np.ndarray
    directions: np.ndarray | None
    values: np.ndarray
    values_blocks: np.ndarray
    grads: np.ndarray | None
    grads_blocks: np.ndarray | None
    n_paths: int
    dt: float
    T_max: float

    def jackknife_se(self, stat: Callable[[np.ndarray, np.ndarray | None], float]) -> float:
        """SE of stat(values, grads) by deleting one path block at a time."""
        B = self.values_blocks.shape[2]
        reps = []
        for k in range(B):
            keep = np.arange(B) != k
            v = self.values_blocks[:, :, keep].mean(axis=2)
            g = self.grads_blocks[:, :, keep].mean(axis=2) if self.grads_blocks is not None else None
            reps.append(stat(v, g))
        reps = np.asarray(reps)
        return float(np.sqrt((B - 1) / B * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0)))


def default_horizon(lambdas, tol: float = 1e-4) -> float:
    return math.log(1.0 / tol) / float(np.min(lambdas))


def resolvent_data(points: np.ndarray, p: ModelParams, q: NoiseSpec, lambdas: Sequence[float],
                   features: Features, *, n_paths: int = 32, dt: float = 1e-2,
                   T_max: float | None = None, seed: int = 0, stream_base: int = 0,
                   directions: np.ndarray | None = None, n_blocks: int = 8,
                   max_batch: int = 6400, workers: int | None = None) -> ResolventData:
    """Path integrals for resolvent values and (optionally) directional gradients.

    Path j of point i uses stream stream_base + i * n_paths + j.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas <= 0):
        raise ValueError("lambda must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_pts, dim = points.shape
    T_max = default_horizon(lambdas) if T_max is None else float(T_max)
    n_steps = max(1, int(math.ceil(T_max / dt - 1e-9)))
    T_max = n_steps * dt
    if n_paths % n_blocks:
        raise ValueError("n_paths must be a multiple of n_blocks")
    integ = Integrator(p, q, dt, workers)
    step_w = (1 - np.exp(-lambdas * dt)) / lambdas
    tail_w = np.exp(-lambdas * T_max) / lambdas
    pts_per_batch = max(1, max_batch // n_paths)
    vals_out, grads_out = [], []
    for start in range(0, n_pts, pts_per_batch):
        pts = points[start:start + pts_per_batch]
        P = len(pts) * n_paths
        ids = stream_base + start * n_paths + np.arange(P)
        q0 = np.repeat(pts, n_paths, axis=0)
        xi0 = None if directions is None else np.broadcast_to(directions, (P,) + directions.shape)
        acc = {"v": None, "g": None}

        def obs(s: StepInfo):
            w = tail_w if s.dW is None else step_w * np.exp(-lambdas * s.n * dt)
            fv, fg = features(s.q)
            v = fv[:, None, :] * w[None, :, None]
            acc["v"] = v if acc["v"] is None else acc["v"] + v
            if s.xi is not None:
                gd = np.matmul(fg, np.swapaxes(s.xi, -1, -2))
                g = gd[:, None] * w[None, :, None, None]
                acc["g"] = g if acc["g"] is None else acc["g"] + g

        noise = BatchNoise(seed, ids, dt, dim)
        integ.run(q0, n_steps, noise, xi0=xi0, observer=obs)
        vals_out.append(acc["v"].reshape((len(pts), n_blocks, n_paths // n_blocks) + acc["v"].shape[1:])
                        .mean(axis=2))
        if acc["g"] is not None:
            grads_out.append(acc["g"].reshape((len(pts), n_blocks, n_paths // n_blocks) + acc["g"].shape[1:])
                             .mean(axis=2))
    vb = np.moveaxis(np.concatenate(vals_out), 2, 0)  # (L, n, B, F)
    gb = np.moveaxis(np.concatenate(grads_out), 2, 0) if grads_out else None
    return ResolventData(lambdas, points, directions, vb.mean(axis=2), vb,
                         None if gb is None else gb.mean(axis=2), gb, n_paths, dt, T_max)


def sqrtQ_directions(q: NoiseSpec) -> np.ndarray:
    """Seed directions sqrt(mu_k) e_k, so gradient components come out already weighted."""
    return np.diag(q.sqrt_eig)


def _truncation_flag(f: Functional, lam: float, T_max: float, tol: float) -> bool:
    if f.sup_bound is None:
        return True
    return math.exp(-lam * T_max) * f.sup_bound > tol


def resolvent_eval(f: Functional, x, lam: float, p: ModelParams, q: NoiseSpec,
                   n_paths: int = 256, T_max: float | None = None, dt: float = 1e-2,
                   seed: int = 0, stream_base: int = 0, tol: float = 1e-4) -> Estimate:
    """Monte-Carlo R(lambda) f(x) = int_0^inf e^{-lambda t} P_t f(x) dt."""
    n_blocks = 8 if n_paths % 8 == 0 else 1
    d = resolvent_data(_coords(x)[None], p, q, [lam], functional_features([f]), n_paths=n_paths,
                       dt=dt, T_max=T_max, seed=seed, stream_base=stream_base, n_blocks=n_blocks)
    vb = d.values_blocks[0, 0, :, 0]
    se = float(np.std(vb, ddof=1) / math.sqrt(len(vb))) if len(vb) > 1 else math.inf
    flag = _truncation_flag(f, lam, d.T_max, tol)
    note = "tail closed by frozen-state extrapolation" if flag else ""
    return Estimate(float(d.values[0, 0, 0]), se, flag, note)


def resolvent_sqrtQ_gradient(f: Functional, x, lam: float, p: ModelParams, q: NoiseSpec,
                             n_paths: int = 256, T_max: float | None = None, dt: float = 1e-2,
                             seed: int = 0, stream_base: int = 0) -> tuple:
    """sqrt(Q) D R(lambda) f(x) as a SpectralField, with per-coordinate SE."""
    if f.grad is None:
        raise ValueError(f"{f.name} has no gradient")
    c = _coords(x)
    d = resolvent_data(c[None], p, q, [lam], functional_features([f]), n_paths=n_paths, dt=dt,
                       T_max=T_max, seed=seed, stream_base=stream_base,
                       directions=sqrtQ_directions(q), n_blocks=8)
    gb = d.grads_blocks[0, 0, :, 0]
    se = np.std(gb, axis=0, ddof=1) / math.sqrt(gb.shape[0])
    return SpectralField(p.basis, d.grads[0, 0, 0]), se


def resolvent_on_cloud(cloud: SampleCloud, fs: Sequence[Functional], lambdas: Sequence[float],
                       p: ModelParams, q: NoiseSpec, with_grad: bool = True, **kw) -> ResolventData:
    dirs = sqrtQ_directions(q) if with_grad else None
    return resolvent_data(cloud.points, p, q, lambdas, functional_features(fs), directions=dirs, **kw)


@dataclass(frozen=True)
class ResolventBound:
    lam: float
    phi_norm: float
    phi_bound: float
    grad_norm: float
    grad_bound: float
    phi_se: float
    grad_se: float

    def passes(self, margin: float = 0.05) -> tuple:
        ok_phi = self.phi_norm <= self.phi_bound * (1 + margin) + 3 * self.phi_se
        ok_grad = self.grad_norm <= self.grad_bound * (1 + margin) + 3 * self.grad_se
        return ok_phi, ok_grad


def resolvent_bounds(cloud: SampleCloud, f: Functional, data: ResolventData, feature: int = 0) -> list:
    """|R f| <= |f| / lambda and |sqrt(Q) D R f| <= sqrt(2/lambda) |f| in L2(cloud)."""
    fn = cloud.l2(f.eval(cloud.points))
    out = []
    for l, lam in enumerate(data.lambdas):
        def phi_norm(v, g, l=l):
            return cloud.l2(v[l, :, feature])

        def grad_norm(v, g, l=l):
            return cloud.l2(g[l, :, feature])

        out.append(ResolventBound(
            float(lam), phi_norm(data.values, data.grads), fn / lam,
            grad_norm(data.values, data.grads), math.sqrt(2 / lam) * fn,
            data.jackknife_se(phi_norm), data.jackknife_se(grad_norm)))
    return out


# perturbation operator

@dataclass(frozen=True)
class TLambda:
    values: np.ndarray
    flagged: bool
    F_sup: float


def apply_T_lambda(F: Callable[[np.ndarray], np.ndarray], F_sup: float, grads: np.ndarray,
                   points: np.ndarray, lam: float) -> TLambda:
    """T_lambda f(x) = <F(x), sqrt(Q) D R(lambda) f(x)> from precomputed sqrt(Q)-gradients."""
    Fx = np.asarray(F(points), dtype=float)
    vals = np.sum(Fx * grads, axis=-1)
    flagged = lam <= 2 * F_sup ** 2
    if flagged:
        log.warning("lambda %.3g outside the perturbation regime (needs > %.3g)", lam, 2 * F_sup ** 2)
    return TLambda(vals, flagged, F_sup)


# truncation residuals

@dataclass(frozen=True)
class TruncationResidual:
    eps: float
    residual_B: float
    residual_C: float
    fraction_truncated: float


def truncation_residuals(f: Functional, cloud: SampleCloud, p: ModelParams, q: NoiseSpec,
                         eps_levels: Sequence[float], lam: float = 1.0, **kw) -> list:
    """int |(B_eps - B, D phi_eps)|^2 and int |(C_eps - C, D phi_eps)|^2 over the cloud.

    phi_eps = R(lambda) f for the truncated dynamics; full gradients use unit seed directions.
    """
    x = cloud.points
    b = p.basis
    g = b.velocity_vorticity(x)
    Bx = b.project_grid(self_convection(b, g)) if p.convection else np.zeros_like(x)
    Cx = b.project_grid(forchheimer_grid(g, p.r))
    normV = np.sqrt(np.sum(b.eigenvalues * x * x, axis=-1))
    out = []
    for eps in eps_levels:
        pe = p.replace(eps=float(eps))
        d = resolvent_data(x, pe, q, [lam], functional_features([f]), directions=np.eye(b.dim), **kw)
        Dphi = d.grads[0, :, 0]
        sB, sC, _, _ = truncation_scales(pe, normV)
        rB = float(np.mean(((sB - 1) * np.sum(Bx * Dphi, axis=-1)) ** 2))
        rC = float(np.mean(((sC - 1) * np.sum(Cx * Dphi, axis=-1)) ** 2))
        out.append(TruncationResidual(float(eps), rB, rC, float(np.mean(normV * eps > 1))))
    return out


def csv_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (float, np.floating, int, np.integer)):
        return repr(float(v))
    return v


def diagnostics_csv(rows: Sequence[tuple]) -> str:
    """CSV with columns check, value, bound_or_target, SE, pass."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "value", "bound_or_target", "SE", "pass"])
    for r in rows:
        w.writerow([r[0]] + [csv_cell(v) for v in r[1:]])
    return buf.getvalue()
