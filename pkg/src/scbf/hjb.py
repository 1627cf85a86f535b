"""Stationary HJB equation by Picard iteration, discounted costs and the verification identity.

The unknown psi solves psi = f - g(sqrt(Q) D (lambda - N)^{-1} psi).  It is
represented on a dictionary: f itself, a constant, and the linear and quadratic
monomials of the coordinates.  Resolvent values and sqrt(Q)-gradients of every
dictionary element are computed once on the cloud with frozen noise, so each
Picard step is a least-squares projection in coefficient space.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .functionals import Functional
from .kolmogorov import ResolventData, SampleCloud, resolvent_data, sqrtQ_directions
from .operators import ModelParams, NoiseSpec
from .sde import BatchNoise, Integrator, StepInfo
from .stats import Estimate, combined_se, mean_se

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hamiltonian:
    """g applied to the norm of p, its Lipschitz constant, the ball radius and the feedback map."""

    kind: str
    R: float
    lip: float

    def g(self, pv: np.ndarray) -> np.ndarray:
        n = np.sqrt(np.sum(np.asarray(pv) ** 2, axis=-1))
        if self.kind == "zero":
            return np.zeros_like(n)
        if self.kind == "quadratic":
            return 0.5 * n * n
        return np.where(n <= self.R, 0.5 * n * n, self.R * n - 0.5 * self.R ** 2)

    def feedback(self, pv: np.ndarray) -> np.ndarray:
        """Minimiser of (U, p) + h(U) over the ball: -p inside, -R p/|p| outside."""
        pv = np.asarray(pv, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(pv)
        if self.kind == "quadratic":
            return -pv
        n = np.sqrt(np.sum(pv * pv, axis=-1, keepdims=True))
        return -pv * np.minimum(1.0, self.R / np.where(n > 0, n, 1.0))

    def running_cost(self, U: np.ndarray) -> np.ndarray:
        """h(U) = |U|^2 / 2 on the admissible ball."""
        return 0.5 * np.sum(np.asarray(U) ** 2, axis=-1)

    def excess(self, pv: np.ndarray) -> np.ndarray:
        """Psi(|p| - R) with Psi(s) = s^2 for s > 0 and 0 otherwise."""
        if not math.isfinite(self.R):
            return np.zeros(np.shape(pv)[:-1])
        n = np.sqrt(np.sum(np.asarray(pv) ** 2, axis=-1))
        return np.maximum(n - self.R, 0.0) ** 2


def hamiltonian_pair(kind: str, R: float | None = None) -> Hamiltonian:
    """'quadratic' (g = |p|^2/2), 'truncated' (Huber-type with radius R) or 'zero'."""
    if kind == "quadratic":
        return Hamiltonian("quadratic", math.inf, math.inf)
    if kind == "truncated":
        if R is None or R <= 0:
            raise ValueError("truncated Hamiltonian needs R > 0")
        return Hamiltonian("truncated", float(R), float(R))
    if kind == "zero":
        return Hamiltonian("zero", math.inf if R is None else float(R), 0.0)
    raise ValueError(f"unknown Hamiltonian kind {kind!r}")


# dictionary

def quadratic_dictionary(f: Functional, dim: int) -> Callable:
    """Features [f, 1, x_a, x_a x_b (a <= b)] with gradients."""
    ia, ib = np.triu_indices(dim)

    def feats(x):
        x = np.asarray(x, dtype=float)
        P = x.shape[0]
        F = 2 + dim + len(ia)
        vals = np.empty((P, F))
        grads = np.zeros((P, F, dim))
        vals[:, 0] = f.eval(x)
        grads[:, 0] = f.grad(x)
        vals[:, 1] = 1.0
        vals[:, 2:2 + dim] = x
        grads[:, 2:2 + dim] = np.eye(dim)
        vals[:, 2 + dim:] = x[:, ia] * x[:, ib]
        k = 2 + dim + np.arange(len(ia))
        grads[:, k, ia] += x[:, ib]
        grads[:, k, ib] += x[:, ia]
        return vals, grads

    feats.size = 2 + dim + len(ia)
    return feats


@dataclass
class HJBSolution:
    cloud: SampleCloud
    lam: float
    theta: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    sqrtQ_grads: np.ndarray
    iterations: int
    residuals: list
    misfits: list
    data: ResolventData
    features: Callable
    H: Hamiltonian
    meta: dict = field(default_factory=dict)

    def gradient_at(self, x: np.ndarray, k: int = 8) -> np.ndarray:
        """Inverse-distance-weighted sqrt(Q) D phi over the k nearest cloud points."""
        return idw(self.cloud.points, self.sqrtQ_grads, x, k)

    def policy(self) -> Callable[[float, np.ndarray], np.ndarray]:
        return lambda t, x: self.H.feedback(self.gradient_at(x))

    def report(self) -> dict:
        return {"lambda": self.lam, "lip": self.H.lip, "iterations": self.iterations,
                "residuals": list(map(float, self.residuals)),
                "misfits": list(map(float, self.misfits)), **self.meta}


class HJBConvergenceError(RuntimeError):
    def __init__(self, residuals):
        super().__init__(f"Picard iteration did not converge; residuals {residuals[-3:]}")
        self.residuals = residuals


def idw(points: np.ndarray, values: np.ndarray, x: np.ndarray, k: int = 8) -> np.ndarray:
    """Inverse-distance weights in the H norm; exact at cloud points."""
    x = np.atleast_2d(x)
    xx, pp = np.sum(x * x, 1)[:, None], np.sum(points * points, 1)[None]
    d2 = np.maximum(xx - 2 * x @ points.T + pp, 0.0)
    k = min(k, len(points))
    nn = np.argpartition(d2, k - 1, axis=1)[:, :k]
    d2k = np.take_along_axis(d2, nn, 1)
    dk = np.sqrt(d2k)
    # the expanded square loses about eps (|x|^2 + |p|^2) to cancellation
    hit = d2k <= 1e-12 * (xx + np.take_along_axis(np.broadcast_to(pp, d2.shape), nn, 1)) + 1e-300
    w = np.where(hit.any(1, keepdims=True), hit.astype(float), 1.0 / np.where(hit, 1.0, dk))
    w /= w.sum(1, keepdims=True)
    return np.einsum("pk,pk...->p...", w, values[nn])


def _psi_norm(cloud_vals):
    return math.sqrt(float(np.mean(cloud_vals ** 2)))


def prepare(f: Functional, lam: float, cloud: SampleCloud, p: ModelParams, q: NoiseSpec,
            **kw) -> tuple:
    """Resolvent values and sqrt(Q)-gradients of every dictionary element on the cloud."""
    feats = quadratic_dictionary(f, p.basis.dim)
    data = resolvent_data(cloud.points, p, q, [lam], feats, directions=sqrtQ_directions(q), **kw)
    return feats, data


def solve_hjb(f: Functional, H: Hamiltonian, lam: float, cloud: SampleCloud, p: ModelParams,
              q: NoiseSpec, tol: float = 1e-3, max_iter: int = 30, prepared: tuple | None = None,
              **kw) -> HJBSolution:
    """Picard iteration of gamma(psi) = f - g(sqrt(Q) D R(lambda) psi) on the cloud."""
    if not lam > H.lip ** 2:
        raise ValueError(f"lambda = {lam} must exceed lip^2 = {H.lip ** 2}")
    feats, data = prepared if prepared is not None else prepare(f, lam, cloud, p, q, **kw)
    Phi, _ = feats(cloud.points)
    V = data.values[0]           # (n, F)
    G = data.grads[0]            # (n, F, D)
    fv = Phi[:, 0]
    theta = np.zeros(Phi.shape[1])
    theta[0] = 1.0
    residuals, misfits = [], []
    for it in range(1, max_iter + 1):
        grad = np.einsum("nfd,f->nd", G, theta)
        target = fv - H.g(grad)
        misfits.append(_psi_norm(Phi @ theta - target))
        coef, *_ = np.linalg.lstsq(Phi[:, 1:], target - fv, rcond=None)
        new = np.concatenate([[1.0], coef])
        residuals.append(_psi_norm(Phi @ (new - theta)))
        theta = new
        if residuals[-1] <= tol:
            break
    else:
        raise HJBConvergenceError(residuals)
    grad = np.einsum("nfd,f->nd", G, theta)
    psi = Phi @ theta
    final_misfit = _psi_norm(psi - (fv - H.g(grad)))
    sol = HJBSolution(cloud, float(lam), theta, psi, V @ theta, grad, it, residuals, misfits,
                      data, feats, H,
                      meta={"final_misfit": final_misfit, "dictionary_size": int(len(theta)),
                            "cloud_size": int(len(cloud))})
    log.info("HJB converged in %d iterations, residual %.3g, misfit %.3g", it, residuals[-1],
             final_misfit)
    return sol


@dataclass(frozen=True)
class Contraction:
    ratios: np.ndarray
    ratio: float
    se: float
    bound: float

    @property
    def passes(self) -> bool:
        return self.ratio <= self.bound + 3 * self.se


def contraction_estimate(sol: HJBSolution, n_pairs: int = 8, seed: int = 0,
                         scale: float = 1.0) -> Contraction:
    """|gamma(psi1) - gamma(psi2)| / |psi1 - psi2| over random dictionary pairs (largest ratio)."""
    rng = np.random.default_rng(seed)
    Phi, _ = sol.features(sol.cloud.points)
    Fdim = Phi.shape[1]
    g = sol.H.g
    # coefficients scaled so each dictionary element contributes O(scale) on the cloud
    colnorm = np.sqrt(np.mean(Phi ** 2, axis=0))
    colnorm[colnorm == 0] = 1.0
    pairs = [(rng.standard_normal(Fdim) * scale / colnorm / math.sqrt(Fdim),
              rng.standard_normal(Fdim) * scale / colnorm / math.sqrt(Fdim)) for _ in range(n_pairs)]

    def stat(v, G):
        G = G[0]
        out = []
        for t1, t2 in pairs:
            num = g(np.einsum("nfd,f->nd", G, t1)) - g(np.einsum("nfd,f->nd", G, t2))
            out.append(_psi_norm(num) / _psi_norm(Phi @ (t1 - t2)))
        return np.max(out)

    def all_ratios(G):
        res = []
        for t1, t2 in pairs:
            num = g(np.einsum("nfd,f->nd", G, t1)) - g(np.einsum("nfd,f->nd", G, t2))
            res.append(_psi_norm(num) / _psi_norm(Phi @ (t1 - t2)))
        return np.array(res)

    ratios = all_ratios(sol.data.grads[0])
    se = sol.data.jackknife_se(stat)
    return Contraction(ratios, float(ratios.max()), se, sol.H.lip / math.sqrt(sol.lam))


# controlled costs

@dataclass(frozen=True)
class CostResult:
    estimate: Estimate
    per_path: np.ndarray
    correction: np.ndarray | None = None
    max_control: float = 0.0

    @property
    def value(self):
        return self.estimate.value


def constant_policy(U: np.ndarray) -> Callable:
    U = np.asarray(U, dtype=float)
    return lambda t, x: np.broadcast_to(U, x.shape)


def zero_policy() -> Callable:
    return lambda t, x: np.zeros_like(x)


def eval_cost(x0, policy: Callable | None, f: Functional, H: Hamiltonian, lam: float,
              p: ModelParams, q: NoiseSpec, n_paths: int = 2000, T_max: float | None = None,
              dt: float = 1e-2, seed: int = 0, stream_base: int = 0,
              gradient: Callable[[np.ndarray], np.ndarray] | None = None) -> CostResult:
    """E int e^{-lambda t} [f(X) + h(U)] dt along controlled paths.

    With `gradient` (an estimate of sqrt(Q) D phi), the verification correction
    int e^{-lambda t}/2 [|U + G|^2 - Psi(|G| - R)] dt is accumulated as well.
    """
    x0 = x0.coords if hasattr(x0, "coords") else np.asarray(x0, dtype=float)
    T_max = math.log(1e5) / lam if T_max is None else T_max
    n_steps = max(1, int(math.ceil(T_max / dt - 1e-9)))
    T_max = n_steps * dt
    dim = p.basis.dim
    P = n_paths
    ids = stream_base + np.arange(P)
    integ = Integrator(p, q, dt)
    acc = np.zeros(P)
    corr = np.zeros(P) if gradient is not None else None
    umax = [0.0]
    step_w = (1 - math.exp(-lam * dt)) / lam
    pol = policy if policy is not None else zero_policy()

    def obs(s: StepInfo):
        U = s.U
        if U is None:
            U = np.asarray(pol(s.t, s.q), dtype=float)
            n = np.sqrt(np.sum(U * U, axis=-1, keepdims=True))
            U = U * np.minimum(1.0, H.R / np.where(n > 0, n, 1.0)) if math.isfinite(H.R) else U
        w = math.exp(-lam * s.t) * step_w if s.dW is not None else math.exp(-lam * T_max) / lam
        acc[:] += w * (f.eval(s.q) + H.running_cost(U))
        umax[0] = max(umax[0], float(np.max(np.sqrt(np.sum(U * U, axis=-1)))))
        if corr is not None:
            G = gradient(s.q)
            corr[:] += w * 0.5 * (np.sum((U + G) ** 2, axis=-1) - H.excess(G))

    R = H.R if math.isfinite(H.R) else None
    integ.run(np.broadcast_to(x0, (P, dim)), n_steps, BatchNoise(seed, ids, dt, dim),
              control=pol, R=R, observer=obs)
    return CostResult(mean_se(acc), acc, corr, umax[0])


def phi_at(sol: HJBSolution, x0, p: ModelParams, q: NoiseSpec, n_paths: int = 2048,
           seed: int = 0, stream_base: int = 0) -> Estimate:
    """phi(x0) for the converged psi, by a fresh resolvent estimate at x0."""
    x0 = x0.coords if hasattr(x0, "coords") else np.asarray(x0, dtype=float)
    d = resolvent_data(x0[None], p, q, [sol.lam], sol.features, n_paths=n_paths, dt=sol.data.dt,
                       T_max=sol.data.T_max, seed=seed, stream_base=stream_base, n_blocks=16)
    blocks = d.values_blocks[0, 0] @ sol.theta
    return Estimate(float(d.values[0, 0] @ sol.theta),
                    float(np.std(blocks, ddof=1) / math.sqrt(len(blocks))))


@dataclass(frozen=True)
class Verification:
    phi_x0: Estimate
    cost: Estimate
    correction: Estimate
    residual: float
    se: float

    @property
    def passes(self) -> bool:
        return self.residual <= 3 * self.se


def verification_residual(x0, sol: HJBSolution, policy: Callable, f: Functional, p: ModelParams,
                          q: NoiseSpec, n_paths: int = 4000, dt: float | None = None, seed: int = 0,
                          stream_base: int = 0, phi0: Estimate | None = None) -> Verification:
    """|phi(x0) + E int e^{-lambda t}/2 [|U + G|^2 - Psi(|G| - R)] dt - J(U)|."""
    dt = sol.data.dt if dt is None else dt
    phi0 = phi_at(sol, x0, p, q, seed=seed, stream_base=stream_base + 10 ** 7) if phi0 is None else phi0
    c = eval_cost(x0, policy, f, sol.H, sol.lam, p, q, n_paths=n_paths, dt=dt, seed=seed,
                  stream_base=stream_base, gradient=sol.gradient_at)
    diff = mean_se(c.per_path - c.correction)
    corr = mean_se(c.correction)
    return Verification(phi0, c.estimate, corr, abs(phi0.value - diff.value),
                        combined_se(phi0.se, diff.se))


@dataclass(frozen=True)
class TournamentEntry:
    name: str
    cost: float
    se: float
    gap_to_feedback: float
    gap_se: float


def tournament(x0, sol: HJBSolution, f: Functional, p: ModelParams, q: NoiseSpec,
               n_random: int = 3, n_paths: int = 2000, seed: int = 0, stream_base: int = 0,
               dt: float | None = None, policy_seed: int = 1) -> list:
    """Feedback policy against U = 0 and random constant policies, all on common noise."""
    dt = sol.data.dt if dt is None else dt
    rng = np.random.default_rng(policy_seed)
    dim = p.basis.dim
    R = sol.H.R if math.isfinite(sol.H.R) else 1.0
    pols = [("feedback", sol.policy()), ("zero", zero_policy())]
    for i in range(n_random):
        d = rng.standard_normal(dim)
        pols.append((f"constant_{i}", constant_policy(d / np.linalg.norm(d) * R * rng.uniform(0.2, 1.0))))
    runs = [(n, eval_cost(x0, pol, f, sol.H, sol.lam, p, q, n_paths=n_paths, dt=dt, seed=seed,
                          stream_base=stream_base)) for n, pol in pols]
    base = runs[0][1].per_path
    out = []
    for n, c in runs:
        g = mean_se(c.per_path - base)
        out.append(TournamentEntry(n, c.estimate.value, c.estimate.se, g.value, g.se))
    return out


def report_json(sol: HJBSolution, phi_x0: float | None, entries: Sequence[TournamentEntry]) -> str:
    rec = sol.report()
    rec["phi_at_x0"] = phi_x0
    rec["cost_tournament"] = [e.__dict__ for e in entries]
    return json.dumps(rec, indent=1, sort_keys=True, default=float)
