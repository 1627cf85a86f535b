"""Real functionals of the state with closed-form derivatives.

All callables act on coordinate arrays with a trailing basis dimension and
broadcast over leading dimensions.  hess_vec(q, v) returns D^2 f(q) v for
directions v broadcastable against q.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .spectral import FourierBasis, SpectralField, WaveIndex


def _coords(x):
    return x.coords if isinstance(x, SpectralField) else np.asarray(x, dtype=float)


@dataclass(frozen=True)
class Functional:
    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    hess_vec: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    lip_bound: float | None = None
    sup_bound: float | None = None
    name: str = "functional"
    # optional fast path for sum_k w_k (D^2 f e_k, e_k)
    hess_trace: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __call__(self, x):
        return self.eval(_coords(x))

    def gradient(self, x):
        if self.grad is None:
            raise ValueError(f"{self.name} has no gradient")
        return self.grad(_coords(x))

    def weighted_hessian_trace(self, q: np.ndarray, w: np.ndarray) -> np.ndarray:
        """sum_k w_k (D^2 f(q) e_k, e_k) over the coordinate basis."""
        if self.hess_trace is not None:
            return self.hess_trace(q, w)
        if self.hess_vec is None:
            raise ValueError(f"{self.name} has no Hessian action")
        eye = np.eye(q.shape[-1])
        hv = self.hess_vec(q[..., None, :], eye)
        return np.einsum("...kk,k->...", hv, w)

    def __add__(self, other: "Functional") -> "Functional":
        return linear_combination([(1.0, self), (1.0, other)])

    def shifted(self, c: float) -> "Functional":
        return linear_combination([(1.0, self), (c, constant(1.0))])

    def scaled(self, a: float) -> "Functional":
        return linear_combination([(a, self)])


def constant(c: float) -> Functional:
    c = float(c)
    return Functional(
        eval=lambda q: np.full(np.shape(q)[:-1], c),
        grad=lambda q: np.zeros(np.shape(q)),
        hess_vec=lambda q, v: np.zeros(np.broadcast_shapes(np.shape(q), np.shape(v))),
        lip_bound=0.0, sup_bound=abs(c), name=f"const({c:g})",
        hess_trace=lambda q, w: np.zeros(np.shape(q)[:-1]))


def cylinder(h: np.ndarray, kind: str = "cos") -> Functional:
    """cos((h, x)) or sin((h, x)), the real pair of exp(i (h, x))."""
    h = np.asarray(h, dtype=float)
    hn = float(np.linalg.norm(h))
    if kind == "cos":
        f, df, d2 = np.cos, lambda s: -np.sin(s), lambda s: -np.cos(s)
    elif kind == "sin":
        f, df, d2 = np.sin, np.cos, lambda s: -np.sin(s)
    else:
        raise ValueError("kind must be 'cos' or 'sin'")

    def hv(q, v):
        s = q @ h
        return (d2(s) * (v @ h))[..., None] * h

    return Functional(
        eval=lambda q: f(q @ h),
        grad=lambda q: df(q @ h)[..., None] * h,
        hess_vec=hv, lip_bound=hn, sup_bound=1.0, name=f"cyl_{kind}",
        hess_trace=lambda q, w: d2(q @ h) * np.sum(w * h * h))


def normH2() -> Functional:
    return Functional(
        eval=lambda q: np.sum(q * q, axis=-1),
        grad=lambda q: 2 * q,
        hess_vec=lambda q, v: 2 * np.broadcast_to(v, np.broadcast_shapes(np.shape(q), np.shape(v))),
        name="normH2", hess_trace=lambda q, w: np.full(np.shape(q)[:-1], 2 * np.sum(w)))


def quadratic_form(weights: np.ndarray, name: str = "quadratic") -> Functional:
    """(x, W x) for a symmetric matrix W, or a diagonal given as a vector."""
    W = np.asarray(weights, dtype=float)
    if W.ndim == 1:
        return Functional(
            eval=lambda q: np.sum(W * q * q, axis=-1),
            grad=lambda q: 2 * W * q,
            hess_vec=lambda q, v: 2 * W * np.broadcast_to(v, np.broadcast_shapes(np.shape(q), np.shape(v))),
            name=name, hess_trace=lambda q, w: np.full(np.shape(q)[:-1], 2 * np.sum(w * W)))
    W = 0.5 * (W + W.T)
    return Functional(
        eval=lambda q: np.einsum("...i,ij,...j->...", q, W, q),
        grad=lambda q: 2 * q @ W,
        hess_vec=lambda q, v: 2 * np.broadcast_to(v, np.broadcast_shapes(np.shape(q), np.shape(v))) @ W,
        name=name, hess_trace=lambda q, w: np.full(np.shape(q)[:-1], 2 * np.sum(w * np.diag(W))))


def normV2(basis: FourierBasis) -> Functional:
    """Enstrophy |grad x|^2 = |A^(1/2) x|^2."""
    f = quadratic_form(basis.eigenvalues, name="normV2")
    return f


def expH(sigma: float) -> Functional:
    s = float(sigma)

    def ev(q):
        return np.exp(s * np.sum(q * q, axis=-1))

    def hv(q, v):
        e = ev(q)[..., None]
        return s * e * (4 * s * np.sum(q * v, axis=-1)[..., None] * q + 2 * v)

    def tr(q, w):
        return s * ev(q) * (4 * s * np.sum(w * q * q, axis=-1) + 2 * np.sum(w))

    return Functional(eval=ev, grad=lambda q: 2 * s * ev(q)[..., None] * q,
                      hess_vec=hv, name=f"expH({s:g})", hess_trace=tr)


def coordinate(j: int) -> Functional:
    """The linear functional (x, e_j) for a real basis coordinate j."""

    def g(q):
        out = np.zeros(np.shape(q))
        out[..., j] = 1.0
        return out

    return Functional(
        eval=lambda q: np.asarray(q)[..., j], grad=g,
        hess_vec=lambda q, v: np.zeros(np.broadcast_shapes(np.shape(q), np.shape(v))),
        lip_bound=1.0, name=f"coord({j})", hess_trace=lambda q, w: np.zeros(np.shape(q)[:-1]))


def monomial(i: int, j: int) -> Functional:
    """x_i x_j for real coordinates i, j."""

    def g(q):
        q = np.asarray(q)
        out = np.zeros(q.shape)
        out[..., i] += q[..., j]
        out[..., j] += q[..., i]
        return out

    def hv(q, v):
        shape = np.broadcast_shapes(np.shape(q), np.shape(v))
        out = np.zeros(shape)
        v = np.broadcast_to(v, shape)
        out[..., i] += v[..., j]
        out[..., j] += v[..., i]
        return out

    def tr(q, w):
        return np.full(np.shape(q)[:-1], 2 * w[i] if i == j else 0.0)

    return Functional(eval=lambda q: np.asarray(q)[..., i] * np.asarray(q)[..., j], grad=g,
                      hess_vec=hv, name=f"x{i}x{j}", hess_trace=tr)


def linear_combination(terms) -> Functional:
    """sum_i a_i f_i; derivatives exist when every term has them."""
    terms = [(float(a), f) for a, f in terms]
    has_grad = all(f.grad is not None for _, f in terms)
    has_hv = all(f.hess_vec is not None for _, f in terms)
    sup = None
    if all(f.sup_bound is not None for _, f in terms):
        sup = sum(abs(a) * f.sup_bound for a, f in terms)
    lip = None
    if all(f.lip_bound is not None for _, f in terms):
        lip = sum(abs(a) * f.lip_bound for a, f in terms)
    return Functional(
        eval=lambda q: sum(a * f.eval(q) for a, f in terms),
        grad=(lambda q: sum(a * f.grad(q) for a, f in terms)) if has_grad else None,
        hess_vec=(lambda q, v: sum(a * f.hess_vec(q, v) for a, f in terms)) if has_hv else None,
        lip_bound=lip, sup_bound=sup, name="+".join(f.name for _, f in terms),
        hess_trace=(lambda q, w: sum(a * f.weighted_hessian_trace(q, w) for a, f in terms))
        if has_hv else None)


def obstacle_energy(kappa: float, s0: float) -> Functional:
    """G(x) = k(|x|^2)|x|^2 with k(s) = kappa min(s, s0)."""

    def ev(q):
        s = np.sum(q * q, axis=-1)
        return kappa * np.minimum(s, s0) * s

    def gr(q):
        s = np.sum(q * q, axis=-1)
        dk = np.where(s < s0, 2 * kappa * s, kappa * s0)
        return 2 * dk[..., None] * q

    return Functional(eval=ev, grad=gr, name=f"obstacle(kappa={kappa:g},s0={s0:g})")


def random_direction(basis: FourierBasis, rng: np.random.Generator, scale: float = 1.0,
                     smoothness: float = 1.0, max_wave: float | None = None) -> np.ndarray:
    """Random h with coordinate std shrinking like lambda_k^(-smoothness/2)."""
    std = scale * (basis.eigenvalues / basis.lambda1) ** (-smoothness / 2)
    if max_wave is not None:
        std = std * (np.repeat(basis.kabs, 2) <= max_wave)
    return rng.standard_normal(basis.dim) * std


def from_spec(spec: dict, basis: FourierBasis) -> Functional:
    """Build a registered functional from a config record.

    Names: cylinder (h as a list of [k1, k2, part, value], kind), normH2,
    normV2, expH (sigma), coordinate (k1, k2, part), constant (value).
    """
    name = spec["name"]
    if name == "cylinder":
        h = np.zeros(basis.dim)
        for k1, k2, part, val in spec["h"]:
            h[basis.coordinate(WaveIndex(int(k1), int(k2)), int(part))] += float(val)
        return cylinder(h, spec.get("kind", "cos"))
    if name == "normH2":
        return normH2()
    if name == "normV2":
        return normV2(basis)
    if name == "expH":
        return expH(float(spec["sigma"]))
    if name == "coordinate":
        return coordinate(basis.coordinate(WaveIndex(int(spec["k1"]), int(spec["k2"])),
                                           int(spec.get("part", 0))))
    if name == "constant":
        return constant(float(spec["value"]))
    raise ValueError(f"unknown functional {name!r}")
