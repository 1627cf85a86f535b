"""Drift operators: convection B, Forchheimer damping C, derivatives, truncations, noise."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict
from functools import cached_property

import numpy as np

from .spectral import FourierBasis, SpectralField, get_basis

log = logging.getLogger(__name__)

R2_ZERO = 1e-14


@dataclass(frozen=True)
class ModelParams:
    """Physical coefficients and discretisation of the damped Navier-Stokes system.

    beta = 0 switches the Forchheimer term off and convection=False removes B;
    both are used by reduced test problems.
    """

    mu: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    r: int = 3
    N: int = 8
    L: float = 2 * np.pi
    eps: float = 0.0
    delta: float = 0.375
    convection: bool = True
    M: int | None = None

    def __post_init__(self):
        if self.mu <= 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("need mu > 0, alpha >= 0, beta >= 0")
        if self.r not in (1, 2, 3):
            raise ValueError("r must be 1, 2 or 3")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if not 0.25 < self.delta < 0.5:
            raise ValueError("delta must lie in (1/4, 1/2)")

    @property
    def basis(self) -> FourierBasis:
        return get_basis(self.N, self.L, self.M)

    @property
    def lambda1(self) -> float:
        return (2 * np.pi / self.L) ** 2

    def linear_rates(self) -> np.ndarray:
        """Per-coordinate decay rates mu*lambda_k + alpha."""
        return self.mu * self.basis.eigenvalues + self.alpha

    def replace(self, **kw) -> "ModelParams":
        d = asdict(self)
        d.update(kw)
        return ModelParams(**d)


@dataclass(frozen=True)
class NoiseSpec:
    """Diagonal trace-class covariance; eig holds one variance per real coordinate."""

    eig: np.ndarray
    decay_exponent: float = 2.5
    N: int = 8
    L: float = 2 * np.pi

    def __post_init__(self):
        e = np.asarray(self.eig, dtype=float)
        if np.any(e < 0) or not np.all(np.isfinite(e)):
            raise ValueError("noise variances must be finite and nonnegative")
        object.__setattr__(self, "eig", e)

    @classmethod
    def power_law(cls, basis: FourierBasis, trace: float = 0.5, q: float = 2.5) -> "NoiseSpec":
        """mu_k proportional to |k|^(-2q), scaled so that Tr(Q) = trace."""
        if q <= 1:
            raise ValueError("decay exponent must exceed 1 for a trace-class covariance")
        w = np.repeat(basis.kabs ** (-2 * q), 2)
        return cls(trace * w / w.sum(), q, basis.N, basis.L)

    @classmethod
    def constant(cls, basis: FourierBasis, value: float) -> "NoiseSpec":
        return cls(np.full(basis.dim, float(value)), 0.0, basis.N, basis.L)

    @property
    def basis(self) -> FourierBasis:
        return get_basis(self.N, self.L)

    @cached_property
    def sqrt_eig(self) -> np.ndarray:
        return np.sqrt(self.eig)

    def trace(self) -> float:
        return float(np.sum(self.eig))

    def trace_A(self, power: float = 1.0) -> float:
        """Tr(A^power Q) over the cutoff set."""
        return float(np.sum(self.basis.eigenvalues ** power * self.eig))

    def traces(self, delta: float) -> dict:
        return {"TrQ": self.trace(), "TrA2dQ": self.trace_A(2 * delta), "TrAQ": self.trace_A(1.0)}

    def tail_finite(self, power: float) -> bool:
        """Whether sum |k|^(2 power) mu_k converges on the full lattice for the decay law."""
        return 2 * self.decay_exponent - 2 * power > 2

    def eig_by_wave(self) -> dict:
        b = self.basis
        return {w: float(self.eig[2 * j]) for j, w in enumerate(b.waves)}

    def to_json(self) -> str:
        return json.dumps({"decay_exponent": self.decay_exponent, "cutoff": self.N,
                           "L": self.L, "eigenvalues": self.eig.tolist()})

    @classmethod
    def from_json(cls, text: str, trace: float | None = None) -> "NoiseSpec":
        rec = json.loads(text)
        basis = get_basis(int(rec["cutoff"]), float(rec.get("L", 2 * np.pi)))
        if rec.get("eigenvalues") is not None:
            spec = cls(np.asarray(rec["eigenvalues"], float), float(rec["decay_exponent"]),
                       basis.N, basis.L)
            if spec.eig.shape != (basis.dim,):
                raise ValueError("eigenvalue list does not match cutoff")
        else:
            spec = cls.power_law(basis, trace if trace is not None else float(rec.get("trace", 0.5)),
                                 float(rec["decay_exponent"]))
        log.info("noise traces %s", spec.traces(0.375))
        return spec


# array kernels; q arrays have shape (..., dim)

def self_convection(basis: FourierBasis, g: np.ndarray) -> np.ndarray:
    """Grid field omega * u_perp whose projection is B(u); g = (u1, u2, omega)."""
    u1, u2, w = g[..., 0, :, :], g[..., 1, :, :], g[..., 2, :, :]
    return np.stack([-w * u2, w * u1], axis=-3)


def forchheimer_grid(g: np.ndarray, r: int) -> np.ndarray:
    """Pointwise |u|^(r-1) u from grid velocity (..., >=2, M, M)."""
    u = g[..., :2, :, :]
    if r == 1:
        return u.copy()
    s = u[..., 0, :, :] ** 2 + u[..., 1, :, :] ** 2
    fac = s if r == 3 else np.sqrt(s)
    return u * fac[..., None, :, :]


def convection_coords(basis: FourierBasis, qu: np.ndarray, qv: np.ndarray) -> np.ndarray:
    """Coordinates of P((u . grad) v)."""
    u = basis.velocity(qu)
    dv = basis.velocity_gradient(qv)
    f = np.einsum("...jxy,...ijxy->...ixy", u, dv)
    return basis.project_grid(f)


def c_derivative_grid(gy: np.ndarray, gz: np.ndarray, r: int) -> np.ndarray:
    """Pointwise derivative of |y|^(r-1) y in direction z."""
    y = gy[..., :2, :, :]
    z = gz[..., :2, :, :]
    if r == 1:
        return z.copy()
    s = y[..., 0, :, :] ** 2 + y[..., 1, :, :] ** 2
    yz = (y * z).sum(axis=-3)
    if r == 3:
        return s[..., None, :, :] * z + 2 * yz[..., None, :, :] * y
    mag = np.sqrt(s)
    live = mag >= R2_ZERO
    inv = np.where(live, 1.0 / np.where(live, mag, 1.0), 0.0)
    return mag[..., None, :, :] * z + (yz * inv)[..., None, :, :] * y


def truncation_scales(p: ModelParams, normV: np.ndarray):
    """Scalings of B and C above the truncation threshold, and their radial derivatives.

    Returns (sB, sC, dsB, dsC) where ds are derivatives with respect to |x|_V.
    """
    normV = np.asarray(normV, dtype=float)
    one = np.ones_like(normV)
    if p.eps == 0:
        zero = np.zeros_like(normV)
        return one, one, zero, zero
    e = p.eps
    above = normV * e > 1.0
    safe = np.where(above, normV, 1.0)
    sB = np.where(above, (e * safe) ** -2.0, 1.0)
    sC = np.where(above, (e * safe) ** -(p.r + 1.0), 1.0)
    dsB = np.where(above, -2.0 * sB / safe, 0.0)
    dsC = np.where(above, -(p.r + 1.0) * sC / safe, 0.0)
    return sB, sC, dsB, dsC


class DriftKernel:
    """Nonlinear part N(x) = B_eps(x) + beta C_eps(x) evaluated on batches."""

    # grid cells per sub-batch; keeps elementwise work cache resident
    CELLS_PER_BLOCK = 150_000

    def __init__(self, p: ModelParams, workers: int | None = None):
        self.p = p
        self.basis = p.basis
        self.workers = workers
        self.block = max(1, self.CELLS_PER_BLOCK // self.basis.M ** 2)

    def evaluate(self, q: np.ndarray, keep_grid: bool = False):
        """Return N(q), the L^{r+1} pairing integral per field, and optionally the grid."""
        q = np.asarray(q, dtype=float)
        if q.ndim == 2 and q.shape[0] > self.block:
            parts = [self._evaluate(q[i:i + self.block], keep_grid)
                     for i in range(0, q.shape[0], self.block)]
            return tuple(np.concatenate(z) for z in zip(*parts))
        return self._evaluate(q, keep_grid)

    def _evaluate(self, q: np.ndarray, keep_grid: bool):
        b, p = self.basis, self.p
        g = b.velocity_vorticity(q, self.workers)
        u1, u2, w = g[..., 0, :, :], g[..., 1, :, :], g[..., 2, :, :]
        lead = g.shape[:-3]
        ex = (slice(None),) * len(lead) + (None, None)
        mag2 = u1 * u1
        mag2 += u2 * u2
        if p.r == 1:
            damp = np.ones_like(mag2)
            lr = b.cell * np.sum(mag2, axis=(-2, -1))
        elif p.r == 2:
            damp = np.sqrt(mag2)
            lr = b.cell * np.sum(mag2 * damp, axis=(-2, -1))
        else:
            damp = mag2
            lr = b.cell * np.sum(mag2 * mag2, axis=(-2, -1))
        if p.eps > 0:
            normV = np.sqrt(np.sum(b.eigenvalues * q * q, axis=-1))
            sB, sC, _, _ = truncation_scales(p, normV)
            damp = damp * (p.beta * sC)[ex]
            wB = w * sB[ex]
        else:
            damp = damp * p.beta
            wB = w
        f = np.empty(lead + (2,) + g.shape[-2:])
        f0, f1 = f[..., 0, :, :], f[..., 1, :, :]
        np.multiply(u1, damp, out=f0)
        np.multiply(u2, damp, out=f1)
        if p.convection:
            f0 -= wB * u2
            f1 += wB * u1
        out = b.project_grid(f, self.workers)
        return (out, lr, g) if keep_grid else (out, lr)

    def derivative(self, q: np.ndarray, g: np.ndarray, xi: np.ndarray,
                   n_dirs_axis: bool = False) -> np.ndarray:
        """DN(x) xi.  With n_dirs_axis, xi has shape (..., D, dim) and q, g are broadcast."""
        b, p = self.basis, self.p
        if b.dense:
            J = self.jacobian(q, g)
            if n_dirs_axis:
                return np.matmul(xi, np.swapaxes(J, -1, -2))
            return np.matmul(J, xi[..., None])[..., 0]
        gx = g[..., None, :, :, :] if n_dirs_axis else g
        qx = q[..., None, :] if n_dirs_axis else q
        gxi = b.velocity_vorticity(xi, self.workers)
        normV = np.sqrt(np.sum(b.eigenvalues * q * q, axis=-1))
        sB, sC, dsB, dsC = truncation_scales(p, normV)
        if n_dirs_axis:
            sB, sC = sB[..., None], sC[..., None]
        f = np.zeros(gxi.shape[:-3] + (2,) + gxi.shape[-2:])
        if p.convection:
            lin = np.stack([-gx[..., 2, :, :] * gxi[..., 1, :, :] - gxi[..., 2, :, :] * gx[..., 1, :, :],
                            gx[..., 2, :, :] * gxi[..., 0, :, :] + gxi[..., 2, :, :] * gx[..., 0, :, :]],
                           axis=-3)
            f += sB[..., None, None, None] * lin
        if p.beta:
            f += (p.beta * sC)[..., None, None, None] * c_derivative_grid(gx, gxi, p.r)
        out = b.project_grid(f, self.workers)
        if p.eps > 0 and np.any(dsB != 0):
            # radial derivative of the scalings: d|x|_V . xi = (Ax, xi)/|x|_V
            Ax = b.eigenvalues * qx
            nv = np.where(normV > 0, normV, 1.0)
            if n_dirs_axis:
                nv, dsB, dsC = nv[..., None], dsB[..., None], dsC[..., None]
            dn = np.sum(Ax * xi, axis=-1) / nv
            full = np.zeros(g.shape[:-3] + (2,) + g.shape[-2:])
            fB = self_convection(b, g) if p.convection else 0 * full
            fC = forchheimer_grid(g, p.r) if p.beta else 0 * full
            PB, PC = b.project_grid(fB), b.project_grid(fC)
            if n_dirs_axis:
                PB, PC = PB[..., None, :], PC[..., None, :]
            out = out + (dsB * dn)[..., None] * PB + (p.beta * dsC * dn)[..., None] * PC
        return out


    def pointwise_coefficients(self, q: np.ndarray, g: np.ndarray) -> np.ndarray:
        """K with (DN(x) xi)_grid = K (xi1, xi2, omega_xi) per grid point, shape (..., 2, 3, M, M).

        Excludes the radial derivative of the truncation scalings.
        """
        p = self.p
        normV = np.sqrt(np.sum(self.basis.eigenvalues * q * q, axis=-1))
        sB, sC, _, _ = truncation_scales(p, normV)
        ex = (Ellipsis, None, None)
        u1, u2, w = g[..., 0, :, :], g[..., 1, :, :], g[..., 2, :, :]
        K = np.zeros(g.shape[:-3] + (2, 3) + g.shape[-2:])
        if p.convection:
            K[..., 0, 1, :, :] = -sB[ex] * w
            K[..., 0, 2, :, :] = -sB[ex] * u2
            K[..., 1, 0, :, :] = sB[ex] * w
            K[..., 1, 2, :, :] = sB[ex] * u1
        if p.beta:
            c = (p.beta * sC)[ex]
            if p.r == 1:
                K[..., 0, 0, :, :] += c
                K[..., 1, 1, :, :] += c
            else:
                s = u1 * u1 + u2 * u2
                if p.r == 3:
                    iso, cross = s, 2.0
                else:
                    iso = np.sqrt(s)
                    live = iso >= R2_ZERO
                    cross = np.where(live, 1.0 / np.where(live, iso, 1.0), 0.0)
                K[..., 0, 0, :, :] += c * (iso + cross * u1 * u1)
                K[..., 0, 1, :, :] += c * cross * u1 * u2
                K[..., 1, 0, :, :] += c * cross * u1 * u2
                K[..., 1, 1, :, :] += c * (iso + cross * u2 * u2)
        return K

    def jacobian(self, q: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Dense DN(x) as (..., dim, dim) matrices, [i, j] = dN_i / dx_j."""
        b, p = self.basis, self.p
        MM = b.M ** 2
        K = self.pointwise_coefficients(q, g)
        K = K.reshape(K.shape[:-2] + (MM,))
        S = b._synth_matrix.reshape(b.dim, 3, MM)
        T = np.einsum("...abc,jbc->...acj", K, S)
        T = T.reshape(T.shape[:-3] + (2 * MM, b.dim))
        J = np.matmul(b._proj_matrix.T, T)
        if p.eps > 0:
            normV = np.sqrt(np.sum(b.eigenvalues * q * q, axis=-1))
            _, _, dsB, dsC = truncation_scales(p, normV)
            if np.any(dsB != 0):
                nv = np.where(normV > 0, normV, 1.0)
                dn = b.eigenvalues * q / nv[..., None]
                PB = b.project_grid(self_convection(b, g)) if p.convection else 0.0 * q
                PC = b.project_grid(forchheimer_grid(g, p.r)) if p.beta else 0.0 * q
                rad = dsB[..., None] * PB + (p.beta * dsC)[..., None] * PC
                J = J + rad[..., :, None] * dn[..., None, :]
        return J


# field-level operations

def _same(u: SpectralField, v: SpectralField):
    if u.basis.N != v.basis.N or u.basis.L != v.basis.L:
        raise ValueError("cutoff or period mismatch")


def bilinear_B(u: SpectralField, v: SpectralField) -> SpectralField:
    """Leray-projected (u . grad) v."""
    _same(u, v)
    return SpectralField(u.basis, convection_coords(u.basis, u.coords, v.coords))


def self_B(u: SpectralField) -> SpectralField:
    """B(u, u) through the rotational form omega u_perp (gradient part projected out)."""
    b = u.basis
    return SpectralField(b, b.project_grid(self_convection(b, b.velocity_vorticity(u.coords))))


def trilinear_b(u: SpectralField, v: SpectralField, w: SpectralField):
    return bilinear_B(u, v).inner(w)


def forchheimer_C(u: SpectralField, r: int) -> SpectralField:
    if r not in (1, 2, 3):
        raise ValueError("r must be 1, 2 or 3")
    b = u.basis
    return SpectralField(b, b.project_grid(forchheimer_grid(b.velocity(u.coords), r)))


def c_derivative(y: SpectralField, z: SpectralField, r: int) -> SpectralField:
    _same(y, z)
    b = y.basis
    return SpectralField(b, b.project_grid(
        c_derivative_grid(b.velocity(y.coords), b.velocity(z.coords), r)))


def truncated_drift(x: SpectralField, p: ModelParams) -> SpectralField:
    """B_eps(x) + beta C_eps(x); eps = 0 gives the untruncated nonlinearity."""
    k = DriftKernel(p)
    out, _ = k.evaluate(x.coords)
    return SpectralField(x.basis, out)


def full_drift(x: SpectralField, p: ModelParams) -> SpectralField:
    """mu A x + alpha x + B_eps(x) + beta C_eps(x)."""
    nl = truncated_drift(x, p)
    return SpectralField(x.basis, p.linear_rates() * x.coords + nl.coords)


def sqrtQ_apply(x: SpectralField, q: NoiseSpec) -> SpectralField:
    if q.eig.shape != (x.basis.dim,):
        raise ValueError("noise spec does not match the field cutoff")
    return SpectralField(x.basis, x.coords * q.sqrt_eig)
