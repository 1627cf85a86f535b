"""Divergence-free Fourier basis on the periodic square, Stokes powers and norms.

Fields are stored by real coordinates in an orthonormal basis of the
truncated space H_N.  For each wave index k of the half lattice
(k2 > 0, or k2 == 0 and k1 > 0) the complex amplitude c_k multiplies the
complex basis function

    e_k(x) = i p_k exp(i kappa k.x) / L,    p_k = (-k2, k1) / |k|,

and c_{-k} = conj(c_k) makes the field real.  The real coordinates are
sqrt(2) (Re c_k, Im c_k), interleaved, so the Euclidean inner product of
coordinates is the L^2 inner product of the fields.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Iterable, Mapping

import numpy as np
import scipy.fft as sfft

SQRT2 = np.sqrt(2.0)
LP_EXPONENTS = (2, 3, 4, 6, np.inf)


@dataclass(frozen=True, order=True)
class WaveIndex:
    k1: int
    k2: int

    def __post_init__(self):
        if self.k1 == 0 and self.k2 == 0:
            raise ValueError("the zero wave index is excluded (mean-zero fields)")

    @property
    def norm(self) -> float:
        return float(np.hypot(self.k1, self.k2))

    @property
    def polarization(self) -> np.ndarray:
        return np.array([-self.k2, self.k1], dtype=float) / self.norm

    def conjugate(self) -> "WaveIndex":
        return WaveIndex(-self.k1, -self.k2)

    def is_representative(self) -> bool:
        return self.k2 > 0 or (self.k2 == 0 and self.k1 > 0)

    def representative(self) -> "WaveIndex":
        return self if self.is_representative() else self.conjugate()


def default_grid_size(N: int, degree: int = 4) -> int:
    """Smallest fast FFT length resolving products of `degree` band-N factors."""
    return int(sfft.next_fast_len(degree * N + 1, real=True))


class FourierBasis:
    """Truncated Stokes eigenbasis on [0, L]^2 with a quadrature grid.

    Args:
        N: cutoff, retained wave indices satisfy max(|k1|, |k2|) <= N.
        L: domain period.
        M: grid points per dimension (default resolves quartic products).
    """

    def __init__(self, N: int, L: float = 2 * np.pi, M: int | None = None):
        if N < 1:
            raise ValueError("cutoff N must be at least 1")
        self.N = int(N)
        self.L = float(L)
        self.M = int(M) if M is not None else default_grid_size(self.N)
        if self.M <= 2 * self.N:
            raise ValueError("grid too coarse to represent the retained modes")
        self.kappa = 2 * np.pi / self.L

        ks = [(k1, k2) for k1 in range(-N, N + 1) for k2 in range(0, N + 1)
              if k2 > 0 or k1 > 0]
        ks.sort(key=lambda k: (k[0] ** 2 + k[1] ** 2, k[1], k[0]))
        self.waves = tuple(WaveIndex(*k) for k in ks)
        k = np.array(ks, dtype=float)
        self.k = k
        self.kabs = np.hypot(k[:, 0], k[:, 1])
        self.pol = np.stack([-k[:, 1], k[:, 0]], axis=1) / self.kabs[:, None]
        self.n_waves = len(ks)
        self.dim = 2 * self.n_waves
        self.lam_wave = (self.kappa * self.kabs) ** 2
        self.eigenvalues = np.repeat(self.lam_wave, 2)
        self.lambda1 = self.kappa ** 2

        M = self.M
        kk = np.array(ks, dtype=int)
        self._row = kk[:, 0] % M
        self._col = kk[:, 1]
        self._axis0 = kk[:, 1] == 0
        self._row_mirror = (-kk[self._axis0, 0]) % M
        mh = M // 2 + 1
        self._flat = self._row * mh + self._col
        self._flat_mirror = self._row_mirror * mh
        self.cell = (self.L / M) ** 2

    def __repr__(self):
        return f"FourierBasis(N={self.N}, L={self.L:g}, M={self.M})"

    @cached_property
    def index(self) -> dict:
        return {w: j for j, w in enumerate(self.waves)}

    def wave_of_coordinate(self, j: int) -> WaveIndex:
        return self.waves[j // 2]

    def coordinate(self, k: WaveIndex | tuple, part: int = 0) -> int:
        """Real coordinate index of wave k; part 0 is Re c_k, part 1 is Im c_k."""
        w = k if isinstance(k, WaveIndex) else WaveIndex(*k)
        if not w.is_representative():
            raise KeyError(f"{w} is not a half-lattice representative")
        return 2 * self.index[w] + part

    # complex <-> real coordinates
    def to_complex(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return (q[..., 0::2] + 1j * q[..., 1::2]) / SQRT2

    def to_real(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c)
        q = np.empty(c.shape[:-1] + (self.dim,))
        q[..., 0::2] = SQRT2 * c.real
        q[..., 1::2] = SQRT2 * c.imag
        return q

    # spectra on the rfft layout
    def _scatter(self, vals: np.ndarray) -> np.ndarray:
        """Place half-lattice Fourier values (..., F, H) into rfft spectra."""
        M = self.M
        mh = M // 2 + 1
        out = np.zeros(vals.shape[:-1] + (M * mh,), dtype=complex)
        out[..., self._flat] = vals
        out[..., self._flat_mirror] = np.conj(vals[..., self._axis0])
        return out.reshape(vals.shape[:-1] + (M, mh))

    def _synthesize(self, vals: np.ndarray, workers: int | None = None) -> np.ndarray:
        spec = self._scatter(vals)
        return sfft.irfft2(spec, s=(self.M, self.M), norm="forward", workers=workers)

    def _analyze(self, g: np.ndarray, workers: int | None = None) -> np.ndarray:
        """Fourier coefficients (1/M^2 normalisation) at half-lattice indices."""
        spec = sfft.rfft2(g, norm="forward", workers=workers)
        return spec.reshape(spec.shape[:-2] + (-1,))[..., self._flat]

    def velocity_hat(self, q: np.ndarray) -> np.ndarray:
        """Fourier coefficients of the velocity, shape (..., 2, H)."""
        c = self.to_complex(q)
        return (1j / self.L) * self.pol.T * c[..., None, :]

    # small grids: dense matrices beat per-call FFT overhead
    DENSE_MAX_CELLS = 400

    @property
    def dense(self) -> bool:
        return self.M ** 2 <= self.DENSE_MAX_CELLS

    @cached_property
    def _synth_matrix(self) -> np.ndarray:
        eye = np.eye(self.dim)
        return self._fft_velocity_vorticity(eye).reshape(self.dim, -1)

    @cached_property
    def _proj_matrix(self) -> np.ndarray:
        n = 2 * self.M ** 2
        unit = np.eye(n).reshape(n, 2, self.M, self.M)
        return self.project_hat(self._analyze(unit))

    def velocity(self, q: np.ndarray, workers: int | None = None) -> np.ndarray:
        """Velocity samples on the grid, shape (..., 2, M, M)."""
        if self.dense:
            return self.velocity_vorticity(q)[..., :2, :, :]
        return self._synthesize(self.velocity_hat(q), workers)

    def velocity_vorticity(self, q: np.ndarray, workers: int | None = None) -> np.ndarray:
        """Stacked (u1, u2, omega) grid samples, omega = d1 u2 - d2 u1."""
        if self.dense:
            q = np.asarray(q, dtype=float)
            return (q @ self._synth_matrix).reshape(q.shape[:-1] + (3, self.M, self.M))
        return self._fft_velocity_vorticity(q, workers)

    def _fft_velocity_vorticity(self, q: np.ndarray, workers: int | None = None) -> np.ndarray:
        c = self.to_complex(q)
        uh = (1j / self.L) * self.pol.T * c[..., None, :]
        wh = (-self.kappa / self.L) * self.kabs * c
        return self._synthesize(np.concatenate([uh, wh[..., None, :]], axis=-2), workers)

    def velocity_gradient(self, q: np.ndarray, workers: int | None = None) -> np.ndarray:
        """Grid samples of d_j u_i, shape (..., 2, 2, M, M) indexed [i, j]."""
        uh = self.velocity_hat(q)
        ik = 1j * self.kappa * self.k.T
        gh = uh[..., :, None, :] * ik[None, :, :]
        return self._synthesize(gh, workers)

    def project_grid(self, g: np.ndarray, workers: int | None = None) -> np.ndarray:
        """Leray projection and truncation of a grid vector field (..., 2, M, M)."""
        if self.dense:
            g = np.asarray(g, dtype=float)
            return g.reshape(g.shape[:-3] + (-1,)) @ self._proj_matrix
        fh = self._analyze(g, workers)
        return self.project_hat(fh)

    def project_hat(self, fh: np.ndarray) -> np.ndarray:
        """Real coordinates of P f from Fourier values fh (..., 2, H)."""
        c = -1j * self.L * np.einsum("...ih,hi->...h", fh, self.pol)
        return self.to_real(c)

    # linear algebra in the eigenbasis
    def pow_weights(self, a: float) -> np.ndarray:
        return self.eigenvalues ** a

    def grid_points(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(self.M) * self.L / self.M
        return np.meshgrid(x, x, indexing="ij")


@lru_cache(maxsize=64)
def get_basis(N: int, L: float = 2 * np.pi, M: int | None = None) -> FourierBasis:
    return FourierBasis(N, L, M)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Divergence-free field; coords may carry leading batch dimensions."""

    basis: FourierBasis
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape[-1:] != (self.basis.dim,):
            raise ValueError(f"expected trailing dimension {self.basis.dim}, got {c.shape}")
        object.__setattr__(self, "coords", c)

    @classmethod
    def zeros(cls, basis: FourierBasis) -> "SpectralField":
        return cls(basis, np.zeros(basis.dim))

    @classmethod
    def mode(cls, basis: FourierBasis, k, amplitude: complex = 1.0) -> "SpectralField":
        """Field amplitude * e_k + conj(amplitude) * e_{-k}; unit H-norm for |amplitude| = 1/sqrt(2)."""
        w = k if isinstance(k, WaveIndex) else WaveIndex(*k)
        if not w.is_representative():
            w, amplitude = w.conjugate(), np.conj(amplitude)
        c = np.zeros(basis.n_waves, dtype=complex)
        c[basis.index[w]] = amplitude
        return cls(basis, basis.to_real(c))

    @classmethod
    def unit(cls, basis: FourierBasis, k, part: int = 0) -> "SpectralField":
        """Real orthonormal basis element attached to wave k (part 0 or 1)."""
        q = np.zeros(basis.dim)
        q[basis.coordinate(k, part)] = 1.0
        return cls(basis, q)

    @classmethod
    def from_coeffs(cls, basis: FourierBasis, coeffs: Mapping) -> "SpectralField":
        """Build from a map WaveIndex -> complex amplitude; pairs must be conjugate."""
        c = np.zeros(basis.n_waves, dtype=complex)
        seen = {}
        for key, val in coeffs.items():
            w = key if isinstance(key, WaveIndex) else WaveIndex(*key)
            if max(abs(w.k1), abs(w.k2)) > basis.N:
                raise ValueError(f"{w} exceeds cutoff {basis.N}")
            rep = w.representative()
            v = complex(val) if w.is_representative() else np.conj(complex(val))
            if rep in seen and abs(seen[rep] - v) > 1e-12 * max(1.0, abs(v)):
                raise ValueError(f"coefficients of {w} and its conjugate break symmetry")
            seen[rep] = v
            c[basis.index[rep]] = v
        return cls(basis, basis.to_real(c))

    @property
    def coeffs(self) -> dict:
        """Full-lattice map WaveIndex -> complex amplitude (single field only)."""
        if self.coords.ndim != 1:
            raise ValueError("coeffs is defined for a single field")
        c = self.basis.to_complex(self.coords)
        out = {}
        for w, v in zip(self.basis.waves, c):
            out[w] = complex(v)
            out[w.conjugate()] = complex(np.conj(v))
        return out

    def __add__(self, other):
        _check_same(self, other)
        return SpectralField(self.basis, self.coords + other.coords)

    def __sub__(self, other):
        _check_same(self, other)
        return SpectralField(self.basis, self.coords - other.coords)

    def __neg__(self):
        return SpectralField(self.basis, -self.coords)

    def __mul__(self, a):
        return SpectralField(self.basis, self.coords * np.asarray(a)[..., None])

    __rmul__ = __mul__

    def inner(self, other) -> np.ndarray:
        _check_same(self, other)
        return np.sum(self.coords * other.coords, axis=-1)

    def grid(self) -> "Grid":
        return Grid(self.basis.M, self.basis.L, self.basis.velocity(self.coords))


def _check_same(a: SpectralField, b: SpectralField):
    if a.basis.N != b.basis.N or a.basis.L != b.basis.L:
        raise ValueError("fields have different cutoff or period")


@dataclass(frozen=True, eq=False)
class Grid:
    """Real 2-vector samples on the uniform M x M grid, values shape (..., 2, M, M)."""

    M: int
    L: float
    values: np.ndarray

    def fourier(self) -> np.ndarray:
        """Full FFT coefficients, shape (..., 2, M, M), normalised by 1/M^2."""
        return sfft.fft2(self.values, norm="forward")

    @classmethod
    def from_fourier(cls, fh: np.ndarray, L: float) -> "Grid":
        M = fh.shape[-1]
        return cls(M, L, sfft.ifft2(fh, norm="forward").real)


def leray_project(raw, basis: FourierBasis) -> SpectralField:
    """Divergence-free part of a vector field, truncated to the basis cutoff.

    `raw` is a Grid of physical samples or a complex array of full FFT
    coefficients of shape (..., 2, M, M) in numpy ordering (1/M^2 scaled).
    The k = 0 mean is discarded.
    """
    if isinstance(raw, Grid):
        if raw.M == basis.M:
            return SpectralField(basis, basis.project_grid(raw.values))
        fh = raw.fourier()
    else:
        fh = np.asarray(raw)
    M = fh.shape[-1]
    if M <= 2 * basis.N:
        raise ValueError("raw field does not resolve the cutoff")
    k = basis.k.astype(int)
    vals = fh[..., k[:, 0] % M, k[:, 1] % M]
    return SpectralField(basis, basis.project_hat(vals))


def stokes_pow(x: SpectralField, a: float) -> SpectralField:
    return SpectralField(x.basis, x.coords * x.basis.pow_weights(a))


def lp_basis(basis: FourierBasis, p: float) -> FourierBasis:
    """Basis whose grid integrates |u|^p exactly when p is even."""
    if p in (2, 4, 6):
        M = max(basis.M, default_grid_size(basis.N, int(p)))
        return basis if M == basis.M else get_basis(basis.N, basis.L, M)
    return basis


def lp_norm_coords(basis: FourierBasis, q: np.ndarray, p: float) -> np.ndarray:
    if p not in LP_EXPONENTS:
        raise ValueError(f"unsupported Lp exponent {p}; use one of {LP_EXPONENTS}")
    b = lp_basis(basis, p)
    u = b.velocity(q)
    mag = np.sqrt(u[..., 0, :, :] ** 2 + u[..., 1, :, :] ** 2)
    if p == np.inf:
        return mag.max(axis=(-2, -1))
    return (b.cell * np.sum(mag ** p, axis=(-2, -1))) ** (1.0 / p)


def norm(x: SpectralField, space: str | tuple = "H"):
    """Norm of x in 'H', 'V', ('frac', a) for |A^a x|, or ('Lp', p)."""
    b, q = x.basis, x.coords
    if isinstance(space, str):
        if space == "H":
            return np.sqrt(np.sum(q * q, axis=-1))
        if space == "V":
            return np.sqrt(np.sum(b.eigenvalues * q * q, axis=-1))
        raise ValueError(f"unknown space {space!r}")
    kind, arg = space
    if kind == "frac":
        return np.sqrt(np.sum(b.eigenvalues ** (2 * arg) * q * q, axis=-1))
    if kind == "Lp":
        return lp_norm_coords(b, q, arg)
    raise ValueError(f"unknown space {space!r}")


def random_field(basis: FourierBasis, rng: np.random.Generator, size: int | tuple = (),
                 smoothness: float = 1.0, scale: float = 1.0) -> SpectralField:
    """Gaussian random field with coordinate std proportional to lambda_k^(-smoothness/2)."""
    size = (size,) if isinstance(size, int) else tuple(size)
    std = scale * (basis.eigenvalues / basis.lambda1) ** (-smoothness / 2)
    return SpectralField(basis, rng.standard_normal(size + (basis.dim,)) * std)


def calibrate_agmon(basis: FourierBasis, delta: float, n_fields: int = 1000,
                    seed: int = 0, smoothness: float = 1.0) -> float:
    """Largest ratio |x|_inf / (|A^d x|^{2d} |A^{d+1/2} x|^{1-2d}) over a random ensemble."""
    rng = np.random.default_rng(seed)
    x = random_field(basis, rng, n_fields, smoothness)
    return float(np.max(agmon_ratio(x, delta)))


def agmon_ratio(x: SpectralField, delta: float) -> np.ndarray:
    sup = norm(x, ("Lp", np.inf))
    lo = norm(x, ("frac", delta))
    hi = norm(x, ("frac", delta + 0.5))
    return sup / (lo ** (2 * delta) * hi ** (1 - 2 * delta))


# serialization

_MAGIC = b"SCBFFLD1"


def field_to_json(x: SpectralField) -> str:
    c = x.basis.to_complex(x.coords)
    modes = [[w.k1, w.k2, float(v.real), float(v.imag)] for w, v in zip(x.basis.waves, c)]
    return json.dumps({"L": x.basis.L, "N": x.basis.N, "modes": modes})


def field_from_json(text: str, M: int | None = None) -> SpectralField:
    rec = json.loads(text)
    basis = get_basis(int(rec["N"]), float(rec["L"]), M)
    coeffs = _validated_modes(basis, ((int(a), int(b), complex(re, im))
                                      for a, b, re, im in rec["modes"]))
    return SpectralField.from_coeffs(basis, coeffs)


def field_to_bytes(x: SpectralField) -> bytes:
    head = _MAGIC + struct.pack("<idI", x.basis.N, x.basis.L, x.basis.dim)
    return head + np.ascontiguousarray(x.coords, dtype="<f8").tobytes()


def field_from_bytes(data: bytes, M: int | None = None) -> SpectralField:
    if data[:8] != _MAGIC:
        raise ValueError("not a field record")
    N, L, dim = struct.unpack_from("<idI", data, 8)
    basis = get_basis(N, L, M)
    if dim != basis.dim:
        raise ValueError("dimension does not match cutoff")
    q = np.frombuffer(data, dtype="<f8", offset=8 + struct.calcsize("<idI"))
    if q.size != dim or not np.all(np.isfinite(q)):
        raise ValueError("corrupt or non-finite coordinates")
    return SpectralField(basis, q.copy())


def _validated_modes(basis: FourierBasis, rows: Iterable) -> dict:
    out = {}
    for k1, k2, v in rows:
        w = WaveIndex(k1, k2)
        if max(abs(k1), abs(k2)) > basis.N:
            raise ValueError(f"{w} exceeds cutoff {basis.N}")
        if not np.isfinite(v):
            raise ValueError(f"non-finite amplitude at {w}")
        if w in out or w.conjugate() in out:
            raise ValueError(f"duplicate entry for {w}")
        out[w] = v
    return out
