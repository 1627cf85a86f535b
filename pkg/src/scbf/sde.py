"""Time integration of the Galerkin system, its controlled variant and first variation.

The scheme is a Lawson (integrating-factor) Euler step:

    X_{n+1} = exp(-l dt) [X_n - dt N(X_n) + dt sqrt(Q) U_n + sqrt(Q) dW_n],

with l = mu lambda_k + alpha per coordinate, so the linear part is exact and
the nonlinearity N = B_eps + beta C_eps and the noise are explicit.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, asdict
from typing import Callable, Iterable, Sequence

import numpy as np

from .operators import DriftKernel, ModelParams, NoiseSpec
from .spectral import SpectralField

BLOWUP_NORM = 1e6


class BlowUpError(RuntimeError):
    """Raised when a state leaves the finite range; carries the last finite state."""

    def __init__(self, t: float, last_state: np.ndarray, paths: np.ndarray | None = None):
        self.t = t
        self.last_state = last_state
        self.paths = paths
        super().__init__(f"state blew up at t={t:.6g}")


@dataclass(frozen=True)
class WienerStream:
    """Deterministic standard Gaussian increments of variance dt per mode and step."""

    seed: int
    stream_id: int
    dt: float

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([int(self.seed) & (2 ** 64 - 1), int(self.stream_id)])
        return np.random.Generator(np.random.PCG64(ss))

    def increments(self, n_steps: int, dim: int, substeps: int = 1) -> np.ndarray:
        """Increments over steps of length substeps*dt, shape (n_steps, dim)."""
        z = self.generator().standard_normal((n_steps * substeps, dim)) * math.sqrt(self.dt)
        return z.reshape(n_steps, substeps, dim).sum(axis=1)


class BatchNoise:
    """Block-buffered increments for a batch of streams sharing seed and dt.

    Each stream is drawn sequentially, so coarse increments (sums of
    `substeps` fine ones) match a fine-step run on the same streams.
    """

    def __init__(self, seed: int, stream_ids: Sequence[int], dt: float, dim: int,
                 substeps: int = 1, block: int = 16):
        self.streams = [WienerStream(seed, int(s), dt) for s in stream_ids]
        self._gens = [s.generator() for s in self.streams]
        self.dim = dim
        self.substeps = int(substeps)
        self.block = int(block)
        self.scale = math.sqrt(dt)
        self._buf = None
        self._pos = self.block

    def __len__(self):
        return len(self._gens)

    def next(self) -> np.ndarray:
        if self._pos >= self.block:
            k, s = self.block, self.substeps
            raw = np.stack([g.standard_normal((k * s, self.dim)) for g in self._gens])
            self._buf = raw.reshape(len(self._gens), k, s, self.dim).sum(axis=2) * self.scale
            self._pos = 0
        out = self._buf[:, self._pos]
        self._pos += 1
        return out


@dataclass
class StepInfo:
    """State handed to observers before each step (and once at the end, with dW None)."""

    n: int
    t: float
    q: np.ndarray
    lr: np.ndarray
    xi: np.ndarray | None = None
    dW: np.ndarray | None = None
    U: np.ndarray | None = None


def clip_controls(U: np.ndarray, R: float | None) -> np.ndarray:
    if R is None:
        return U
    nrm = np.sqrt(np.sum(U * U, axis=-1, keepdims=True))
    return U * np.minimum(1.0, R / np.where(nrm > 0, nrm, 1.0))


class Integrator:
    """Lawson-Euler stepping of a batch of Galerkin states (shape (P, dim))."""

    def __init__(self, p: ModelParams, noise: NoiseSpec | None, dt: float,
                 workers: int | None = None):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.p, self.noise, self.dt = p, noise, float(dt)
        self.basis = p.basis
        self.kernel = DriftKernel(p, workers)
        self.rates = p.linear_rates()
        self.decay = np.exp(-self.rates * self.dt)
        if noise is not None and noise.eig.shape != (self.basis.dim,):
            raise ValueError("noise spec does not match the model cutoff")
        self.sqrt_mu = noise.sqrt_eig if noise is not None else np.zeros(self.basis.dim)

    def run(self, q0: np.ndarray, n_steps: int, noise: BatchNoise | None = None, *,
            xi0: np.ndarray | None = None,
            control: Callable[[float, np.ndarray], np.ndarray] | None = None,
            R: float | None = None,
            observer: Callable[[StepInfo], None] | None = None):
        """Advance n_steps; returns the final states (and variations when xi0 given)."""
        q = np.array(q0, dtype=float)
        xi = None if xi0 is None else np.array(xi0, dtype=float)
        dt = self.dt
        need_grid = xi is not None
        for n in range(n_steps + 1):
            t = n * dt
            res = self.kernel.evaluate(q, keep_grid=need_grid)
            nl, lr = res[0], res[1]
            if n == n_steps:
                if observer is not None:
                    observer(StepInfo(n, t, q, lr, xi))
                break
            dW = noise.next() if noise is not None else None
            U = None
            if control is not None:
                U = clip_controls(control(t, q), R)
            if observer is not None:
                observer(StepInfo(n, t, q, lr, xi, dW, U))
            drive = -dt * nl
            if dW is not None:
                drive = drive + self.sqrt_mu * dW
            if U is not None:
                drive = drive + dt * self.sqrt_mu * U
            q_next = self.decay * (q + drive)
            if xi is not None:
                dxi = self.kernel.derivative(q, res[2], xi, n_dirs_axis=xi.ndim == q.ndim + 1)
                xi = self.decay * (xi - dt * dxi)
            self._guard(q_next, q, t + dt)
            q = q_next
        return (q, xi) if xi0 is not None else q

    @staticmethod
    def _guard(q_next, q_prev, t):
        nrm = np.sqrt(np.sum(q_next * q_next, axis=-1))
        bad = ~np.isfinite(nrm) | (nrm > BLOWUP_NORM)
        if np.any(bad):
            raise BlowUpError(t, q_prev, np.flatnonzero(np.atleast_1d(bad)))


# single-field interfaces

def step_scbf(x: SpectralField, p: ModelParams, q: NoiseSpec | None, dW: np.ndarray | None,
              dt: float, control: SpectralField | None = None, R: float | None = None) -> SpectralField:
    """One Lawson-Euler step of the (optionally controlled) system."""
    integ = Integrator(p, q, dt)
    nl, _ = integ.kernel.evaluate(x.coords)
    drive = -dt * nl
    if dW is not None:
        drive = drive + integ.sqrt_mu * np.asarray(dW)
    if control is not None:
        drive = drive + dt * integ.sqrt_mu * clip_controls(control.coords, R)
    out = integ.decay * (x.coords + drive)
    Integrator._guard(out, x.coords, dt)
    return SpectralField(x.basis, out)


@dataclass
class VariationState:
    xi: SpectralField
    h: SpectralField
    base: "Trajectory | None" = None


def step_variation(v: VariationState, x_t: SpectralField, p: ModelParams, dt: float) -> VariationState:
    """One step of d xi/dt + (mu A + alpha) xi + DN(x_t) xi = 0, consistent with step_scbf."""
    integ = Integrator(p, None, dt)
    _, _, g = integ.kernel.evaluate(x_t.coords, keep_grid=True)
    dxi = integ.kernel.derivative(x_t.coords, g, v.xi.coords)
    out = integ.decay * (v.xi.coords - dt * dxi)
    Integrator._guard(out, v.xi.coords, dt)
    return VariationState(SpectralField(x_t.basis, out), v.h, v.base)


@dataclass
class Trajectory:
    """Recorded path with per-step diagnostics."""

    times: np.ndarray
    coords: np.ndarray
    params: ModelParams
    noise: NoiseSpec | None
    normH: np.ndarray
    normV: np.ndarray
    normLr: np.ndarray
    energy_residual: np.ndarray
    integral_V: np.ndarray
    integral_H: np.ndarray
    integral_Lr: np.ndarray
    stream: WienerStream | None = None

    @property
    def states(self) -> list:
        b = self.params.basis
        return [SpectralField(b, c) for c in self.coords]

    @property
    def final(self) -> SpectralField:
        return SpectralField(self.params.basis, self.coords[-1])

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "normH", "normV", "normLr", "energy_residual"])
        for row in zip(self.times, self.normH, self.normV, self.normLr, self.energy_residual):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def simulate(x0: SpectralField, p: ModelParams, q: NoiseSpec | None, T: float, dt: float,
             stream: WienerStream | None = None,
             control_policy: Callable[[float, np.ndarray], np.ndarray] | None = None,
             R: float | None = None, substeps: int = 1) -> Trajectory:
    """Simulate one path; stream.dt must equal dt/substeps when given."""
    n_steps = int(round(T / dt))
    if T < 0 or abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("dt must divide T")
    dim = p.basis.dim
    noise = None
    if stream is not None and q is not None:
        if abs(stream.dt * substeps - dt) > 1e-15 * dt:
            raise ValueError("stream resolution does not match dt/substeps")
        noise = BatchNoise(stream.seed, [stream.stream_id], stream.dt, dim, substeps)
    integ = Integrator(p, q, dt)
    rec = _Recorder(p, q, dt)
    ctrl = None
    if control_policy is not None:
        ctrl = lambda t, qq: control_policy(t, qq)
    integ.run(x0.coords[None, :], n_steps, noise, control=ctrl, R=R, observer=rec)
    return rec.trajectory(stream)


class _Recorder:
    def __init__(self, p, q, dt):
        self.p, self.q, self.dt = p, q, dt
        self.rows = []
        self.iV = self.iH = self.iL = self.mart = 0.0
        self.trq = q.trace() if q is not None else 0.0
        self.sqrt_mu = q.sqrt_eig if q is not None else None
        self.x0n = None

    def __call__(self, s: StepInfo):
        b = self.p.basis
        x = s.q[0]
        h2 = float(x @ x)
        v2 = float(np.sum(b.eigenvalues * x * x))
        lr = float(s.lr[0])
        if self.x0n is None:
            self.x0n = h2
        p = self.p
        res = (h2 + 2 * (p.mu * self.iV + p.alpha * self.iH + p.beta * self.iL)
               - self.x0n - s.t * self.trq - 2 * self.mart)
        self.rows.append((s.t, x.copy(), h2, v2, lr, res, self.iV, self.iH, self.iL))
        self.iV += v2 * self.dt
        self.iH += h2 * self.dt
        self.iL += lr * self.dt
        if s.dW is not None and self.sqrt_mu is not None:
            self.mart += float(np.sum(self.sqrt_mu * s.dW[0] * x))

    def trajectory(self, stream):
        cols = list(zip(*self.rows))
        r1 = self.p.r + 1
        return Trajectory(
            times=np.array(cols[0]), coords=np.array(cols[1]), params=self.p, noise=self.q,
            normH=np.sqrt(np.array(cols[2])), normV=np.sqrt(np.array(cols[3])),
            normLr=np.array(cols[4]) ** (1.0 / r1), energy_residual=np.array(cols[5]),
            integral_V=np.array(cols[6]), integral_H=np.array(cols[7]),
            integral_Lr=np.array(cols[8]), stream=stream)


@dataclass(frozen=True)
class FlaggedValue:
    value: float
    flagged: bool = False
    note: str = ""


def improve_bound(p: ModelParams, q: NoiseSpec) -> float:
    """Largest admissible exponent (2 alpha + mu lambda_1) / (2 Tr Q)."""
    trq = q.trace()
    return math.inf if trq == 0 else (2 * p.alpha + p.mu * p.lambda1) / (2 * trq)


def exp_functional(traj: Trajectory, sigma: float) -> FlaggedValue:
    """exp(sigma Z(T)), Z = |X|^2 + mu int |X|_V^2 + beta int |X|_{L^{r+1}}^{r+1}."""
    p = traj.params
    z = traj.normH[-1] ** 2 + p.mu * traj.integral_V[-1] + p.beta * traj.integral_Lr[-1]
    flagged, note = False, ""
    if traj.noise is not None and not 0 <= sigma <= improve_bound(p, traj.noise):
        flagged, note = True, "sigma outside the admissible exponential range"
    return FlaggedValue(float(np.exp(sigma * z)), flagged, note)


# ensemble helpers

def chunked(ids: Sequence[int], size: int) -> Iterable[np.ndarray]:
    ids = np.asarray(ids)
    for i in range(0, len(ids), size):
        yield ids[i:i + size]


def energy_balance_terms(x0: SpectralField, p: ModelParams, q: NoiseSpec, T: float, dt: float,
                         seed: int, stream_ids: Sequence[int], substeps: int = 1,
                         chunk: int = 2000, workers: int | None = None) -> dict:
    """Per-path pieces of the energy identity for a batch of streams.

    Returns arrays `raw` (identity residual without the martingale), `mart`
    (2 sum (sqrt(Q) dW, X)) and `qv` (realised quadratic variation of sqrt(Q) W
    minus T Tr Q).  raw - mart - qv is a low-variance estimator of the
    discretisation bias of the identity.
    """
    n_steps = int(round(T / dt))
    integ = Integrator(p, q, dt, workers)
    b = p.basis
    out = {"raw": [], "mart": [], "qv": []}
    for ids in chunked(stream_ids, chunk):
        P = len(ids)
        acc = {"I": np.zeros(P), "M": np.zeros(P), "QV": np.zeros(P), "last": None}

        def obs(s: StepInfo, acc=acc):
            x = s.q
            if s.dW is None:
                acc["last"] = np.sum(x * x, axis=1)
                return
            h2 = np.sum(x * x, axis=1)
            v2 = np.sum(b.eigenvalues * x * x, axis=1)
            acc["I"] += (p.mu * v2 + p.alpha * h2 + p.beta * s.lr) * dt
            sw = q.sqrt_eig * s.dW
            acc["M"] += np.sum(sw * x, axis=1)
            acc["QV"] += np.sum(sw * sw, axis=1)

        noise = BatchNoise(seed, ids, dt / substeps, b.dim, substeps)
        q0 = np.broadcast_to(x0.coords, (P, b.dim))
        integ.run(q0, n_steps, noise, observer=obs)
        x2 = float(x0.coords @ x0.coords)
        out["raw"].append(acc["last"] + 2 * acc["I"] - x2 - T * q.trace())
        out["mart"].append(2 * acc["M"])
        out["qv"].append(acc["QV"] - T * q.trace())
    return {k: np.concatenate(v) for k, v in out.items()}


def sample_paths(q0: np.ndarray, p: ModelParams, q: NoiseSpec | None, dt: float,
                 record_steps: Sequence[int], seed: int, stream_ids: Sequence[int],
                 substeps: int = 1, chunk: int = 2000, workers: int | None = None,
                 xi0: np.ndarray | None = None) -> np.ndarray | tuple:
    """States at the given step indices, shape (P, n_record, dim).

    q0 may be a single state or one state per stream.  With xi0 (shape
    (D, dim) shared, or (P, D, dim)), variations at the record steps are
    returned as well, shape (P, n_record, D, dim).
    """
    record_steps = sorted(set(int(s) for s in record_steps))
    pos = {s: i for i, s in enumerate(record_steps)}
    stream_ids = np.asarray(stream_ids)
    dim = p.basis.dim
    q0 = np.asarray(q0, dtype=float)
    per_path = q0.ndim == 2
    integ = Integrator(p, q, dt, workers)
    outs, xouts = [], []
    for start in range(0, len(stream_ids), chunk):
        ids = stream_ids[start:start + chunk]
        P = len(ids)
        qs = q0[start:start + P] if per_path else np.broadcast_to(q0, (P, dim))
        store = np.zeros((P, len(record_steps), dim))
        xstore = None
        xi = None
        if xi0 is not None:
            x0a = np.asarray(xi0, dtype=float)
            xi = x0a[start:start + P] if x0a.ndim == 3 else np.broadcast_to(x0a, (P,) + x0a.shape)
            xstore = np.zeros((P, len(record_steps)) + xi.shape[1:])

        def obs(s: StepInfo):
            i = pos.get(s.n)
            if i is not None:
                store[:, i] = s.q
                if xstore is not None:
                    xstore[:, i] = s.xi

        noise = BatchNoise(seed, ids, dt / substeps, dim, substeps) if q is not None else None
        integ.run(qs, record_steps[-1], noise, xi0=xi, observer=obs)
        outs.append(store)
        if xstore is not None:
            xouts.append(xstore)
    states = np.concatenate(outs) if outs else np.zeros((0, len(record_steps), dim))
    if xi0 is not None:
        return states, np.concatenate(xouts)
    return states


# checkpoints

_CKPT_MAGIC = b"SCBFCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, traj: Trajectory, seed: int | None = None):
    head = {"version": _CKPT_VERSION, "params": asdict(traj.params),
            "noise": json.loads(traj.noise.to_json()) if traj.noise is not None else None,
            "seed": seed if seed is not None else (traj.stream.seed if traj.stream else None),
            "stream_id": traj.stream.stream_id if traj.stream else None,
            "t": float(traj.times[-1])}
    blob = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(blob)) + blob)
        fh.write(np.ascontiguousarray(traj.coords[-1], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, SpectralField]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, n = struct.unpack_from("<II", data, 8)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    head = json.loads(data[16:16 + n])
    p = ModelParams(**head["params"])
    q = np.frombuffer(data, dtype="<f8", offset=16 + n).copy()
    return head, SpectralField(p.basis, q)
