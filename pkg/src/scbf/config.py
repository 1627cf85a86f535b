"""Run configuration: JSON schema, defaults, hashing and manifests."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .operators import ModelParams, NoiseSpec
from .spectral import SpectralField, WaveIndex

SCHEMA_VERSION = 1
EXPERIMENTS = ("check", "simulate", "invariant", "kolmogorov", "hjb", "stop")
OUTPUT_ENV = "SCBF_OUTPUT_DIR"

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer"}

SCHEMA = {
    "type": "object",
    "required": ["schema_version", "seed", "experiment"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {"mu": _pos, "alpha": {"type": "number", "minimum": 0},
                           "beta": {"type": "number", "minimum": 0}, "r": {"enum": [1, 2, 3]},
                           "N": {"type": "integer", "minimum": 1}, "L": _pos,
                           "eps": {"type": "number", "minimum": 0}, "delta": _num,
                           "convection": {"type": "boolean"}}},
        "noise": {
            "type": "object", "additionalProperties": False,
            "properties": {"trace": {"type": "number", "minimum": 0}, "decay": _num,
                           "eigenvalues": {"type": ["array", "null"], "items": {"type": "number"}}}},
        "sim": {
            "type": "object", "additionalProperties": False,
            "properties": {"T": {"type": "number", "minimum": 0}, "dt": _pos,
                           "n_paths": {"type": "integer", "minimum": 1},
                           "seed": {"type": "integer", "minimum": 0},
                           "substeps": {"type": "integer", "minimum": 1}}},
        "experiment": {
            "type": "object", "required": ["kind"],
            "properties": {"kind": {"enum": list(EXPERIMENTS)}}},
    },
}

DEFAULTS = {
    "model": {"mu": 1.0, "alpha": 1.0, "beta": 1.0, "r": 3, "N": 8, "L": 2 * np.pi, "eps": 0.0,
              "delta": 0.375, "convection": True},
    "noise": {"trace": 0.5, "decay": 2.5, "eigenvalues": None},
    "sim": {"T": 1.0, "dt": 1e-3, "n_paths": 100, "substeps": 1},
    "output_dir": "scbf_out",
}

EXPERIMENT_DEFAULTS = {
    "check": {"gamma1": 1.0, "require": []},
    "simulate": {"x0": [[1, 0, 0.7071067811865476, 0.0]], "stream_id": 0, "sigma": 0.0},
    "invariant": {"x0s": [[], [[1, 0, 0.7071067811865476, 0.0]]], "horizon": 20.0,
                  "burn_in": None, "stride": None, "n_streams": 32, "sigma_fraction": 0.5,
                  "gap_times": [1.0, 2.0, 4.0], "gap_paths": 400, "require": ["419"]},
    "kolmogorov": {"horizon": 20.0, "n_streams": 32, "n_cylinders": 10, "h_scale": 1.0,
                   "lambdas": [1.0, 4.0, 16.0], "cloud_size": 64, "cloud_paths": 32,
                   "resolvent_dt": 0.02, "require": []},
    "hjb": {"R": 1.0, "lambda_factor": 4.0, "f_linear": 6.0, "f_quadratic": 1.0,
            "horizon": 12.0, "n_streams": 64, "cloud_size": 300, "cloud_paths": 32,
            "resolvent_dt": 0.01, "T_max": 2.5, "tol": 1e-3, "max_iter": 30,
            "tournament_paths": 2000, "n_random": 3, "require": []},
    "stop": {"dims": 1, "n_nodes": 241, "half_width": 3.0, "T": 1.0, "n_steps": 500,
             "kappa": 0.1, "s0": 4.0, "F": "enstrophy", "G": "obstacle", "y0": [2.0],
             "n_paths": 10000, "n_quad": 20, "supermartingale_paths": 200,
             "require": []},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(raw: dict) -> dict:
    """Validate and expand every default."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid config: {e.message} at {list(e.absolute_path)}") from e
    kind = raw["experiment"]["kind"]
    full = _merge(DEFAULTS, {k: v for k, v in raw.items() if k != "experiment"})
    exp = _merge(EXPERIMENT_DEFAULTS[kind], raw["experiment"])
    unknown = set(exp) - set(EXPERIMENT_DEFAULTS[kind]) - {"kind"}
    if unknown:
        raise ConfigError(f"unknown {kind} options: {sorted(unknown)}")
    full["experiment"] = exp
    if full["sim"].setdefault("seed", full["seed"]) != full["seed"]:
        raise ConfigError("sim.seed differs from the top-level seed")
    try:
        model_params(full)
        noise_spec(full)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return full


def load(path: str) -> dict:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON: {e}") from e
    return resolve(raw)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def output_dir(cfg: dict, override: str | None = None) -> str:
    return override or os.environ.get(OUTPUT_ENV) or cfg["output_dir"]


def model_params(cfg: dict) -> ModelParams:
    return ModelParams(**cfg["model"])


def noise_spec(cfg: dict) -> NoiseSpec:
    p = model_params(cfg)
    n = cfg["noise"]
    if n.get("eigenvalues") is not None:
        eig = np.asarray(n["eigenvalues"], dtype=float)
        if eig.shape != (p.basis.dim,):
            raise ConfigError(f"noise eigenvalues need length {p.basis.dim}")
        return NoiseSpec(eig, float(n["decay"]), p.N, p.L)
    return NoiseSpec.power_law(p.basis, float(n["trace"]), float(n["decay"]))


def field_from_modes(basis, modes) -> SpectralField:
    """[[k1, k2, re, im], ...] -> field; an empty list gives zero."""
    if not modes:
        return SpectralField.zeros(basis)
    return SpectralField.from_coeffs(basis, {WaveIndex(int(a), int(b)): complex(re, im)
                                             for a, b, re, im in modes})


@dataclass
class RunManifest:
    config_hash: str
    version: str
    experiment: str
    wall_time: float = 0.0
    artifacts: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True)
