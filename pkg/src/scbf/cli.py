"""Command line entry point: scbf {check,simulate,invariant,kolmogorov,hjb,stop}."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import scipy.fft

from . import __version__
from .config import ConfigError, EXPERIMENTS, RunManifest, config_hash, dumps, output_dir, resolve
from .experiments import RUNNERS
from .sde import BlowUpError

EXIT_OK, EXIT_CHECK, EXIT_ERROR = 0, 1, 2


def write_artifacts(out: str, artifacts: dict) -> list:
    os.makedirs(out, exist_ok=True)
    paths = []
    for name, data in sorted(artifacts.items()):
        path = os.path.join(out, name)
        mode = "wb" if isinstance(data, bytes) else "w"
        with open(path, mode) as fh:
            fh.write(data)
        paths.append(name)
    return paths


def cmd_run(cfg: dict, out: str, threads: int | None = None) -> tuple:
    """Run the configured experiment; writes artifacts, the resolved config and the manifest."""
    kind = cfg["experiment"]["kind"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.json"), "w") as fh:
        fh.write(dumps(cfg))
    man = RunManifest(config_hash(cfg), __version__, kind)
    t0 = time.perf_counter()
    man.artifacts = ["resolved_config.json"]
    try:
        with scipy.fft.set_workers(threads or 1):
            artifacts, checks, text = RUNNERS[kind](cfg)
        man.artifacts += write_artifacts(out, artifacts)
        man.checks = {k: bool(v) for k, v in checks.items()}
    except Exception as e:
        man.error = f"{type(e).__name__}: {e}"
        raise
    finally:
        man.wall_time = time.perf_counter() - t0
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            fh.write(man.to_json())
    return man, text


def cmd_check(cfg: dict, out: str, require: list) -> tuple:
    cfg = dict(cfg)
    cfg["experiment"] = dict(cfg["experiment"], require=sorted(set(cfg["experiment"].get("require", [])) | set(require)))
    return cmd_run(cfg, out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scbf", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, help="cap on FFT worker threads")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "check":
            sp.add_argument("--require-419", action="store_true", dest="require_419")
            sp.add_argument("--require-439", action="store_true", dest="require_439")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        raw.setdefault("experiment", {"kind": args.command})
        if raw["experiment"].get("kind", args.command) != args.command:
            raise ConfigError(f"config experiment is {raw['experiment']['kind']!r}, not {args.command!r}")
        raw["experiment"].setdefault("kind", args.command)
        if args.seed is not None:
            raw["seed"] = args.seed
            raw.get("sim", {}).pop("seed", None)
        cfg = resolve(raw)
        out = output_dir(cfg, args.out)
        if args.command == "check":
            req = [c for c, flag in (("419", args.require_419), ("439", args.require_439)) if flag]
            man, text = cmd_check(cfg, out, req)
        else:
            man, text = cmd_run(cfg, out, args.threads)
    except (ConfigError, OSError, ValueError) as e:  # json.JSONDecodeError is a ValueError
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except BlowUpError as e:
        print(f"error: simulation blew up at t = {e.t:g}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    print(text)
    failed = [k for k, v in man.checks.items() if not v]
    for k, v in sorted(man.checks.items()):
        print(f"{'PASS' if v else 'FAIL'} {k}")
    return EXIT_CHECK if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
