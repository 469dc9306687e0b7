"""Command line entry point: ``rmflab run | report | validate``.

Exit codes: 0 all criteria pass, 2 some criterion failed, 1 execution or
configuration error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from .experiments import ExperimentConfig, ExperimentReport, run_experiment
from .randfield import ConfigError

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2
MANIFEST, RESULTS, SUMMARY = "manifest.json", "results.csv", "summary.json"
SEED_SCHEME = "splitmix64 counter: realization r uses derive_seed(seed, r)"

log = logging.getLogger("rmflab")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def atomic_write(path: Path, text: str) -> None:
    """Write through a temporary file in the same directory and rename over the target."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(data)


def _parse_seed(value: str) -> int:
    try:
        seed = int(value, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {value!r}") from None
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return seed


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("workers must be >= 1")
    return n


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.seed is not None:
        try:
            cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_ERROR
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_path": str(Path(args.config).resolve()), "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(), "seed": cfg.seed, "seed_scheme": SEED_SCHEME,
        "out_dir": str(out.resolve()), "workers": args.workers, "started": _now(), "finished": None,
        "status": "running", "cells": {},
    }
    atomic_write(out / MANIFEST, _dump(manifest))
    try:
        report = run_experiment(cfg, workers=args.workers)
    except Exception as exc:
        manifest.update(status="error", error=f"{type(exc).__name__}: {exc}", finished=_now())
        atomic_write(out / MANIFEST, _dump(manifest))
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    atomic_write(out / RESULTS, report.csv_text())
    atomic_write(out / SUMMARY, report.summary_json())
    cells: dict[str, str] = {}
    for row in report.rows:
        prev = cells.get(row.cell, "ok")
        cells[row.cell] = row.status if prev == "ok" else prev
    manifest.update(status="complete", finished=_now(), cells=cells, passed=report.passed)
    atomic_write(out / MANIFEST, _dump(manifest))
    print(report.table())
    return EXIT_OK if report.passed else EXIT_FAILED


def _load_manifest(path: Path) -> dict:
    if path.is_dir():
        path = path / MANIFEST
    manifest = json.loads(path.read_text())
    if not isinstance(manifest, dict):
        raise ValueError("manifest is not a JSON object")
    for key in ("config", "seed", "out_dir", "status"):
        if key not in manifest:
            raise ValueError(f"manifest lacks {key!r}")
    manifest["_dir"] = str(path.parent)
    return manifest


def cmd_report(args) -> int:
    try:
        manifest = _load_manifest(Path(args.manifest))
        if manifest["status"] != "complete":
            raise ValueError(f"run status is {manifest['status']!r}, no results to report")
        cfg = ExperimentConfig.from_dict(manifest["config"])
        out = Path(manifest["_dir"])
        report = ExperimentReport.from_csv(cfg, (out / RESULTS).read_text())
    except (OSError, ValueError, KeyError, ConfigError) as exc:
        print(f"cannot read run: {exc}", file=sys.stderr)
        return EXIT_ERROR
    atomic_write(out / SUMMARY, report.summary_json())
    print(report.table())
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{cfg.kind}: valid (hash {cfg.config_hash()[:16]})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmflab", description="Random magnetic field experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment configuration")
    r.add_argument("--config", required=True, help="JSON experiment configuration")
    r.add_argument("--seed", type=_parse_seed, default=None, help="master seed (overrides the config)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--workers", type=_positive, default=1, help="worker processes")
    r.set_defaults(func=cmd_run)
    rp = sub.add_parser("report", help="print the criteria table of a finished run")
    rp.add_argument("manifest", help="manifest.json or the run directory")
    rp.set_defaults(func=cmd_report)
    v = sub.add_parser("validate", help="check a configuration without running it")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
