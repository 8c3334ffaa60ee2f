"""Command-line interface.

Subcommands: ``validate``, ``lg-experiment``, ``bench``, ``elbo-hierarchy``
and ``smooth``. Settings come from command defaults, then an optional
JSON ``--config`` file, then ``--key=value`` flags. Exit status is 0 on
success, 1 when a check fails and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import experiments
from .smoother import SCHEMA_VERSION, pvmc_smooth
from .ssm import lg_build, read_sequence_csv

PROPOSAL_KINDS = ("kalman", "learned", "prior")
METHODS = ("pvmc", "kalman", "rts", "bootstrap")


class UsageError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    d_x: int = 5
    d_y: int = 5
    T: int = 500
    N: int = 64
    replications: int = 40
    proposal_kind: str = "kalman"
    output_dir: str = "out"
    method: str = "pvmc"
    workers: int = 1
    ksd_time: int = 249
    fit_steps: int = 200
    fit_step_size: float = 0.01
    max_T: int = 4096
    grid: str = "N=1..4,T=0..5"
    instances: int = 5
    obs: Optional[str] = None

    def validate(self):
        for name in ("d_x", "d_y", "N", "replications", "workers", "fit_steps", "instances", "max_T"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be at least 1")
        if self.T < 0:
            raise UsageError("T must be non-negative")
        if self.d_y > self.d_x:
            raise UsageError("d_y may not exceed d_x")
        if self.proposal_kind not in PROPOSAL_KINDS:
            raise UsageError(f"proposal_kind must be one of {PROPOSAL_KINDS}")
        if self.method not in METHODS:
            raise UsageError(f"method must be one of {METHODS}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"schema_version"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})


COMMAND_DEFAULTS = {
    "validate": {},
    "lg-experiment": {},
    "bench": {"N": 8},
    "elbo-hierarchy": {"d_x": 1, "d_y": 1, "T": 4, "replications": 10000, "proposal_kind": "prior"},
    "smooth": {"d_x": 1, "d_y": 1, "N": 64},
}


def _field_type(f):
    return {"int": int, "float": float, "str": str}.get(f.type.replace("Optional[", "").rstrip("]"), str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvmc", description="Parallel importance smoothing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMAND_DEFAULTS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON file with configuration fields")
        p.add_argument("--out", dest="output_dir", default=argparse.SUPPRESS, help="output directory")
        for f in fields(ExperimentConfig):
            if f.name == "output_dir":
                continue
            flags = [f"--{f.name}"]
            if "_" in f.name:
                flags.append(f"--{f.name.replace('_', '-')}")
            p.add_argument(*flags, dest=f.name, type=_field_type(f), default=argparse.SUPPRESS)
        if name == "validate":
            p.add_argument("--corrupt-scan", action="store_true", help="inject a faulty combine into the scan")
    return parser


def resolve_config(args) -> ExperimentConfig:
    values = dict(COMMAND_DEFAULTS[args.command])
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        try:
            values.update({k: v for k, v in json.loads(text).items() if k != "schema_version"})
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
    names = {f.name for f in fields(ExperimentConfig)}
    values.update({k: v for k, v in vars(args).items() if k in names})
    try:
        config = ExperimentConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    return config.validate()


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **payload}, indent=2) + "\n")


def _write_csv(path: Path, rows, columns):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


def cmd_validate(config, corrupt_scan: bool = False) -> int:
    from .validation import parse_grid, run_checks

    try:
        grid = parse_grid(config.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    checks, instances = run_checks(grid, config.instances, config.seed, corrupt_scan)
    out = Path(config.output_dir)
    passed = all(c["passed"] for c in checks)
    _write_json(out / "validate_report.json", {"passed": passed, "checks": checks, "grid": instances})
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['detail']}")
    return 0 if passed else 1


def cmd_lg_experiment(config) -> int:
    rows, bandwidth = experiments.run_lg_experiment(config)
    out = Path(config.output_dir)
    columns = ["method", "e_x", "ksd", "w2", "wall_time_seconds", "seed"]
    _write_csv(out / "results.csv", rows, columns)
    summary = {"config": asdict(config), "ksd_bandwidth": bandwidth, "replications": len(rows)}
    for key in ("e_x", "ksd", "w2", "wall_time_seconds"):
        vals = np.array([r[key] for r in rows])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    _write_json(out / "summary.json", summary)
    print(json.dumps({k: summary[k] for k in ("e_x", "ksd", "w2")}))
    return 0


def cmd_bench(config) -> int:
    rows = []
    steps = 32
    while steps <= config.max_T:
        rows.append(experiments.bench_row(steps, config.N, config.seed))
        steps *= 2
    columns = list(rows[0]) if rows else ["T"]
    _write_csv(Path(config.output_dir) / "bench.csv", rows, columns)
    ok = all(r["depth"] <= r["depth_bound"] for r in rows)
    for r in rows:
        print(
            f"T={r['T']} elements={r['scan_elements']} depth={r['depth']}/{r['depth_bound']} "
            f"combines={r['combine_invocations']}"
        )
    return 0 if ok else 1


def cmd_elbo_hierarchy(config) -> int:
    if config.replications < 1000:
        raise UsageError("elbo-hierarchy needs at least 1000 replications")
    samples, log_py = experiments.elbo_samples(config)
    report = experiments.hierarchy_report(samples, log_py)
    _write_json(Path(config.output_dir) / "hierarchy.json", report)
    for c in report["inequalities"]:
        print(f"{'PASS' if c['holds'] else 'FAIL'} {c['inequality']} (gap {c['gap']:.4f}, se {c['se']:.4f})")
    return 0 if report["all_hold"] else 1


def cmd_smooth(config) -> int:
    if config.obs is None:
        raise UsageError("smooth needs --obs pointing at an observation CSV")
    try:
        obs = read_sequence_csv(config.obs)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read observations: {exc}") from exc
    # the latent dimension is at least the observation dimension
    d_y = obs.shape[1]
    lg = lg_build(max(config.d_x, d_y), d_y)
    rng = np.random.default_rng(config.seed)
    prop = experiments.build_proposal(config.proposal_kind, lg, obs, config.N, rng, config.fit_steps, config.fit_step_size)
    result = pvmc_smooth(lg, prop, obs, config.N, rng, seed=config.seed)
    result.write(config.output_dir)
    print(f"log_L_hat={result.log_L_hat:.6f} written to {config.output_dir}")
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "lg-experiment": cmd_lg_experiment,
    "bench": cmd_bench,
    "elbo-hierarchy": cmd_elbo_hierarchy,
    "smooth": cmd_smooth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        if args.command == "validate":
            return cmd_validate(config, corrupt_scan=args.corrupt_scan)
        return COMMANDS[args.command](config)
    except UsageError as exc:
        print(f"pvmc {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
