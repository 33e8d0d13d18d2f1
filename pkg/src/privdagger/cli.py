"""Config-driven experiment runner: single runs and trade-off sweeps."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import proportion_se
from .config import ConfigError, ExperimentConfig, load_experiment_config
from .expert import ConstrainedTeacher, SampledTeacher, make_expert_bundle
from .figures import save_metrics_figure, save_tradeoff_figure
from .learn import collect_demonstrations, leap_run, select_best, validation_success

SWEEP_PARAMETERS = ("delta", "lambda", "truncation_window")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _json_dumps(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


@dataclasses.dataclass
class RunArtifacts:
    snapshots: list
    report: object
    best_iteration: int
    validation: list  # (iteration, success) pairs


def execute_run(cfg: ExperimentConfig) -> RunArtifacts:
    bundle = make_expert_bundle(cfg.spec)
    demos = collect_demonstrations(cfg.spec, bundle, cfg.demo_episodes, cfg.demo_seed)
    snapshots, report = leap_run(cfg.spec, cfg.leap, demos, cfg.analysis, bundle=bundle)
    validation = [(s.iteration, validation_success(cfg.spec, s, cfg.leap.validation_seeds))
                  for s in snapshots]
    best = select_best(snapshots[1:], cfg.spec, cfg.leap.validation_seeds) \
        if len(snapshots) > 1 else snapshots[0]
    return RunArtifacts(snapshots, report, best.iteration, validation)


def write_run_outputs(cfg: ExperimentConfig, artifacts: RunArtifacts) -> None:
    out = Path(cfg.out_dir)
    report = artifacts.report
    _atomic_write(out / "metrics.json", _json_dumps(report.to_dict()))
    _atomic_write(out / "metrics.csv", report.to_csv())
    for snap in artifacts.snapshots:
        payload = {"label": snap.label, "iteration": snap.iteration,
                   "policy": snap.policy.to_dict()}
        _atomic_write(out / "snapshots" / f"{snap.label}.json", _json_dumps(payload))
    manifest = {
        "artifact_version": __version__,
        "config_digest": hashlib.sha256(
            json.dumps(cfg.resolved, sort_keys=True).encode()).hexdigest(),
        "root_seed": cfg.leap.root_seed,
        "best_iteration": artifacts.best_iteration,
        "validation_success": {str(i): s for i, s in artifacts.validation},
    }
    _atomic_write(out / "run_manifest.json", _json_dumps(manifest))
    if cfg.write_figures:
        save_metrics_figure(report, out / "figures" / "metrics.png")


def run_experiment(config_path: str, out_override: str | None = None,
                   seed_override: int | None = None) -> int:
    """Run one experiment end to end. Returns the process exit status."""
    try:
        cfg = load_experiment_config(config_path, out_override, seed_override)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        artifacts = execute_run(cfg)
        write_run_outputs(cfg, artifacts)
    except Exception as exc:  # runtime failure: no partial metrics were written
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def _with_sweep_value(cfg: ExperimentConfig, parameter: str, value: float) -> ExperimentConfig:
    leap = cfg.leap
    if parameter == "delta":
        leap = dataclasses.replace(leap, expert_kind=ConstrainedTeacher(delta=float(value)))
    elif parameter == "lambda":
        samples = leap.expert_kind.num_samples \
            if isinstance(leap.expert_kind, SampledTeacher) else 32
        leap = dataclasses.replace(
            leap, expert_kind=SampledTeacher(penalty=float(value), num_samples=samples))
    elif parameter == "truncation_window":
        leap = dataclasses.replace(leap, truncation_window=int(value))
    else:
        raise ConfigError(f"unknown sweep parameter {parameter!r}")
    resolved = dict(cfg.resolved)
    resolved["sweep"] = {"parameter": parameter, "value": value}
    subdir = Path(cfg.out_dir) / f"{parameter}_{value:g}"
    return dataclasses.replace(cfg, leap=leap, out_dir=str(subdir), resolved=resolved)


def sweep_tradeoff(config_path: str, parameter: str, values, out_override: str | None = None,
                   seed_override: int | None = None) -> int:
    """One full run per swept value (shared root seed), then the aggregate
    trade-off table and figure. Returns the process exit status."""
    try:
        base = load_experiment_config(config_path, out_override, seed_override)
        if parameter not in SWEEP_PARAMETERS:
            raise ConfigError(
                f"sweep parameter must be one of {SWEEP_PARAMETERS}, got {parameter!r}")
        values = list(values)
        if not values:
            raise ConfigError("sweep needs at least one value")
        point_cfgs = [_with_sweep_value(base, parameter, v) for v in values]
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        rows = []
        for value, cfg in zip(values, point_cfgs):
            artifacts = execute_run(cfg)
            write_run_outputs(cfg, artifacts)
            final = artifacts.report.final_row
            rows.append((value, final))
        out = Path(base.out_dir)
        lines = ["param_value,final_success,final_J,theorem1_slack,realizability_gap"]
        for value, final in rows:
            lines.append(",".join([
                f"{value:g}", repr(final.success_rate), repr(final.j),
                repr(final.theorem1_slack), repr(final.realizability_gap)]))
        _atomic_write(out / "tradeoff.csv", "\n".join(lines) + "\n")
        if base.write_figures:
            errors = [proportion_se(final.success_rate, final.eval_episodes)
                      if final.eval_episodes else final.success_se
                      for _, final in rows]
            save_tradeoff_figure(parameter, [v for v, _ in rows],
                                 [final.success_rate for _, final in rows],
                                 errors, out / "figures" / "tradeoff.png")
    except Exception as exc:
        print(f"sweep failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def _parse_values(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="privdagger",
        description="Imitation learning from privileged experts on tabular POMDPs")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("config")
    run_p.add_argument("--out", default=None, help="override output.directory")
    run_p.add_argument("--seed", type=int, default=None, help="override learn.root_seed")

    sweep_p = sub.add_parser("sweep", help="sweep one parameter across values")
    sweep_p.add_argument("config")
    sweep_p.add_argument("--param", required=True, choices=SWEEP_PARAMETERS)
    sweep_p.add_argument("--values", required=True,
                         help="comma-separated list, e.g. 0,0.01,0.1,1")
    sweep_p.add_argument("--out", default=None, help="override output.directory")
    sweep_p.add_argument("--seed", type=int, default=None, help="override learn.root_seed")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_experiment(args.config, args.out, args.seed)
    return sweep_tradeoff(args.config, args.param, _parse_values(args.values),
                          args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
