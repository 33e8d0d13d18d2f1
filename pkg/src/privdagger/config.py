"""Experiment config parsing and validation.

Configs are YAML documents with four sections (``environment``, ``learn``,
``analysis``, ``output``); the exact grammar is documented in the README.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .analysis import AnalysisOptions
from .env import PomdpSpec, build_hidden_object_world, build_tiger, make_fully_observed
from .expert import ConstrainedTeacher, PrivilegedTeacher, SampledTeacher
from .learn import DPO, KTO, SFT, LeapConfig, SelfTeacher


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


ENVIRONMENTS = {
    "tiger": build_tiger,
    "hidden_object_world": build_hidden_object_world,
}


@dataclass(frozen=True)
class ExperimentConfig:
    spec: PomdpSpec
    leap: LeapConfig
    analysis: AnalysisOptions
    demo_episodes: int
    demo_seed: int
    out_dir: str
    write_figures: bool
    resolved: dict  # canonical dict after overrides; hashed into the manifest


def _find_line(text: str, key: str) -> int | None:
    for i, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith(f"{key}:"):
            return i
    return None


def _require(section: dict, key: str, path: str, text: str):
    if key not in section:
        raise ConfigError(f"missing required key '{path}.{key}'",
                          _find_line(text, path.split(".")[-1]))
    return section[key]


def _parse_update_rule(block, text: str):
    if not isinstance(block, dict) or "name" not in block:
        raise ConfigError("learn.update_rule must be a mapping with a 'name'",
                          _find_line(text, "update_rule"))
    name = block["name"]
    if name == "sft":
        return SFT()
    if name == "dpo":
        return DPO(beta=float(block.get("beta", 0.1)))
    if name == "kto":
        return KTO(beta=float(block.get("beta", 1.0)),
                   lambda_desirable=float(block.get("lambda_desirable", 1.0)),
                   lambda_undesirable=float(block.get("lambda_undesirable", 0.0)))
    raise ConfigError(f"unknown update rule {name!r}", _find_line(text, "update_rule"))


def _parse_expert_kind(block, text: str):
    if not isinstance(block, dict) or "name" not in block:
        raise ConfigError("learn.expert_kind must be a mapping with a 'name'",
                          _find_line(text, "expert_kind"))
    name = block["name"]
    if name == "privileged":
        return PrivilegedTeacher()
    if name == "constrained":
        if "delta" not in block:
            raise ConfigError("constrained teacher needs 'delta'",
                              _find_line(text, "expert_kind"))
        return ConstrainedTeacher(delta=float(block["delta"]))
    if name == "sampled":
        return SampledTeacher(penalty=float(block.get("penalty", 1.0)),
                              num_samples=int(block.get("num_samples", 32)))
    if name == "self":
        return SelfTeacher()
    raise ConfigError(f"unknown expert kind {name!r}", _find_line(text, "expert_kind"))


def _parse_validation_seeds(block, text: str) -> tuple:
    if isinstance(block, list):
        return tuple(int(s) for s in block)
    if isinstance(block, dict) and "count" in block:
        base = int(block.get("base", 10_000))
        return tuple(range(base, base + int(block["count"])))
    raise ConfigError("learn.validation_seeds must be a list or {base, count}",
                      _find_line(text, "validation_seeds"))


def _build_spec(env_block: dict, text: str) -> PomdpSpec:
    constructor = _require(env_block, "constructor", "environment", text)
    params = dict(env_block.get("params", {}))
    if constructor == "from_json":
        path = params.get("path")
        if path is None:
            raise ConfigError("environment from_json needs params.path",
                              _find_line(text, "params"))
        spec = PomdpSpec.from_json(Path(path).read_text())
    elif constructor in ENVIRONMENTS:
        try:
            spec = ENVIRONMENTS[constructor](**params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"environment.params invalid for {constructor!r}: {exc}",
                              _find_line(text, "params")) from exc
    else:
        raise ConfigError(f"unknown environment constructor {constructor!r}",
                          _find_line(text, "constructor"))
    if env_block.get("fully_observed", False):
        spec = make_fully_observed(spec)
    return spec


def load_experiment_config(path: str, out_override: str | None = None,
                           seed_override: int | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ConfigError(f"config does not parse: {exc}", line) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")

    env_block = _require(raw, "environment", "config", text)
    learn_block = _require(raw, "learn", "config", text)
    analysis_block = raw.get("analysis", {})
    output_block = raw.get("output", {})
    demo_block = raw.get("demos", {})

    spec = _build_spec(env_block, text)

    root_seed = int(_require(learn_block, "root_seed", "learn", text))
    if seed_override is not None:
        root_seed = int(seed_override)
    leap = LeapConfig(
        num_iterations=int(_require(learn_block, "num_iterations", "learn", text)),
        rollouts_per_iteration=int(_require(learn_block, "rollouts_per_iteration",
                                            "learn", text)),
        update_rule=_parse_update_rule(learn_block.get("update_rule", {"name": "sft"}), text),
        expert_kind=_parse_expert_kind(learn_block.get("expert_kind",
                                                       {"name": "privileged"}), text),
        mode=learn_block.get("mode", "failed_only"),
        learning_rate=float(learn_block.get("learning_rate", 0.5)),
        optimization_steps=int(learn_block.get("optimization_steps", 500)),
        truncation_window=int(learn_block.get("truncation_window", spec.horizon)),
        root_seed=root_seed,
        validation_seeds=_parse_validation_seeds(
            learn_block.get("validation_seeds", {"base": 10_000, "count": 200}), text),
    )

    opts = AnalysisOptions(
        eval_method=analysis_block.get("eval_method", "auto"),
        eval_episodes=int(analysis_block.get("eval_episodes", 1000)),
        exact_cap=int(analysis_block.get("exact_cap", AnalysisOptions.exact_cap)),
        realizability_method=analysis_block.get("realizability_method", "auto"),
        realizability_episodes=int(analysis_block.get("realizability_episodes", 200)),
        realizability_cap=int(analysis_block.get("realizability_cap",
                                                 AnalysisOptions.realizability_cap)),
    )
    if opts.eval_method not in ("auto", "exact", "monte_carlo"):
        raise ConfigError(f"unknown analysis.eval_method {opts.eval_method!r}",
                          _find_line(text, "eval_method"))
    if opts.realizability_method not in ("auto", "exact", "lower_bound"):
        raise ConfigError(
            f"unknown analysis.realizability_method {opts.realizability_method!r}",
            _find_line(text, "realizability_method"))

    out_dir = out_override or output_block.get("directory")
    if out_dir is None:
        raise ConfigError("missing required key 'output.directory' (or pass --out)",
                          _find_line(text, "output"))

    resolved = json.loads(json.dumps({
        "environment": env_block,
        "learn": {**learn_block, "root_seed": root_seed},
        "analysis": analysis_block,
        "demos": demo_block,
        "output": {**output_block, "directory": str(out_dir)},
    }, sort_keys=True, default=str))

    return ExperimentConfig(
        spec=spec,
        leap=leap,
        analysis=opts,
        demo_episodes=int(demo_block.get("episodes", 50)),
        demo_seed=int(demo_block.get("seed", root_seed)),
        out_dir=str(out_dir),
        write_figures=bool(output_block.get("figures", True)),
        resolved=resolved,
    )
