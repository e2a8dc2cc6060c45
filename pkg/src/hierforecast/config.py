"""Run configuration: JSON schema, validation, manifest hashing."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import pandas as pd

from .additive import parse_formula
from .aggregation import STRATEGIES
from .errors import ConfigError
from .forest import ForestConfig
from .synthetic import SyntheticSpec

__all__ = ["PipelineConfig", "load_config", "config_hash"]

PIPELINES = ("synthetic", "covid_hier", "uk_smartmeter")


def _timestamp(value, what):
    try:
        return pd.Timestamp(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{what}: {value!r} is not a timestamp") from exc


def _window(pair, what):
    if not isinstance(pair, (list, tuple)) or len(pair) != 2:
        raise ConfigError(f"{what} must be a [start, end] pair")
    start, end = (_timestamp(v, what) for v in pair)
    if not start < end:
        raise ConfigError(f"{what}: start {start} must precede end {end}")
    return (start, end)


@dataclass
class PipelineConfig:
    """Validated run configuration."""

    pipeline: str
    seed: int
    output_dir: str | None
    windows: dict
    data: dict
    models: dict
    experts: dict
    aggregation: dict
    output: dict
    synthetic: SyntheticSpec | None
    raw: dict = field(repr=False, default_factory=dict)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        pipeline = d.get("pipeline")
        if pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {pipeline!r}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")

        windows = dict(d.get("windows", {}))
        parsed_windows = {}
        if pipeline != "synthetic" and "source" not in windows:
            raise ConfigError("windows.source is required")
        for key in ("source", "test"):
            if key in windows:
                parsed_windows[key] = _window(windows[key], f"windows.{key}")
        if "source" in parsed_windows and "test" in parsed_windows:
            if parsed_windows["source"][1] > parsed_windows["test"][0]:
                raise ConfigError(
                    "windows.source and windows.test overlap or are out of order: "
                    f"{parsed_windows['source']} vs {parsed_windows['test']}"
                )
        if "target_start" in windows:
            parsed_windows["target_start"] = _timestamp(windows["target_start"], "windows.target_start")
        periods = []
        for item in windows.get("periods", []):
            if not isinstance(item, (list, tuple)) or len(item) != 3:
                raise ConfigError("windows.periods entries must be [label, start, end]")
            label = str(item[0])
            periods.append((label,) + _window(item[1:], f"windows.periods[{label}]"))
        parsed_windows["periods"] = periods

        models = dict(d.get("models", {}))
        for key in ("formula", "source_formula", "local_formula"):
            if key in models and models[key]:
                try:
                    parse_formula(models[key])
                except ConfigError as exc:
                    raise ConfigError(f"models.{key}: {exc}") from exc

        experts = dict(d.get("experts", {}))
        if "forest" in experts:
            try:
                ForestConfig(**experts["forest"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"experts.forest: {exc}") from exc
        for q in experts.get("quantiles", []):
            if not 0 < q < 1:
                raise ConfigError(f"experts.quantiles: {q} outside (0,1)")

        aggregation = dict(d.get("aggregation", {}))
        for s in aggregation.get("strategies", []):
            if s not in STRATEGIES:
                raise ConfigError(f"aggregation.strategies: unknown strategy {s!r}; pick from {STRATEGIES}")
        if aggregation.get("loss_mode", "gradient") not in ("gradient", "raw"):
            raise ConfigError("aggregation.loss_mode must be 'gradient' or 'raw'")

        data = dict(d.get("data", {}))
        for key, value in data.items():
            if key.endswith("path") and value:
                path = value if os.path.isabs(value) else os.path.join(base_dir, value)
                if not os.path.exists(path):
                    raise ConfigError(f"data.{key}: file not found: {path}")
                data[key] = path
        if "zones" in data:
            zones = data["zones"]
            if not isinstance(zones, dict) or not zones:
                raise ConfigError("data.zones must map zone id -> csv path")
            resolved = {}
            for z, p in zones.items():
                path = p if os.path.isabs(p) else os.path.join(base_dir, p)
                if not os.path.exists(path):
                    raise ConfigError(f"data.zones[{z}]: file not found: {path}")
                resolved[z] = path
            data["zones"] = resolved

        synthetic = None
        if pipeline == "synthetic":
            synthetic = SyntheticSpec.from_dict({"seed": seed, **d.get("synthetic", {})})

        return cls(
            pipeline=pipeline,
            seed=seed,
            output_dir=d.get("output_dir"),
            windows=parsed_windows,
            data=data,
            models=models,
            experts=experts,
            aggregation=aggregation,
            output=dict(d.get("output", {"figures": True})),
            synthetic=synthetic,
            raw=d,
            base_dir=base_dir,
        )

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> "PipelineConfig":
        raw = dict(self.raw)
        if seed is not None:
            raw["seed"] = seed
        if output_dir is not None:
            raw["output_dir"] = output_dir
        return PipelineConfig.from_dict(raw, base_dir=self.base_dir)


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return PipelineConfig.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))


def config_hash(config: PipelineConfig) -> str:
    """Hash of the experiment definition (output location excluded)."""
    raw = {k: v for k, v in config.raw.items() if k != "output_dir"}
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()
