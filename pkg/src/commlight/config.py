"""Run configuration: versioned YAML tying a scenario to training settings.

Schema (format_version 1):

    format_version: 1
    scenario: conflict-1x1        # preset name or scenario-file path
    seed: 0
    out_dir: runs/demo
    train:                        # any TrainConfig field
      total_episodes: 300
      batch_episodes: 16
      comm_enabled: false

A run archives its fully resolved configuration (including the expanded
scenario) next to its outputs; re-running from that archive reproduces
the results bit for bit on one thread configuration. Environment
variables are deliberately ignored: explicit flags only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .scenario import Scenario, resolve_scenario, scenario_from_dict
from .trainer import TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_run_config", "save_run_config",
           "run_config_from_dict", "scenario_from_config_dict"]

FORMAT_VERSION = 1


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    scenario: str
    out_dir: str = "runs/out"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def resolve_scenario(self) -> Scenario:
        return resolve_scenario(self.scenario)

    def to_dict(self, scenario_obj: Scenario | None = None) -> dict:
        if scenario_obj is None:
            scenario_obj = self.resolve_scenario()
        return {
            "format_version": FORMAT_VERSION,
            "scenario": self.scenario,
            "scenario_spec": scenario_obj.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "train": dataclasses.asdict(self.train),
        }


def run_config_from_dict(raw: dict, source: str = "config") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: not a mapping")
    if raw.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ConfigError(f"{source}: unsupported format_version "
                          f"{raw.get('format_version')}")
    train_raw = raw.get("train", {}) or {}
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(train_raw) - known
    if unknown:
        raise ConfigError(f"{source}: unknown train settings {sorted(unknown)}")
    try:
        train = TrainConfig(**train_raw)
    except TypeError as e:
        raise ConfigError(f"{source}: bad train settings ({e})") from e
    if "scenario" not in raw:
        raise ConfigError(f"{source}: missing 'scenario'")
    return RunConfig(
        scenario=str(raw["scenario"]),
        out_dir=str(raw.get("out_dir", "runs/out")),
        seed=int(raw.get("seed", 0)),
        train=train,
    )


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return run_config_from_dict(raw, source=str(path))


def save_run_config(cfg: RunConfig, path: str | Path,
                    scenario_obj: Scenario | None = None) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(scenario_obj), fh, sort_keys=False)


def scenario_from_config_dict(raw: dict) -> Scenario:
    """Rebuild the scenario embedded in an archived/checkpointed config."""
    spec = raw.get("scenario_spec")
    if spec is not None:
        return scenario_from_dict(spec)
    ref = raw.get("scenario")
    if ref is None:
        raise ConfigError("config carries no scenario")
    return resolve_scenario(str(ref))
