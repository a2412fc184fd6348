"""Scenario files: grid geometry plus flow demand, as versioned YAML.

Schema (format_version 1):

    format_version: 1
    grid: {rows: int, cols: int, edge_length_m: float}
    episode_steps: int            # 5 s control intervals per episode
    phases: standard4             # the built-in four-phase table
    flows:
      kind: outer-heavy | inner-heavy | single-od | custom
      seed: int
      peak_rate_vph: float        # optional, default 900
      opposite_scale: float       # optional, default 0.6
      hours: int                  # optional, default 1
      profile: [floats]           # optional, 5-minute multipliers
      intervals:                  # required for kind: custom
        - {start_s, end_s, origin, destination, rate_vph}

Origins are fringe-in edge names (west_in_0, north_in_2, ...) and
destinations fringe-out names (east_out_0, ...).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .flows import DEFAULT_PROFILE, FlowInterval, FlowSchedule, generate_flows
from .network import RoadNetwork, build_grid
from .simulator import ACTION_INTERVAL_S, SimState

__all__ = ["Scenario", "ScenarioError", "load_scenario", "save_scenario",
           "scenario_from_dict", "resolve_scenario", "preset_scenario",
           "PRESETS"]

FORMAT_VERSION = 1


class ScenarioError(Exception):
    pass


@dataclass
class Scenario:
    name: str
    rows: int
    cols: int
    edge_length_m: float
    episode_steps: int
    flow_kind: str
    flow_seed: int
    peak_rate_vph: float = 900.0
    opposite_scale: float = 0.6
    hours: int = 1
    profile: tuple[float, ...] = DEFAULT_PROFILE
    custom_intervals: list[FlowInterval] | None = None

    @property
    def horizon_s(self) -> int:
        return self.episode_steps * ACTION_INTERVAL_S

    def build_network(self) -> RoadNetwork:
        return build_grid(self.rows, self.cols, self.edge_length_m)

    def build_schedule(self) -> FlowSchedule:
        return generate_flows(
            self.flow_kind, self.flow_seed, rows=self.rows, cols=self.cols,
            peak_rate_vph=self.peak_rate_vph, opposite_scale=self.opposite_scale,
            hours=self.hours, profile=self.profile,
            custom_intervals=self.custom_intervals)

    def make_env(self, seed: int = 0, start_offset_s: float = 0.0) -> SimState:
        return SimState(self.build_network(), self.build_schedule(),
                        horizon_s=self.horizon_s,
                        start_offset_s=start_offset_s, seed=seed)

    def to_dict(self) -> dict:
        flows: dict = {"kind": self.flow_kind, "seed": self.flow_seed,
                       "peak_rate_vph": self.peak_rate_vph,
                       "opposite_scale": self.opposite_scale,
                       "hours": self.hours, "profile": list(self.profile)}
        if self.custom_intervals is not None:
            flows["intervals"] = [
                {"start_s": iv.start_s, "end_s": iv.end_s, "origin": iv.origin,
                 "destination": iv.destination, "rate_vph": iv.rate_vph}
                for iv in self.custom_intervals]
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "grid": {"rows": self.rows, "cols": self.cols,
                     "edge_length_m": self.edge_length_m},
            "episode_steps": self.episode_steps,
            "phases": "standard4",
            "flows": flows,
        }


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario.to_dict(), fh, sort_keys=False)


def scenario_from_dict(raw: dict, default_name: str = "scenario") -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError("scenario description is not a mapping")
    if raw.get("format_version") != FORMAT_VERSION:
        raise ScenarioError(f"unsupported scenario format_version "
                            f"{raw.get('format_version')}")
    if raw.get("phases", "standard4") != "standard4":
        raise ScenarioError("only the standard4 phase table is supported")
    try:
        grid = raw["grid"]
        flows = raw["flows"]
        intervals = None
        if "intervals" in flows:
            intervals = [FlowInterval(float(r["start_s"]), float(r["end_s"]),
                                      str(r["origin"]), str(r["destination"]),
                                      float(r["rate_vph"]))
                         for r in flows["intervals"]]
        return Scenario(
            name=str(raw.get("name", default_name)),
            rows=int(grid["rows"]), cols=int(grid["cols"]),
            edge_length_m=float(grid.get("edge_length_m", 200.0)),
            episode_steps=int(raw.get("episode_steps", 90)),
            flow_kind=str(flows["kind"]),
            flow_seed=int(flows.get("seed", 0)),
            peak_rate_vph=float(flows.get("peak_rate_vph", 900.0)),
            opposite_scale=float(flows.get("opposite_scale", 0.6)),
            hours=int(flows.get("hours", 1)),
            profile=tuple(flows.get("profile", DEFAULT_PROFILE)),
            custom_intervals=intervals,
        )
    except KeyError as e:
        raise ScenarioError(f"missing scenario key {e}") from e


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    try:
        return scenario_from_dict(raw, default_name=path.stem)
    except ScenarioError as e:
        raise ScenarioError(f"{path}: {e}") from e


def resolve_scenario(ref: str) -> Scenario:
    """A preset name, or a path to a scenario YAML file."""
    if ref in PRESETS:
        return preset_scenario(ref)
    return load_scenario(ref)


# -- presets -----------------------------------------------------------------

def _conflict_1x1(horizon_s: float) -> list[FlowInterval]:
    """Two conflicting constant flows through a single intersection."""
    return [
        FlowInterval(0.0, horizon_s, "west_in_0", "east_out_0", 600.0),
        FlowInterval(0.0, horizon_s, "north_in_0", "south_out_0", 600.0),
    ]


def _corridor_1x2(horizon_s: float) -> list[FlowInterval]:
    """Heavy through-traffic on a two-signal corridor plus alternating
    cross-demand, so the downstream queue can spill back upstream."""
    ivs = [
        FlowInterval(0.0, horizon_s, "west_in_0", "east_out_0", 700.0),
        FlowInterval(0.0, horizon_s, "east_in_0", "west_out_0", 420.0),
    ]
    block = 150.0
    t = 0.0
    col = 0
    while t < horizon_s:
        end = min(t + block, horizon_s)
        ivs.append(FlowInterval(t, end, f"north_in_{col}", f"south_out_{col}", 800.0))
        ivs.append(FlowInterval(t, end, f"south_in_{1 - col}",
                                f"north_out_{1 - col}", 320.0))
        t = end
        col = 1 - col
    return ivs


def preset_scenario(name: str) -> Scenario:
    """Named built-in scenarios, including the desk-scale learning setups."""
    if name == "grid4x4":
        return Scenario("grid4x4", 4, 4, 200.0, 90, "outer-heavy", 7)
    if name == "grid4x4-inner":
        return Scenario("grid4x4-inner", 4, 4, 200.0, 90, "inner-heavy", 7)
    if name == "conflict-1x1":
        s = Scenario("conflict-1x1", 1, 1, 200.0, 90, "custom", 0)
        s.custom_intervals = _conflict_1x1(s.horizon_s)
        return s
    if name == "corridor-1x2":
        s = Scenario("corridor-1x2", 1, 2, 200.0, 90, "custom", 0)
        s.custom_intervals = _corridor_1x2(s.horizon_s)
        return s
    raise ScenarioError(f"unknown preset scenario '{name}' (one of {PRESETS})")


PRESETS = ("grid4x4", "grid4x4-inner", "conflict-1x1", "corridor-1x2")
