"""Demand generation: piecewise-constant origin-destination flow schedules.

The built-in scenarios reproduce the two-family hourly pattern: an
east-west family starting at minute 0 and a north-south family starting
at minute 15, each lasting 35 minutes in 5-minute constant-rate pieces
ramping to a 900 veh/h peak. Within each piece vehicles are inserted at
a uniform headway. One direction of each family, redrawn every
simulated hour, runs at 0.6 of the nominal rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["FlowInterval", "FlowSchedule", "generate_flows",
           "DEFAULT_PROFILE", "PEAK_RATE_VPH", "OPPOSITE_SCALE"]

PEAK_RATE_VPH = 900.0
OPPOSITE_SCALE = 0.6
# 7 five-minute pieces covering a 35-minute family; multiples of the peak
DEFAULT_PROFILE = (1 / 3, 2 / 3, 1.0, 1.0, 1.0, 2 / 3, 1 / 3)

SCENARIOS = ("outer-heavy", "inner-heavy", "single-od", "custom")


@dataclass(frozen=True)
class FlowInterval:
    start_s: float
    end_s: float
    origin: str        # fringe-in edge name
    destination: str   # fringe-out edge name
    rate_vph: float

    def insertion_times(self) -> list[float]:
        """Uniformly spaced insertion times covering [start, end)."""
        if self.rate_vph <= 0:
            return []
        headway = 3600.0 / self.rate_vph
        times = []
        t = self.start_s
        while t < self.end_s - 1e-9:
            times.append(t)
            t += headway
        return times


@dataclass
class FlowSchedule:
    scenario: str
    seed: int
    intervals: list[FlowInterval] = field(default_factory=list)

    def validate(self) -> None:
        by_od: dict[tuple[str, str], list[FlowInterval]] = {}
        for iv in self.intervals:
            if iv.rate_vph < 0:
                raise ValueError(f"negative rate in {iv}")
            if iv.end_s <= iv.start_s:
                raise ValueError(f"empty interval in {iv}")
            by_od.setdefault((iv.origin, iv.destination), []).append(iv)
        for od, ivs in by_od.items():
            ivs = sorted(ivs, key=lambda v: v.start_s)
            for a, b in zip(ivs, ivs[1:]):
                if b.start_s < a.end_s - 1e-9:
                    raise ValueError(f"overlapping intervals for O-D {od}")

    def insertions(self) -> list[tuple[float, str, str]]:
        """All (time, origin, destination) triples, time-sorted, deterministic."""
        out = []
        for iv in self.intervals:
            for t in iv.insertion_times():
                out.append((t, iv.origin, iv.destination))
        out.sort(key=lambda item: (item[0], item[1], item[2]))
        return out


def _family_rows(scenario: str, count: int) -> dict[int, float]:
    """Scale factor per row/column index for the grid scenarios."""
    outer = {0, count - 1}
    scales = {}
    for k in range(count):
        is_outer = k in outer
        if scenario == "outer-heavy":
            scales[k] = 1.0 if is_outer else 0.5
        else:  # inner-heavy
            scales[k] = 0.5 if is_outer else 1.0
    return scales


def generate_flows(scenario: str, seed: int, *, rows: int = 4, cols: int = 4,
                   peak_rate_vph: float = PEAK_RATE_VPH,
                   opposite_scale: float = OPPOSITE_SCALE,
                   hours: int = 1,
                   profile: tuple[float, ...] = DEFAULT_PROFILE,
                   ew_start_min: float = 0.0, ns_start_min: float = 15.0,
                   custom_intervals: list[FlowInterval] | None = None
                   ) -> FlowSchedule:
    """Build a flow schedule for one of the named scenarios.

    `custom` passes `custom_intervals` straight through (validated).
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario '{scenario}' (one of {SCENARIOS})")
    sched = FlowSchedule(scenario=scenario, seed=seed)
    if scenario == "custom":
        sched.intervals = list(custom_intervals or [])
        sched.validate()
        return sched

    rng = np.random.default_rng(seed)
    piece_s = 300.0

    def add_family(hour: int, start_min: float, fwd_od: tuple[str, str],
                   rev_od: tuple[str, str] | None, scale: float,
                   reduced_forward: bool) -> None:
        base = hour * 3600.0 + start_min * 60.0
        for k, mult in enumerate(profile):
            t0 = base + k * piece_s
            t1 = t0 + piece_s
            rate = peak_rate_vph * mult * scale
            f_rate = rate * (opposite_scale if reduced_forward else 1.0)
            sched.intervals.append(FlowInterval(t0, t1, fwd_od[0], fwd_od[1], f_rate))
            if rev_od is not None:
                r_rate = rate * (1.0 if reduced_forward else opposite_scale)
                sched.intervals.append(
                    FlowInterval(t0, t1, rev_od[0], rev_od[1], r_rate))

    if scenario == "single-od":
        r = rows // 2
        for hour in range(hours):
            add_family(hour, ew_start_min, (f"west_in_{r}", f"east_out_{r}"),
                       None, 1.0, reduced_forward=False)
        sched.validate()
        return sched

    row_scale = _family_rows(scenario, rows)
    col_scale = _family_rows(scenario, cols)
    for hour in range(hours):
        ew_reduced_fwd = bool(rng.integers(0, 2))
        ns_reduced_fwd = bool(rng.integers(0, 2))
        for r in range(rows):
            add_family(hour, ew_start_min,
                       (f"west_in_{r}", f"east_out_{r}"),
                       (f"east_in_{r}", f"west_out_{r}"),
                       row_scale[r], ew_reduced_fwd)
        for c in range(cols):
            add_family(hour, ns_start_min,
                       (f"north_in_{c}", f"south_out_{c}"),
                       (f"south_in_{c}", f"north_out_{c}"),
                       col_scale[c], ns_reduced_fwd)
    sched.validate()
    return sched
