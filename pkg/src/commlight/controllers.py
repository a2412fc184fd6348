"""Classical signal controllers: fixed-time, max-pressure, SOTL, random.

All controllers answer the same question the learned policy does: which
green phase should intersection i request for the next 5 s interval.
"""

from __future__ import annotations

import numpy as np

from .simulator import SimState, YELLOW_S

__all__ = ["fixed_time_policy", "pressure", "max_pressure_policy",
           "FixedTimeController", "MaxPressureController", "SOTLController",
           "RandomController", "make_controller"]

FIXED_GREEN_S = 30.0


def fixed_time_policy(intersection, clock: float) -> int:
    """Cycle phases in order, 30 s of green each.

    The environment inserts a 5 s interlock on every change, so each
    phase owns a 35 s request epoch and the full cycle for four phases
    is 4 x 30 green + 4 x 5 yellow = 140 s.
    """
    n = intersection.n_phases
    if n == 1:
        return 0
    epoch = FIXED_GREEN_S + YELLOW_S
    return int((clock % (epoch * n)) // epoch)


def pressure(state: SimState, i: int, phase: int) -> float:
    """Upstream-minus-downstream queue differential over the phase's movements.

    A movement's downstream queue is the total zone-halted count on the
    lane's primary outgoing edge (straight for the through lane, left
    for the left lane); fringe exits never queue.
    """
    net = state.network
    node = net.intersections[i]
    total = 0.0
    for lane_id in node.phases[phase]:
        upstream = state.zone_halted(lane_id)
        out_edge = net.primary_out_edge(lane_id)
        downstream = 0
        if out_edge is not None:
            for out_lane in net.edges[out_edge].lanes:
                downstream += state.zone_halted(out_lane)
        total += upstream - downstream
    return total


def max_pressure_policy(state: SimState, i: int) -> int:
    """Argmax-pressure phase; ties break toward the lowest phase index."""
    node = state.network.intersections[i]
    best, best_p = 0, pressure(state, i, 0)
    for p in range(1, node.n_phases):
        v = pressure(state, i, p)
        if v > best_p:
            best, best_p = p, v
    return best


class FixedTimeController:
    def __init__(self, state: SimState):
        self.state = state

    def act(self) -> list[int]:
        return [fixed_time_policy(node, self.state.clock)
                for node in self.state.network.intersections]


class MaxPressureController:
    def __init__(self, state: SimState):
        self.state = state

    def act(self) -> list[int]:
        return [max_pressure_policy(self.state, i)
                for i in range(self.state.network.n_agents)]


class SOTLController:
    """Self-organizing control: switch once red demand has waited enough.

    Integrates (zone vehicle count x seconds) per non-served phase;
    once the largest integral reaches `threshold` and `min_green` has
    elapsed, the phase with the largest integral (ties toward the
    lowest index) is requested and its integral reset.
    """

    def __init__(self, state: SimState, threshold: float = 50.0,
                 min_green: float = 10.0):
        self.state = state
        self.threshold = threshold
        self.min_green = min_green
        n = state.network.n_agents
        self.kappa = [np.zeros(state.network.intersections[i].n_phases)
                      for i in range(n)]
        self.last_switch = [-(min_green + 1.0)] * n
        self.last_time = [None] * n
        self.current = [0] * n

    def _phase_zone_count(self, i: int, p: int) -> int:
        total = 0
        for lane_id in self.state.network.intersections[i].phases[p]:
            count, _ = self.state.lane_zone_vehicles(lane_id)
            total += count
        return total

    def act(self) -> list[int]:
        actions = []
        clock = self.state.clock
        for i in range(self.state.network.n_agents):
            node = self.state.network.intersections[i]
            dt = 0.0 if self.last_time[i] is None else clock - self.last_time[i]
            self.last_time[i] = clock
            for p in range(node.n_phases):
                if p != self.current[i]:
                    self.kappa[i][p] += dt * self._phase_zone_count(i, p)
            choice = self.current[i]
            if clock - self.last_switch[i] >= self.min_green:
                best = int(np.argmax(self.kappa[i]))  # lowest index on ties
                if self.kappa[i][best] >= self.threshold and best != self.current[i]:
                    choice = best
                    self.kappa[i][best] = 0.0
                    self.last_switch[i] = clock
                    self.current[i] = best
            actions.append(choice)
        return actions


class RandomController:
    def __init__(self, state: SimState, seed: int = 0):
        self.state = state
        self.rng = np.random.default_rng(seed)

    def act(self) -> list[int]:
        return [int(self.rng.integers(0, node.n_phases))
                for node in self.state.network.intersections]


def make_controller(name: str, state: SimState, seed: int = 0):
    if name == "fixed":
        return FixedTimeController(state)
    if name == "maxpressure":
        return MaxPressureController(state)
    if name == "sotl":
        return SOTLController(state)
    if name == "random":
        return RandomController(state, seed)
    raise ValueError(f"unknown controller '{name}' "
                     "(one of fixed|maxpressure|sotl|random)")
