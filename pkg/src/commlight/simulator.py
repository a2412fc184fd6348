"""Deterministic point-queue traffic simulation.

Vehicles traverse edges at free-flow speed, join the tail of their
target lane's queue (7.5 m slots), and discharge through the stop line
at most once per 2 seconds per lane while their lane's phase is green.
Choosing a different phase triggers a 5 s yellow interlock during which
the switching intersection discharges nothing. Control acts every 5
simulation seconds; the simulator advances in 1 s substeps.

Everything is integer/event driven and fully deterministic given the
(network, schedule, action sequence) triple. An append-only event log
(insert / halt / depart / complete) carries enough information to
rebuild every reported metric in an independent pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import (
    DETECTOR_CAPACITY,
    DETECTOR_ZONE_M,
    FREE_FLOW_MPS,
    VEHICLE_SLOT_M,
    RoadNetwork,
)
from .flows import FlowSchedule

__all__ = ["Vehicle", "EventLog", "StepResult", "SimState",
           "ACTION_INTERVAL_S", "YELLOW_S", "DISCHARGE_HEADWAY_S",
           "global_reward", "observation_width"]

ACTION_INTERVAL_S = 5
YELLOW_S = 5.0
DISCHARGE_HEADWAY_S = 2.0


class Vehicle:
    __slots__ = ("vid", "route", "leg", "pos", "halted", "wait", "lane_id",
                 "inserted_at", "completed_at")

    def __init__(self, vid: int, route: tuple[int, ...], inserted_at: int):
        self.vid = vid
        self.route = route
        self.leg = 0
        self.pos = 0.0
        self.halted = False
        self.wait = 0
        self.lane_id: int | None = None
        self.inserted_at = inserted_at
        self.completed_at: int | None = None


@dataclass
class EventLog:
    """Chronological event records plus the context needed to replay them."""
    n_intersections: int
    horizon_s: int
    lane_to_intersection: dict[int, int]
    free_flow_mps: float = FREE_FLOW_MPS
    events: list[tuple[int, str, int, int, int]] = field(default_factory=list)

    def append(self, t: int, kind: str, vid: int, lane_id: int, intersection: int):
        self.events.append((t, kind, vid, lane_id, intersection))

    def to_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "event", "vehicle_id", "lane_id", "intersection_id"])
            w.writerows(self.events)


@dataclass
class StepResult:
    observations: list[np.ndarray]
    reward: float
    done: bool
    info: dict


class _LaneRuntime:
    __slots__ = ("queue", "next_discharge_at", "occupancy")

    def __init__(self):
        self.queue: list[Vehicle] = []     # index 0 is at the stop line
        self.next_discharge_at = 0.0
        self.occupancy = 0                 # queued + en-route vehicles bound here


def observation_width(n_phases: int, n_approach_lanes: int = 8) -> int:
    return 3 * n_approach_lanes + n_phases


class SimState:
    """One running simulation instance (single-threaded by contract)."""

    def __init__(self, network: RoadNetwork, schedule: FlowSchedule,
                 horizon_s: int = 450, start_offset_s: float = 0.0,
                 seed: int = 0):
        self.network = network
        self.schedule = schedule
        self.horizon_s = int(horizon_s)
        self.start_offset_s = float(start_offset_s)
        self.rng = np.random.default_rng(seed)
        self.reset()

    # -- lifecycle -------------------------------------------------------

    def reset(self, start_offset_s: float | None = None) -> list[np.ndarray]:
        if start_offset_s is not None:
            self.start_offset_s = float(start_offset_s)
        net = self.network
        self.clock = 0
        self.current_phase = [0] * net.n_agents
        self.yellow_until = [0.0] * net.n_agents
        self.lane_rt = {lane.id: _LaneRuntime() for lane in net.lanes}
        self.edge_travelers: dict[int, list[Vehicle]] = {e.id: [] for e in net.edges}
        self.vehicles: dict[int, Vehicle] = {}
        self.inserted = 0
        self.completed = 0
        self._next_vid = 0
        off = self.start_offset_s
        plan = []
        for (t, o, d) in self.schedule.insertions():
            rel = t - off
            if 0 <= rel < self.horizon_s:
                plan.append((rel, o, d))
        self._insertion_plan = plan
        self._plan_ptr = 0
        self._blocked: list[tuple[str, str]] = []
        self.log = EventLog(
            n_intersections=net.n_agents,
            horizon_s=self.horizon_s,
            lane_to_intersection={l.id: l.intersection for l in net.lanes},
        )
        # integer accumulators; the replay pass reproduces them exactly
        self.queue_count_sum = 0
        self.halted_seconds = 0
        self.presence_seconds = 0
        self.moving_seconds = 0
        return [self.observe(i) for i in range(net.n_agents)]

    # -- queries -----------------------------------------------------------

    def zone_halted(self, lane_id: int) -> int:
        """Halted vehicles within the 50 m detector zone of a lane."""
        return min(len(self.lane_rt[lane_id].queue), DETECTOR_CAPACITY)

    def lane_halted(self, lane_id: int) -> int:
        """All halted vehicles on a lane, detector-limited or not."""
        return len(self.lane_rt[lane_id].queue)

    def intersection_halted(self, i: int) -> int:
        node = self.network.intersections[i]
        total = 0
        for d in range(4):
            for lane_id in self.network.edges[node.incoming[d]].lanes:
                total += self.lane_halted(lane_id)
        return total

    def lane_zone_vehicles(self, lane_id: int) -> tuple[int, int]:
        """(total vehicles, halted vehicles) inside the detector zone."""
        lane = self.network.lanes[lane_id]
        halted = self.zone_halted(lane_id)
        moving = 0
        for v in self.edge_travelers[lane.edge_id]:
            if v.lane_id == lane_id and v.pos <= DETECTOR_ZONE_M:
                moving += 1
        return halted + moving, halted

    def observe(self, i: int) -> np.ndarray:
        """Per-lane (count, speed, queue) triples plus the phase one-hot.

        Counts and queues are normalized by the 7-slot detector capacity
        and clipped to [0, 1]; speed is the mean of per-vehicle
        normalized speeds in the zone (1.0 when the zone is empty).
        """
        node = self.network.intersections[i]
        feats = []
        for d in range(4):
            edge = self.network.edges[node.incoming[d]]
            for lane_id in edge.lanes:
                total, halted = self.lane_zone_vehicles(lane_id)
                n = min(total, DETECTOR_CAPACITY) / DETECTOR_CAPACITY
                s = 1.0 if total == 0 else (total - halted) / total
                q = min(halted, DETECTOR_CAPACITY) / DETECTOR_CAPACITY
                feats.extend((n, s, q))
        onehot = [0.0] * node.n_phases
        onehot[self.current_phase[i]] = 1.0
        return np.asarray(feats + onehot, dtype=np.float64)

    def global_state(self) -> np.ndarray:
        return np.concatenate([self.observe(i) for i in range(self.network.n_agents)])

    def in_network(self) -> int:
        return len(self.vehicles)

    # -- dynamics -----------------------------------------------------------

    def _try_insert(self, origin: str, dest: str) -> bool:
        net = self.network
        o_edge = net.edge_by_name[origin]
        d_edge = net.edge_by_name[dest]
        route = net.route(o_edge, d_edge)
        next_edge = route[1] if len(route) > 1 else None
        lane_id = net.lane_for_movement(o_edge, next_edge)
        rt = self.lane_rt[lane_id]
        if rt.occupancy >= net.edges[o_edge].capacity_per_lane:
            return False
        v = Vehicle(self._next_vid, route, self.clock)
        self._next_vid += 1
        v.pos = net.edges[o_edge].length
        v.lane_id = lane_id
        rt.occupancy += 1
        self.edge_travelers[o_edge].append(v)
        self.vehicles[v.vid] = v
        self.inserted += 1
        self.log.append(self.clock, "insert", v.vid, lane_id,
                        net.lanes[lane_id].intersection)
        return True

    def _insertions(self) -> None:
        still_blocked = []
        for origin, dest in self._blocked:
            if not self._try_insert(origin, dest):
                still_blocked.append((origin, dest))
        self._blocked = still_blocked
        plan = self._insertion_plan
        while self._plan_ptr < len(plan) and plan[self._plan_ptr][0] <= self.clock:
            _, origin, dest = plan[self._plan_ptr]
            self._plan_ptr += 1
            if not self._try_insert(origin, dest):
                self._blocked.append((origin, dest))

    def _vehicle_next_lane(self, v: Vehicle, edge_id: int) -> int | None:
        """Lane the vehicle will occupy on `edge_id` (None on a fringe-out)."""
        net = self.network
        if net.edges[edge_id].dst >= net.n_agents:
            return None
        k = v.route.index(edge_id, v.leg)
        nxt = v.route[k + 1] if k + 1 < len(v.route) else None
        return net.lane_for_movement(edge_id, nxt)

    def _discharge(self) -> None:
        net = self.network
        for i, node in enumerate(net.intersections):
            if self.clock < self.yellow_until[i]:
                continue  # interlock: nothing crosses while switching
            for lane_id in node.phases[self.current_phase[i]]:
                rt = self.lane_rt[lane_id]
                if not rt.queue or self.clock < rt.next_discharge_at:
                    continue
                head = rt.queue[0]
                next_edge = head.route[head.leg + 1]
                next_lane = self._vehicle_next_lane(head, next_edge)
                if next_lane is not None:
                    nrt = self.lane_rt[next_lane]
                    if nrt.occupancy >= net.edges[next_edge].capacity_per_lane:
                        continue  # spillback: no room downstream
                    nrt.occupancy += 1
                rt.queue.pop(0)
                rt.occupancy -= 1
                rt.next_discharge_at = self.clock + DISCHARGE_HEADWAY_S
                self.log.append(self.clock, "depart", head.vid, lane_id, i)
                head.leg += 1
                head.pos = net.edges[next_edge].length
                head.halted = False
                head.lane_id = next_lane
                # queued followers close up one slot each
                for k, follower in enumerate(rt.queue):
                    follower.pos = VEHICLE_SLOT_M * k
                self.edge_travelers[next_edge].append(head)

    def _movement(self) -> None:
        net = self.network
        for edge in net.edges:
            travelers = self.edge_travelers[edge.id]
            if not travelers:
                continue
            arrived: list[Vehicle] = []
            for v in travelers:
                v.pos -= FREE_FLOW_MPS
                if edge.dst >= net.n_agents:
                    if v.pos <= 0.0:
                        arrived.append(v)
                else:
                    tail = VEHICLE_SLOT_M * len(self.lane_rt[v.lane_id].queue)
                    if v.pos <= tail:
                        arrived.append(v)
            for v in arrived:
                travelers.remove(v)
                if edge.dst >= net.n_agents:
                    v.completed_at = self.clock
                    self.completed += 1
                    del self.vehicles[v.vid]
                    self.log.append(self.clock, "complete", v.vid, -1, -1)
                else:
                    rt = self.lane_rt[v.lane_id]
                    v.pos = VEHICLE_SLOT_M * len(rt.queue)
                    v.halted = True
                    rt.queue.append(v)
                    self.log.append(self.clock, "halt", v.vid, v.lane_id,
                                    net.lanes[v.lane_id].intersection)

    def _account(self) -> None:
        halted = 0
        for rt in self.lane_rt.values():
            for v in rt.queue:
                v.wait += 1
            halted += len(rt.queue)
        present = len(self.vehicles)
        self.halted_seconds += halted
        self.presence_seconds += present
        self.moving_seconds += present - halted
        self.queue_count_sum += halted
        if self.inserted != len(self.vehicles) + self.completed:
            raise AssertionError("vehicle conservation violated")

    def advance(self, joint_action: list[int]) -> StepResult:
        """Apply one phase choice per intersection and run 5 substeps."""
        net = self.network
        if len(joint_action) != net.n_agents:
            raise ValueError("one action per intersection required")
        for i, a in enumerate(joint_action):
            a = int(a)
            if not 0 <= a < net.intersections[i].n_phases:
                raise ValueError(f"invalid phase {a} for intersection {i}")
            if a != self.current_phase[i]:
                self.current_phase[i] = a
                self.yellow_until[i] = self.clock + YELLOW_S
        completed_before = self.completed
        for _ in range(ACTION_INTERVAL_S):
            self._insertions()
            self._discharge()
            self._movement()
            self._account()
            self.clock += 1
        obs = [self.observe(i) for i in range(net.n_agents)]
        reward = global_reward(self)
        done = self.clock >= self.horizon_s
        info = {
            "clock": self.clock,
            "inserted": self.inserted,
            "completed": self.completed,
            "completions_this_step": self.completed - completed_before,
            "in_network": self.in_network(),
        }
        return StepResult(obs, reward, done, info)

    # -- live metrics ------------------------------------------------------

    def metrics(self) -> dict:
        """Running metrics; `replay_metrics` rebuilds these from the log."""
        steps = max(1, self.clock)
        denom_queue = steps * self.network.n_agents
        mean_queue = self.queue_count_sum / denom_queue
        if self.completed > 0:
            mean_wait = self.halted_seconds / self.completed
        else:
            mean_wait = 0.0
        if self.presence_seconds > 0:
            mean_speed = FREE_FLOW_MPS * self.moving_seconds / self.presence_seconds
        else:
            mean_speed = FREE_FLOW_MPS
        return {
            "mean_queue_length": mean_queue,
            "mean_wait_s_per_veh": mean_wait,
            "mean_speed_mps": mean_speed,
            "completed": self.completed,
            "inserted": self.inserted,
        }


def global_reward(state: SimState) -> float:
    """Negated count of vehicles stopped anywhere in the network.

    Shared by every agent; detectors cap what agents observe, not what
    the training signal penalizes.
    """
    total = 0
    for lane in state.network.lanes:
        total += state.lane_halted(lane.id)
    return -float(total)
