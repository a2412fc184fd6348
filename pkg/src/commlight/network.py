"""Grid road networks: intersections, directed edges, lanes, and phases.

Geometry is a rows x cols lattice of signalized intersections. Every
intersection has four approaches (N, E, S, W); approaches on the
perimeter connect to fringe terminals where trips start and end. Each
approach edge carries two lanes: lane 0 serves straight and right
movements, lane 1 serves left turns. The four built-in phases are
NS-through, EW-through, NS-left, EW-left, so every lane is served by
exactly one phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DIR_N", "DIR_E", "DIR_S", "DIR_W", "DIR_NAMES",
    "opposite", "right_of", "left_of",
    "Lane", "Edge", "Intersection", "RoadNetwork", "build_grid",
    "VEHICLE_SLOT_M", "DETECTOR_ZONE_M", "DETECTOR_CAPACITY",
    "FREE_FLOW_MPS", "N_PHASES", "PHASE_NAMES",
]

DIR_N, DIR_E, DIR_S, DIR_W = 0, 1, 2, 3
DIR_NAMES = ("north", "east", "south", "west")

VEHICLE_SLOT_M = 7.5          # space one halted vehicle occupies
DETECTOR_ZONE_M = 50.0        # sensing range upstream of the stop line
DETECTOR_CAPACITY = 7         # ceil(50 / 7.5), used to normalize counts
FREE_FLOW_MPS = 13.89         # speed limit on every lane

N_PHASES = 4
PHASE_NAMES = ("NS", "EW", "NS-left", "EW-left")


def opposite(d: int) -> int:
    return (d + 2) % 4


def right_of(heading: int) -> int:
    return (heading + 1) % 4


def left_of(heading: int) -> int:
    return (heading - 1) % 4


@dataclass
class Lane:
    id: int
    edge_id: int
    index: int                 # 0 = through/right, 1 = left
    intersection: int          # intersection this lane feeds


@dataclass
class Edge:
    id: int
    name: str
    src: int
    dst: int
    length: float
    approach_dir: int | None   # side of dst the edge arrives from; None if dst is fringe
    lanes: tuple[int, ...]     # empty for fringe-out edges

    @property
    def capacity_per_lane(self) -> int:
        return int(self.length // VEHICLE_SLOT_M)


@dataclass
class Intersection:
    id: int
    row: int
    col: int
    incoming: dict[int, int]   # direction -> edge id
    outgoing: dict[int, int]   # direction -> edge id
    phases: list[list[int]]    # phase -> lane ids allowed to discharge
    neighbors: dict[int, int | None] = field(default_factory=dict)

    @property
    def n_phases(self) -> int:
        return len(self.phases)


class RoadNetwork:
    """Static description of the traffic graph. Agents are intersections."""

    def __init__(self, rows: int, cols: int, edge_length: float):
        self.rows = rows
        self.cols = cols
        self.edge_length = edge_length
        self.intersections: list[Intersection] = []
        self.edges: list[Edge] = []
        self.lanes: list[Lane] = []
        self.edge_by_name: dict[str, int] = {}
        self.adjacency = np.zeros((rows * cols, rows * cols), dtype=np.int64)
        self._route_cache: dict[tuple[int, int], tuple[int, ...]] = {}

    @property
    def n_agents(self) -> int:
        return len(self.intersections)

    def node_id(self, row: int, col: int) -> int:
        return row * self.cols + col

    def neighbor_ids(self, i: int) -> list[int]:
        return [j for j in range(self.n_agents) if self.adjacency[i, j]]

    def fringe_in_edges(self) -> list[Edge]:
        return [e for e in self.edges if e.src >= self.n_agents]

    def fringe_out_edges(self) -> list[Edge]:
        return [e for e in self.edges if e.dst >= self.n_agents]

    # -- construction helpers ------------------------------------------------

    def _add_edge(self, name: str, src: int, dst: int, approach_dir: int | None) -> Edge:
        eid = len(self.edges)
        lane_ids: tuple[int, ...] = ()
        if approach_dir is not None:
            ids = []
            for idx in (0, 1):
                lane = Lane(len(self.lanes), eid, idx, dst)
                self.lanes.append(lane)
                ids.append(lane.id)
            lane_ids = tuple(ids)
        edge = Edge(eid, name, src, dst, self.edge_length, approach_dir, lane_ids)
        self.edges.append(edge)
        self.edge_by_name[name] = eid
        return edge

    # -- movement geometry -----------------------------------------------------

    def turn(self, edge_id: int, next_edge_id: int) -> str:
        """Turn type taken when continuing from one edge onto the next."""
        edge = self.edges[edge_id]
        node = self.intersections[edge.dst]
        out_dir = None
        for d, eid in node.outgoing.items():
            if eid == next_edge_id:
                out_dir = d
        if out_dir is None:
            raise ValueError(f"edge {next_edge_id} does not leave node {edge.dst}")
        heading = opposite(edge.approach_dir)
        if out_dir == heading:
            return "straight"
        if out_dir == right_of(heading):
            return "right"
        if out_dir == left_of(heading):
            return "left"
        return "uturn"

    def lane_for_movement(self, edge_id: int, next_edge_id: int | None) -> int:
        """Lane id a vehicle must queue in on `edge_id` for its next leg."""
        edge = self.edges[edge_id]
        if next_edge_id is None:
            return edge.lanes[0]
        t = self.turn(edge_id, next_edge_id)
        idx = 0 if t in ("straight", "right") else 1
        return edge.lanes[idx]

    def primary_out_edge(self, lane_id: int) -> int | None:
        """The outgoing edge a lane principally feeds (straight or left)."""
        lane = self.lanes[lane_id]
        edge = self.edges[lane.edge_id]
        node = self.intersections[edge.dst]
        heading = opposite(edge.approach_dir)
        want = heading if lane.index == 0 else left_of(heading)
        return node.outgoing.get(want)

    # -- routing ------------------------------------------------------------------

    def route(self, origin_edge: int, dest_edge: int) -> tuple[int, ...]:
        """Shortest edge path by hop count, fixed at insertion time.

        Breadth-first over edges in id order (deterministic); u-turns
        are never taken.
        """
        key = (origin_edge, dest_edge)
        cached = self._route_cache.get(key)
        if cached is not None:
            return cached
        if origin_edge == dest_edge:
            self._route_cache[key] = (origin_edge,)
            return (origin_edge,)
        prev: dict[int, int] = {origin_edge: -1}
        frontier = [origin_edge]
        while frontier:
            nxt_frontier = []
            for eid in frontier:
                edge = self.edges[eid]
                if edge.dst >= self.n_agents:
                    continue  # fringe terminal: trip over
                node = self.intersections[edge.dst]
                for d in (DIR_N, DIR_E, DIR_S, DIR_W):
                    out = node.outgoing.get(d)
                    if out is None or out in prev or d == edge.approach_dir:
                        continue
                    prev[out] = eid
                    if out == dest_edge:
                        path = [out]
                        while path[-1] != origin_edge:
                            path.append(prev[path[-1]])
                        route = tuple(reversed(path))
                        self._route_cache[key] = route
                        return route
                    nxt_frontier.append(out)
            frontier = nxt_frontier
        raise ValueError(
            f"no route from edge '{self.edges[origin_edge].name}' "
            f"to '{self.edges[dest_edge].name}'")


def build_grid(rows: int, cols: int, edge_length: float = 200.0) -> RoadNetwork:
    """Build a rows x cols signalized grid with fringe terminals.

    Every intersection gets four two-lane approaches and the standard
    four-phase table; the adjacency matrix links orthogonal neighbors.
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid needs at least one row and one column")
    net = RoadNetwork(rows, cols, edge_length)
    n = rows * cols
    for r in range(rows):
        for c in range(cols):
            net.intersections.append(
                Intersection(net.node_id(r, c), r, c, {}, {}, []))

    offsets = {DIR_N: (-1, 0), DIR_E: (0, 1), DIR_S: (1, 0), DIR_W: (0, -1)}
    fringe_counter = n

    for r in range(rows):
        for c in range(cols):
            i = net.node_id(r, c)
            node = net.intersections[i]
            for d in (DIR_N, DIR_E, DIR_S, DIR_W):
                dr, dc = offsets[d]
                nr, nc = r + dr, c + dc
                if 0 <= nr < rows and 0 <= nc < cols:
                    j = net.node_id(nr, nc)
                    node.neighbors[d] = j
                    net.adjacency[i, j] = 1
                    name = f"i{j}_to_i{i}"
                    if name not in net.edge_by_name:
                        edge = net._add_edge(name, j, i, d)
                        node.incoming[d] = edge.id
                    name_out = f"i{i}_to_i{j}"
                    if name_out not in net.edge_by_name:
                        # created when j builds its incoming list; ensure now
                        edge_out = net._add_edge(name_out, i, j, opposite(d))
                        net.intersections[j].incoming[opposite(d)] = edge_out.id
                    node.outgoing[d] = net.edge_by_name[name_out]
                else:
                    node.neighbors[d] = None
                    side = DIR_NAMES[d]
                    k = c if d in (DIR_N, DIR_S) else r
                    fringe = fringe_counter
                    fringe_counter += 1
                    edge_in = net._add_edge(f"{side}_in_{k}", fringe, i, d)
                    edge_out = net._add_edge(f"{side}_out_{k}", i, fringe, None)
                    node.incoming[d] = edge_in.id
                    node.outgoing[d] = edge_out.id

    for node in net.intersections:
        through = {d: net.edges[node.incoming[d]].lanes[0] for d in range(4)}
        left = {d: net.edges[node.incoming[d]].lanes[1] for d in range(4)}
        node.phases = [
            [through[DIR_N], through[DIR_S]],
            [through[DIR_E], through[DIR_W]],
            [left[DIR_N], left[DIR_S]],
            [left[DIR_E], left[DIR_W]],
        ]
    return net
