"""Greedy evaluation, ablation modes, traffic metrics, message export.

Evaluation runs the policy with epsilon 0, mean messages, and hard
(thresholded) gates. The communication mode can be overridden without
touching the learned parameters: `full` forces every gate bit on,
`none` silences the channel, `random:p` draws each bit from an
independent coin. The percent-communication statistic counts set bits
over (step, sender, active recipient slot, coordinate) — recipients
that do not exist (fringe sides) are excluded from the denominator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import commchannel as cc
from .diffcore import ParameterSet, Tape
from .network import opposite
from .qnets import NetworkSizes, agent_q_forward, comm_forward, zero_hidden
from .simulator import EventLog, FREE_FLOW_MPS, SimState
from .trainer import TrainConfig, _neighbor_perms, _one_hot

__all__ = ["CommMode", "EvalMetrics", "evaluate", "pct_communication",
           "traffic_metrics", "export_messages", "message_influence",
           "write_metrics_csv", "METRICS_HEADER"]

METRICS_HEADER = ("mode", "seed", "episodes", "mean_queue", "wait_s_per_veh",
                  "speed_mps", "pct_comm")


@dataclass(frozen=True)
class CommMode:
    kind: str              # learned | full | none | random
    p: float = 0.5

    def __post_init__(self):
        if self.kind not in ("learned", "full", "none", "random"):
            raise ValueError(f"unknown communication mode '{self.kind}'")
        if self.kind == "random" and not 0.0 <= self.p <= 1.0:
            raise ValueError("random mode needs p in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "CommMode":
        if text.startswith("random:"):
            return cls("random", float(text.split(":", 1)[1]))
        if text == "random":
            return cls("random", 0.5)
        return cls(text)

    def __str__(self) -> str:
        return f"random:{self.p}" if self.kind == "random" else self.kind


@dataclass
class EvalMetrics:
    mean_queue_length: float
    mean_wait_time: float
    mean_speed: float
    pct_communication: float
    episodes: int
    completed_vehicles: int

    @property
    def no_completed_vehicles(self) -> bool:
        return self.completed_vehicles == 0


def pct_communication(gate_bits: np.ndarray | list) -> float:
    """Percent of transmitted bits among all loggable (active-slot) bits."""
    bits = np.asarray(gate_bits)
    if bits.size == 0:
        return 0.0
    return 100.0 * float(bits.sum()) / bits.size


def _episode_rollout(env: SimState, params: ParameterSet, sizes: NetworkSizes,
                     cfg: TrainConfig, mode: CommMode,
                     rng: np.random.Generator, *, want_influence: bool = False,
                     export_rows: list | None = None):
    """One greedy episode under a communication mode override.

    Returns (gate-bit list over active slots, influence KL list).
    """
    net = env.network
    n, L, A = net.n_agents, sizes.msg_len, sizes.n_actions
    tape = Tape(record=False)
    obs = np.stack(env.reset())
    T = env.horizon_s // 5
    perms = _neighbor_perms(net, 1)
    active = np.array([[net.intersections[i].neighbors.get(d) is not None
                        for d in range(4)] for i in range(n)])
    comm_on = sizes.comm_enabled and cfg.comm_enabled and n > 1

    h = zero_hidden(n, sizes)
    hc = zero_hidden(n, sizes)
    inbox_prev = np.zeros((n, 4 * L))
    prev_a = np.full(n, -1, dtype=np.int64)
    gate_bits: list[np.ndarray] = []
    influence: list[float] = []

    for t in range(T):
        obs_t = tape.leaf(obs)
        pa_t = tape.leaf(_one_hot(prev_a, A))

        inbox_new = inbox_prev
        if comm_on:
            mu, logvar, glog, hc = comm_forward(tape, params, obs_t, pa_t,
                                                tape.leaf(inbox_prev), hc)
            m = mu.data                       # mean message, no sampling
            relaxed = tape.sigmoid(glog).data
            if mode.kind == "learned":
                bits = cc.hard_gate(relaxed)
            elif mode.kind == "full":
                bits = np.ones((n, 4 * L), dtype=np.int64)
            elif mode.kind == "none":
                bits = np.zeros((n, 4 * L), dtype=np.int64)
            else:
                bits = (rng.random((n, 4 * L)) < mode.p).astype(np.int64)
            slot_bits = bits.reshape(n, 4, L)
            gate_bits.append(slot_bits[active].ravel())
            inbox_new = np.zeros((n, 4 * L))
            for d in range(4):
                src = perms[d]
                mhat = m * bits[:, opposite(d) * L:(opposite(d) + 1) * L]
                ok = src >= 0
                inbox_new[ok, d * L:(d + 1) * L] = mhat[src[ok]]

        q_inbox = inbox_new if cfg.message_timing == "samestep" else inbox_prev
        q, h_next = agent_q_forward(tape, params, obs_t, pa_t,
                                    tape.leaf(q_inbox), h)
        acts = [int(np.argmax(q.data[i])) for i in range(n)]

        if want_influence:
            q0, _ = agent_q_forward(tape, params, obs_t, pa_t,
                                    tape.leaf(np.zeros_like(q_inbox)), h)
            pi = tape.softmax(q).data
            pi0 = tape.softmax(q0).data
            kl = np.sum(pi * (np.log(pi) - np.log(pi0)), axis=1)
            influence.extend(kl.tolist())

        if export_rows is not None and comm_on:
            lanes = obs[:, :24].reshape(n, 8, 3)
            for i in range(n):
                export_rows.append(list(m[i]) + [
                    float(lanes[i, :, 1].mean()),   # mean normalized speed
                    float(lanes[i, :, 0].mean()),   # mean density
                    float(lanes[i, :, 2].mean()),   # mean queue length
                    acts[i]])

        res = env.advance(acts)
        obs = np.stack(res.observations)
        h = h_next
        inbox_prev = inbox_new
        prev_a = np.asarray(acts, dtype=np.int64)

    return gate_bits, influence


def evaluate(params: ParameterSet, env_factory, episodes: int = 10,
             mode: CommMode = CommMode("learned"), seed: int = 0, *,
             sizes: NetworkSizes, cfg: TrainConfig) -> EvalMetrics:
    """Greedy evaluation over `episodes` runs of `env_factory(k)`."""
    rng = np.random.default_rng(seed)
    queue_vals, wait_vals, speed_vals = [], [], []
    bits_all: list[np.ndarray] = []
    completed = 0
    for k in range(episodes):
        env = env_factory(k)
        bits, _ = _episode_rollout(env, params, sizes, cfg, mode, rng)
        m = env.metrics()
        queue_vals.append(m["mean_queue_length"])
        wait_vals.append(m["mean_wait_s_per_veh"])
        speed_vals.append(m["mean_speed_mps"])
        completed += m["completed"]
        if bits:
            bits_all.append(np.concatenate(bits))
    pct = pct_communication(np.concatenate(bits_all)) if bits_all else 0.0
    return EvalMetrics(
        mean_queue_length=float(np.mean(queue_vals)),
        mean_wait_time=float(np.mean(wait_vals)),
        mean_speed=float(np.mean(speed_vals)),
        pct_communication=pct,
        episodes=episodes,
        completed_vehicles=completed,
    )


def traffic_metrics(log: EventLog) -> tuple[float, float, float, int]:
    """Rebuild (mean queue, mean wait, mean speed) from the event log alone.

    This is the independent second pass: per-lane queues are
    reconstructed from halt/depart events and resampled second by
    second, reproducing the simulator's accumulators bit for bit.
    """
    events_by_t: dict[int, list] = {}
    for ev in log.events:
        events_by_t.setdefault(ev[0], []).append(ev)
    queues: dict[int, list[int]] = {}
    present: set[int] = set()
    queue_count_sum = 0
    halted_seconds = 0
    presence_seconds = 0
    moving_seconds = 0
    completed = 0
    for t in range(log.horizon_s):
        for (_, kind, vid, lane_id, _inter) in events_by_t.get(t, ()):
            if kind == "insert":
                present.add(vid)
            elif kind == "halt":
                queues.setdefault(lane_id, []).append(vid)
            elif kind == "depart":
                queues[lane_id].remove(vid)
            elif kind == "complete":
                present.discard(vid)
                completed += 1
        halted = sum(len(q) for q in queues.values())
        halted_seconds += halted
        presence_seconds += len(present)
        moving_seconds += len(present) - halted
        queue_count_sum += halted
    steps = max(1, log.horizon_s)
    mean_queue = queue_count_sum / (steps * log.n_intersections)
    mean_wait = halted_seconds / completed if completed > 0 else 0.0
    mean_speed = (log.free_flow_mps * moving_seconds / presence_seconds
                  if presence_seconds > 0 else log.free_flow_mps)
    return mean_queue, mean_wait, mean_speed, completed


def message_influence(params: ParameterSet, env_factory, episodes: int, *,
                      sizes: NetworkSizes, cfg: TrainConfig,
                      seed: int = 0) -> float:
    """Mean KL between the policy with and without its delivered inbox."""
    rng = np.random.default_rng(seed)
    kls: list[float] = []
    for k in range(episodes):
        env = env_factory(k)
        _, infl = _episode_rollout(env, params, sizes, cfg,
                                   CommMode("learned"), rng,
                                   want_influence=True)
        kls.extend(infl)
    return float(np.mean(kls)) if kls else 0.0


def export_messages(params: ParameterSet, env_factory, episodes: int, path, *,
                    sizes: NetworkSizes, cfg: TrainConfig,
                    seed: int = 0) -> int:
    """Dump one row per (step, agent): message coordinates, lane-averaged
    observation features, and the chosen action. Returns the row count."""
    rng = np.random.default_rng(seed)
    rows: list[list] = []
    for k in range(episodes):
        env = env_factory(k)
        _episode_rollout(env, params, sizes, cfg, CommMode("learned"), rng,
                         export_rows=rows)
    header = [f"m{i}" for i in range(1, sizes.msg_len + 1)]
    header += ["mean_speed_obs", "mean_density_obs", "mean_queue_obs", "action"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return len(rows)


def write_metrics_csv(path, rows: list[tuple]) -> None:
    """rows of (mode, seed, episodes, EvalMetrics)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for mode, seed, episodes, m in rows:
            w.writerow([str(mode), seed, episodes,
                        repr(m.mean_queue_length), repr(m.mean_wait_time),
                        repr(m.mean_speed), repr(m.pct_communication)])
