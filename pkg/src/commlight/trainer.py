"""Episode collection, replay, and the joint TD + communication objective.

Training follows the collect/replay pattern: whole episodes are rolled
out with epsilon-greedy actions and stochastic messages, stored with
their noise draws, and replayed later through a batched recurrent
unroll that rebuilds every hidden state from the episode start. One
backward pass updates the utility, message, posterior, and mixer
parameters together; a frozen copy of everything provides TD targets
and is refreshed every K episodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import commchannel as cc
from .diffcore import ParameterSet, Tape, Tensor, backward
from .optim import RMSProp, clip_grad_norm
from .qnets import (
    NetworkSizes, agent_q_forward, build_params, comm_forward,
    posterior_logits, mixer_forward, select_action, zero_hidden,
)
from .network import opposite
from .simulator import SimState

__all__ = ["TrainConfig", "Episode", "ReplayBuffer", "epsilon",
           "rollout_episode", "compute_losses", "td_loss", "total_loss",
           "train_iteration", "Trainer", "TrainerState", "sizes_for"]


@dataclass
class TrainConfig:
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 50_000
    batch_episodes: int = 32
    buffer_capacity: int = 5000
    target_update_episodes: int = 200
    beta_m: float = 1e-5
    beta_c: float = 1e-5
    gumbel_temperature: float = cc.GUMBEL_TEMPERATURE
    message_length: int = cc.MESSAGE_LENGTH
    n_envs: int = 2
    total_episodes: int = 1000
    learning_rate: float = 5e-4
    rmsprop_smoothing: float = 0.99
    rmsprop_eps: float = 1e-5
    grad_clip: float = 10.0
    hidden: int = 64
    embed: int = 32
    hyper_hidden: int = 64
    eval_every_episodes: int = 200
    eval_episodes: int = 10
    comm_enabled: bool = True
    message_timing: str = "delayed"       # or "samestep"
    stop_gradient_policy: bool = False
    double_q: bool = False
    replay_stored_noise: bool = True


def epsilon(step: int, schedule: tuple[float, float, int]) -> float:
    """Linear anneal from start to end over the horizon, then constant."""
    start, end, horizon = schedule
    if horizon <= 0 or step >= horizon:
        return end
    frac = step / horizon
    return start + (end - start) * frac


@dataclass
class Episode:
    """One fixed-length episode with everything replay needs.

    Message and gate noise are stored so the training unroll can
    rebuild the exact messages recipients saw.
    """
    obs: np.ndarray          # (T+1, n, D)
    states: np.ndarray       # (T+1, S)
    actions: np.ndarray      # (T, n)
    rewards: np.ndarray      # (T,)
    dones: np.ndarray        # (T,)
    msg_noise: np.ndarray    # (T, n, L)
    gate_noise: np.ndarray   # (T, n, 4*L)
    messages: np.ndarray     # (T, n, L) as sampled at rollout
    gates: np.ndarray        # (T, n, 4*L) relaxed gates at rollout
    q_values: np.ndarray     # (T, n, A) rollout-time utilities

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    def total_reward(self) -> float:
        return float(self.rewards.sum())


class ReplayBuffer:
    """Ring of whole episodes; the oldest is replaced once full."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: list[Episode] = []
        self.insertions = 0

    def __len__(self) -> int:
        return len(self.episodes)

    def add(self, ep: Episode) -> None:
        if len(self.episodes) < self.capacity:
            self.episodes.append(ep)
        else:
            self.episodes[self.insertions % self.capacity] = ep
        self.insertions += 1

    def sample(self, k: int, rng: np.random.Generator) -> list[Episode]:
        if len(self.episodes) < k:
            raise ValueError(f"buffer holds {len(self.episodes)} < {k} episodes")
        idx = rng.choice(len(self.episodes), size=k, replace=False)
        return [self.episodes[int(i)] for i in idx]


# -- shared network-side geometry ---------------------------------------------

def _neighbor_perms(net, B: int) -> np.ndarray:
    """perm[d, b*n+j] = row of j's neighbor in direction d, or -1."""
    n = net.n_agents
    perm = np.full((4, B * n), -1, dtype=np.int64)
    for j in range(n):
        for d in range(4):
            nb = net.intersections[j].neighbors.get(d)
            if nb is not None:
                for b in range(B):
                    perm[d, b * n + j] = b * n + nb
    return perm


def _slot_mask(net, msg_len: int) -> np.ndarray:
    """(n, 4*L) mask of gate coordinates that address a real neighbor."""
    n = net.n_agents
    mask = np.zeros((n, 4 * msg_len))
    for i in range(n):
        for d in range(4):
            if net.intersections[i].neighbors.get(d) is not None:
                mask[i, d * msg_len:(d + 1) * msg_len] = 1.0
    return mask


def _degrees(net) -> np.ndarray:
    return np.array([sum(1 for d in range(4)
                         if net.intersections[i].neighbors.get(d) is not None)
                     for i in range(net.n_agents)], dtype=np.float64)


def _one_hot(actions: np.ndarray, n_actions: int) -> np.ndarray:
    out = np.zeros(actions.shape + (n_actions,))
    valid = actions >= 0
    out[valid, actions[valid]] = 1.0
    return out


# -- rollout -------------------------------------------------------------------

def rollout_episode(env: SimState, params: ParameterSet, sizes: NetworkSizes,
                    cfg: TrainConfig, eps: float, rng: np.random.Generator,
                    start_offset_s: float | None = None) -> Episode:
    """Collect one episode with epsilon-greedy actions.

    Messages are sampled stochastically and gates are relaxed draws at
    the configured temperature, exactly as the training unroll will
    replay them.
    """
    net = env.network
    n, L, A = net.n_agents, sizes.msg_len, sizes.n_actions
    tape = Tape(record=False)
    obs = np.stack(env.reset(start_offset_s))
    T = env.horizon_s // 5
    perms = _neighbor_perms(net, 1)

    obs_hist = np.zeros((T + 1, n, sizes.obs_dim))
    state_hist = np.zeros((T + 1, sizes.state_dim))
    actions = np.zeros((T, n), dtype=np.int64)
    rewards = np.zeros(T)
    dones = np.zeros(T, dtype=bool)
    msg_noise = np.zeros((T, n, L))
    gate_noise = np.zeros((T, n, 4 * L))
    messages = np.zeros((T, n, L))
    gates = np.zeros((T, n, 4 * L))
    q_hist = np.zeros((T, n, A))

    h = zero_hidden(n, sizes)
    hc = zero_hidden(n, sizes)
    inbox_prev = np.zeros((n, 4 * L))
    prev_a = np.full(n, -1, dtype=np.int64)

    for t in range(T):
        obs_hist[t] = obs
        state_hist[t] = env.global_state()
        obs_t = tape.leaf(obs)
        pa_t = tape.leaf(_one_hot(prev_a, A))

        if cfg.comm_enabled and n > 1:
            mu, logvar, glog, hc = comm_forward(
                tape, params, obs_t, pa_t, tape.leaf(inbox_prev), hc)
            eps_m = rng.standard_normal((n, L))
            g_n = cc.logistic_noise(rng, (n, 4 * L))
            # same ops the training unroll replays, so values match bit-for-bit
            m_t = cc.sample_message_t(tape, mu, logvar, eps_m)
            c_t = cc.gumbel_sigmoid_t(tape, glog, cfg.gumbel_temperature, g_n)
            m, c = m_t.data, c_t.data
            msg_noise[t], gate_noise[t] = eps_m, g_n
            messages[t], gates[t] = m, c
            inbox_new = np.zeros((n, 4 * L))
            for d in range(4):
                src = perms[d]
                mhat = m * c[:, opposite(d) * L:(opposite(d) + 1) * L]
                ok = src >= 0
                inbox_new[ok, d * L:(d + 1) * L] = mhat[src[ok]]
        else:
            inbox_new = inbox_prev

        q_inbox = inbox_new if cfg.message_timing == "samestep" else inbox_prev
        q, h = agent_q_forward(tape, params, obs_t, pa_t, tape.leaf(q_inbox), h)
        q_hist[t] = q.data
        acts = [select_action(q.data[i], eps, rng) for i in range(n)]
        res = env.advance(acts)

        actions[t] = acts
        rewards[t] = res.reward
        dones[t] = res.done
        obs = np.stack(res.observations)
        inbox_prev = inbox_new
        prev_a = np.asarray(acts, dtype=np.int64)
        if res.done and t + 1 < T:
            raise RuntimeError("episode terminated before its horizon")

    obs_hist[T] = obs
    state_hist[T] = env.global_state()
    return Episode(obs_hist, state_hist, actions, rewards, dones, msg_noise,
                   gate_noise, messages, gates, q_hist)


# -- batched unroll ---------------------------------------------------------------

class _Batch:
    """Stacked numpy views of a list of equal-length episodes."""

    def __init__(self, episodes: list[Episode], sizes: NetworkSizes):
        T = episodes[0].length
        if any(ep.length != T for ep in episodes):
            raise ValueError("episodes in a batch must share a length")
        self.T = T
        self.B = len(episodes)
        self.n = sizes.n_agents
        self.R = self.B * self.n
        self.obs = np.stack([ep.obs for ep in episodes])          # (B,T+1,n,D)
        self.states = np.stack([ep.states for ep in episodes])    # (B,T+1,S)
        self.actions = np.stack([ep.actions for ep in episodes])  # (B,T,n)
        self.rewards = np.stack([ep.rewards for ep in episodes])
        self.dones = np.stack([ep.dones for ep in episodes])
        self.msg_noise = np.stack([ep.msg_noise for ep in episodes])
        self.gate_noise = np.stack([ep.gate_noise for ep in episodes])

    def rows_obs(self, t: int) -> np.ndarray:
        return self.obs[:, t].reshape(self.R, -1)

    def rows_prev_actions(self, t: int, n_actions: int) -> np.ndarray:
        if t == 0:
            prev = np.full((self.B, self.n), -1, dtype=np.int64)
        else:
            prev = self.actions[:, t - 1]
        return _one_hot(prev.reshape(self.R), n_actions)

    def rows_actions(self, t: int, n_actions: int) -> np.ndarray:
        return _one_hot(self.actions[:, t].reshape(self.R), n_actions)


def _unroll(tape: Tape, params: ParameterSet, batch: _Batch, sizes: NetworkSizes,
            cfg: TrainConfig, net, *, with_posterior: bool,
            gate_override: str | None = None,
            rng: np.random.Generator | None = None) -> dict:
    """Rebuild the whole batch on `tape` from episode starts.

    Returns per-step lists of tensors: utilities, policies, posterior
    logits, message statistics, and gated inboxes.
    """
    n, L, A = sizes.n_agents, sizes.msg_len, sizes.n_actions
    R, T = batch.R, batch.T
    comm_on = cfg.comm_enabled and n > 1
    perms = _neighbor_perms(net, batch.B)
    h = zero_hidden(R, sizes)
    hc = zero_hidden(R, sizes)
    hr = zero_hidden(R, sizes)
    inbox_prev: Tensor = tape.leaf(np.zeros((R, 4 * L)))

    out = {"q": [], "pi": [], "post_logits": [], "mu": [], "logvar": [],
           "gate_logits": [], "gates": [], "messages": [], "inbox": []}

    for t in range(T + 1):
        obs_t = tape.leaf(batch.rows_obs(t))
        pa_t = tape.leaf(batch.rows_prev_actions(t, A))

        inbox_new = inbox_prev
        if comm_on and t < T:
            mu, logvar, glog, hc = comm_forward(tape, params, obs_t, pa_t,
                                                inbox_prev, hc)
            if cfg.replay_stored_noise or rng is None:
                eps_m = batch.msg_noise[:, t].reshape(R, L)
                g_n = batch.gate_noise[:, t].reshape(R, 4 * L)
            else:
                eps_m = rng.standard_normal((R, L))
                g_n = cc.logistic_noise(rng, (R, 4 * L))
            m = cc.sample_message_t(tape, mu, logvar, eps_m)
            c = cc.gumbel_sigmoid_t(tape, glog, cfg.gumbel_temperature, g_n)
            if gate_override == "ones":
                c = tape.leaf(np.ones((R, 4 * L)))
            slots = []
            for d in range(4):
                src_slot = opposite(d)
                msl = tape.slice(c, 1, src_slot * L, (src_slot + 1) * L)
                mhat = m if gate_override == "bypass" else tape.mul(m, msl)
                slots.append(tape.gather_rows(mhat, perms[d]))
            inbox_new = tape.concat(slots, axis=1)
            out["mu"].append(mu)
            out["logvar"].append(logvar)
            out["gate_logits"].append(glog)
            out["gates"].append(c)
            out["messages"].append(m)

        q_inbox = inbox_new if cfg.message_timing == "samestep" else inbox_prev
        q, h = agent_q_forward(tape, params, obs_t, pa_t, q_inbox, h)
        out["q"].append(q)
        out["inbox"].append(q_inbox)
        if t < T:
            out["pi"].append(tape.softmax(q))
            if comm_on and with_posterior:
                pl, hr = posterior_logits(tape, params, obs_t, pa_t, q_inbox, hr)
                out["post_logits"].append(pl)
        inbox_prev = inbox_new

    return out


def _sum_scalars(tape: Tape, scalars: list[Tensor]) -> Tensor:
    total = scalars[0]
    for s in scalars[1:]:
        total = tape.add(total, s)
    return total


def compute_losses(tape: Tape, params: ParameterSet,
                   target: ParameterSet | None, episodes: list[Episode],
                   sizes: NetworkSizes, cfg: TrainConfig, net, *,
                   want_td: bool = True, want_comm: bool = True,
                   gate_override: str | None = None,
                   precomputed_targets: np.ndarray | None = None):
    """Assemble the training objective on `tape`.

    Returns (loss tensor, CommLossTerms, diagnostics dict). The TD term
    needs `target`; the communication term needs `net` only because the
    message routing follows the adjacency graph. `precomputed_targets`
    short-circuits the target-side unroll (the targets are constants in
    the online parameters, so repeated-evaluation callers may reuse them).
    """
    batch = _Batch(episodes, sizes)
    n, L, A = sizes.n_agents, sizes.msg_len, sizes.n_actions
    R, T, B = batch.R, batch.T, batch.B
    comm_on = cfg.comm_enabled and n > 1

    out = _unroll(tape, params, batch, sizes, cfg, net,
                  with_posterior=want_comm and comm_on,
                  gate_override=gate_override)

    pieces: list[Tensor] = []
    diag: dict = {}

    td_tensor = None
    if want_td:
        if precomputed_targets is not None:
            targets = precomputed_targets
        else:
            if target is None:
                raise ValueError("TD loss needs target parameters")
            ghost = Tape(record=False)
            tgt = _unroll(ghost, target, batch, sizes, cfg, net,
                          with_posterior=False, gate_override=gate_override)
            if cfg.double_q:
                greedy_src = [q.data for q in out["q"]]
            else:
                greedy_src = [q.data for q in tgt["q"]]
            y = np.zeros((B, T))
            for t in range(1, T + 1):
                greedy = np.argmax(greedy_src[t], axis=1)
                util = tgt["q"][t].data[np.arange(R), greedy].reshape(B, n)
                qtot_next = mixer_forward(ghost, target, ghost.leaf(util),
                                          ghost.leaf(batch.states[:, t]), sizes)
                y[:, t - 1] = qtot_next.data
            targets = batch.rewards + cfg.gamma * (1.0 - batch.dones) * y

        sq_terms = []
        for t in range(T):
            onehot = tape.leaf(batch.rows_actions(t, A))
            u = tape.reshape(tape.sum(tape.mul(out["q"][t], onehot), axis=1), (B, n))
            qtot = mixer_forward(tape, params, u, tape.leaf(batch.states[:, t]),
                                 sizes)
            sq_terms.append(tape.sum(tape.sqerr(qtot, tape.leaf(targets[:, t]))))
        td_tensor = tape.scale(_sum_scalars(tape, sq_terms), 1.0 / (B * T))
        pieces.append(td_tensor)
        diag["td"] = td_tensor.item()
        diag["targets"] = targets

    terms = cc.CommLossTerms(0.0, 0.0, 0.0, cfg.beta_m, cfg.beta_c)
    if want_comm and comm_on:
        deg = _degrees(net)
        pairs = float(deg.sum())
        recipients = float((deg > 0).sum())
        deg_rows = np.tile(deg, B)
        recip_rows = np.tile((deg > 0).astype(np.float64), B)
        smask_rows = np.tile(_slot_mask(net, L), (B, 1))

        ce_parts, klm_parts, klc_parts = [], [], []
        for t in range(T):
            pi = out["pi"][t]
            if cfg.stop_gradient_policy:
                pi = tape.leaf(pi.data.copy())
            ce_rows = cc.cross_entropy_rows_t(tape, pi, out["post_logits"][t])
            ce_parts.append(tape.sum(tape.mul(ce_rows, tape.leaf(recip_rows))))
            gkl = cc.gaussian_kl_rows_t(tape, out["mu"][t], out["logvar"][t])
            klm_parts.append(tape.sum(tape.mul(gkl, tape.leaf(deg_rows))))
            bkl = cc.bernoulli_kl_from_logits_t(tape, out["gate_logits"][t])
            klc_parts.append(tape.sum(tape.mul(bkl, tape.leaf(smask_rows))))
        ce = tape.scale(_sum_scalars(tape, ce_parts), 1.0 / (B * T * recipients))
        klm = tape.scale(_sum_scalars(tape, klm_parts), 1.0 / (B * T * pairs))
        klc = tape.scale(_sum_scalars(tape, klc_parts), 1.0 / (B * T * pairs))
        comm_total = tape.add(ce, tape.add(tape.scale(klm, cfg.beta_m),
                                           tape.scale(klc, cfg.beta_c)))
        pieces.append(comm_total)
        terms = cc.CommLossTerms(ce.item(), klm.item(), klc.item(),
                                 cfg.beta_m, cfg.beta_c)
        diag["comm_total"] = comm_total.item()

    if not pieces:
        pieces = [tape.scale(tape.leaf(0.0), 1.0)]
    loss = pieces[0] if len(pieces) == 1 else _sum_scalars(tape, pieces)
    diag["unroll"] = out
    return loss, terms, diag


def td_loss(episodes: list[Episode], params: ParameterSet, target: ParameterSet,
            sizes: NetworkSizes, cfg: TrainConfig, net) -> float:
    loss, _, _ = compute_losses(Tape(), params, target, episodes, sizes, cfg,
                                net, want_comm=False)
    return loss.item()


def total_loss(episodes: list[Episode], params: ParameterSet,
               target: ParameterSet, sizes: NetworkSizes, cfg: TrainConfig,
               net) -> float:
    loss, _, _ = compute_losses(Tape(), params, target, episodes, sizes, cfg, net)
    return loss.item()


def sizes_for(net, cfg: TrainConfig) -> NetworkSizes:
    """Network dimensions implied by a road network and a train config."""
    n_phases = net.intersections[0].n_phases
    obs_dim = 3 * 8 + n_phases
    return NetworkSizes(
        obs_dim=obs_dim, n_actions=n_phases, n_agents=net.n_agents,
        state_dim=obs_dim * net.n_agents, hidden=cfg.hidden,
        msg_len=cfg.message_length, embed=cfg.embed,
        hyper_hidden=cfg.hyper_hidden, comm_enabled=cfg.comm_enabled)


@dataclass
class TrainerState:
    episodes_seen: int = 0
    env_steps: int = 0
    train_iterations: int = 0
    next_target_refresh: int = 0
    next_eval: int = 0
    last_eval_at: int = -1


def train_iteration(buffer: ReplayBuffer, params: ParameterSet,
                    target: ParameterSet, optimizer: RMSProp,
                    sizes: NetworkSizes, cfg: TrainConfig, net,
                    rng: np.random.Generator, state: TrainerState) -> dict:
    """One optimization step on a uniformly sampled batch of episodes."""
    episodes = buffer.sample(cfg.batch_episodes, rng)
    tape = Tape()
    loss, terms, diag = compute_losses(tape, params, target, episodes, sizes,
                                       cfg, net)
    params.zero_grads()
    params.accumulate(backward(tape, loss))
    grad_norm = clip_grad_norm(params, cfg.grad_clip)
    optimizer.step()
    state.train_iterations += 1
    refreshed = False
    if state.episodes_seen >= state.next_target_refresh:
        target.load_from(params)
        state.next_target_refresh += cfg.target_update_episodes
        refreshed = True
    return {
        "loss": loss.item(),
        "loss_td": diag.get("td", 0.0),
        "loss_ce": terms.ce_term,
        "kl_m": terms.kl_message,
        "kl_c": terms.kl_gate,
        "grad_norm": grad_norm,
        "target_refreshed": refreshed,
    }


class Trainer:
    """The full collect/train/evaluate loop for one run."""

    def __init__(self, scenario, cfg: TrainConfig, seed: int):
        self.scenario = scenario
        self.cfg = cfg
        self.seed = seed
        net = scenario.build_network()
        self.net = net
        self.sizes = sizes_for(net, cfg)
        ss = np.random.SeedSequence(seed)
        init_seed, rollout_seed, sample_seed, *env_seeds = ss.spawn(3 + cfg.n_envs)
        self._init_rng = np.random.default_rng(init_seed)
        self.rollout_rng = np.random.default_rng(rollout_seed)
        self.sample_rng = np.random.default_rng(sample_seed)
        self.envs = [scenario.make_env(seed=int(s.generate_state(1)[0]))
                     for s in env_seeds]
        self.params = build_params(self.sizes, self._init_rng)
        self.target = self.params.copy()
        self.optimizer = RMSProp(self.params, lr=cfg.learning_rate,
                                 smoothing=cfg.rmsprop_smoothing,
                                 eps=cfg.rmsprop_eps)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.state = TrainerState(next_target_refresh=cfg.target_update_episodes,
                                  next_eval=cfg.eval_every_episodes)

    def collect_cycle(self) -> list[Episode]:
        eps_val = epsilon(self.state.env_steps,
                          (self.cfg.epsilon_start, self.cfg.epsilon_end,
                           self.cfg.epsilon_anneal_steps))
        collected = []
        for env in self.envs:
            ep = rollout_episode(env, self.params, self.sizes, self.cfg,
                                 eps_val, self.rollout_rng)
            self.buffer.add(ep)
            self.state.episodes_seen += 1
            self.state.env_steps += ep.length
            collected.append(ep)
        return collected

    def maybe_train(self) -> dict | None:
        if len(self.buffer) < self.cfg.batch_episodes:
            return None
        return train_iteration(self.buffer, self.params, self.target,
                               self.optimizer, self.sizes, self.cfg, self.net,
                               self.sample_rng, self.state)

    def run(self, on_eval=None) -> None:
        """Collect and train until the episode budget is spent.

        `on_eval(trainer, diag)` fires every `eval_every_episodes`
        episodes with the mean diagnostics since the previous call.
        """
        window: list[dict] = []
        while self.state.episodes_seen < self.cfg.total_episodes:
            self.collect_cycle()
            diag = self.maybe_train()
            if diag:
                window.append(diag)
            if (on_eval is not None
                    and self.state.episodes_seen >= self.state.next_eval):
                mean_diag = _mean_diags(window)
                window = []
                self.state.last_eval_at = self.state.episodes_seen
                self.state.next_eval += self.cfg.eval_every_episodes
                on_eval(self, mean_diag)  # callbacks may snapshot the state
        if (on_eval is not None
                and self.state.episodes_seen != self.state.last_eval_at):
            self.state.last_eval_at = self.state.episodes_seen
            on_eval(self, _mean_diags(window))

    # -- full-state persistence (bit-exact resume) ------------------------

    def save_state(self, path) -> None:
        """Sidecar training state: target, optimizer, buffer, rng, counters."""
        import json

        arrays: dict[str, np.ndarray] = {}
        for name, t in self.target.tensors.items():
            arrays[f"target.{name}"] = t.data
        for name, v in self.optimizer.state_arrays().items():
            arrays[f"opt.{name}"] = v
        for i, ep in enumerate(self.buffer.episodes):
            for fname in ("obs", "states", "actions", "rewards", "dones",
                          "msg_noise", "gate_noise", "messages", "gates",
                          "q_values"):
                arrays[f"buf{i}.{fname}"] = getattr(ep, fname)
        meta = {
            "episodes_seen": self.state.episodes_seen,
            "env_steps": self.state.env_steps,
            "train_iterations": self.state.train_iterations,
            "next_target_refresh": self.state.next_target_refresh,
            "next_eval": self.state.next_eval,
            "last_eval_at": self.state.last_eval_at,
            "buffer_len": len(self.buffer),
            "buffer_insertions": self.buffer.insertions,
            "rollout_rng": self.rollout_rng.bit_generator.state,
            "sample_rng": self.sample_rng.bit_generator.state,
            "env_rngs": [env.rng.bit_generator.state for env in self.envs],
        }
        arrays["meta_json"] = np.frombuffer(
            json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    def load_state(self, path) -> None:
        import json

        with np.load(path) as data:
            meta = json.loads(bytes(data["meta_json"]).decode())
            for name in self.target.tensors:
                self.target.tensors[name].data[...] = data[f"target.{name}"]
            self.optimizer.load_state_arrays(
                {name: data[f"opt.{name}"]
                 for name in self.optimizer.state_arrays()})
            self.buffer.episodes = []
            for i in range(meta["buffer_len"]):
                self.buffer.episodes.append(Episode(
                    *[data[f"buf{i}.{f}"] for f in
                      ("obs", "states", "actions", "rewards", "dones",
                       "msg_noise", "gate_noise", "messages", "gates",
                       "q_values")]))
            self.buffer.insertions = meta["buffer_insertions"]
        self.state = TrainerState(
            episodes_seen=meta["episodes_seen"], env_steps=meta["env_steps"],
            train_iterations=meta["train_iterations"],
            next_target_refresh=meta["next_target_refresh"],
            next_eval=meta["next_eval"], last_eval_at=meta["last_eval_at"])
        self.rollout_rng.bit_generator.state = meta["rollout_rng"]
        self.sample_rng.bit_generator.state = meta["sample_rng"]
        for env, st in zip(self.envs, meta["env_rngs"]):
            env.rng.bit_generator.state = st


def _mean_diags(window: list[dict]) -> dict:
    if not window:
        return {"loss": 0.0, "loss_td": 0.0, "loss_ce": 0.0, "kl_m": 0.0,
                "kl_c": 0.0, "grad_norm": 0.0}
    keys = ("loss", "loss_td", "loss_ce", "kl_m", "kl_c", "grad_norm")
    return {k: float(np.mean([d[k] for d in window])) for k in keys}
