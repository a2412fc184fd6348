"""The four parameterized functions: recurrent utility network, recurrent
message network, recurrent posterior network, and the monotonic mixer.

All agents of a role share one parameter registry. Rows are (episode,
agent) pairs, so a forward step is a handful of batched matrix products
regardless of agent count. The mixer's utility-facing weights pass
through an absolute value, which keeps dQ_total/dQ_i >= 0 and makes
per-agent greedy action selection consistent with the joint argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ParameterSet, Tape, Tensor, add_gru_params, gru_cell

__all__ = ["NetworkSizes", "build_params", "agent_q_forward", "comm_forward",
           "posterior_forward", "mixer_forward", "select_action", "zero_hidden"]


@dataclass(frozen=True)
class NetworkSizes:
    obs_dim: int
    n_actions: int
    n_agents: int
    state_dim: int
    hidden: int = 64
    msg_len: int = 5
    max_neighbors: int = 4
    embed: int = 32
    hyper_hidden: int = 64
    comm_enabled: bool = True

    @property
    def inbox_dim(self) -> int:
        return self.max_neighbors * self.msg_len

    @property
    def agent_in(self) -> int:
        return self.obs_dim + self.n_actions + self.inbox_dim

    @property
    def gate_dim(self) -> int:
        return self.max_neighbors * self.msg_len


def _add_affine(ps: ParameterSet, prefix: str, n_in: int, n_out: int,
                rng: np.random.Generator) -> None:
    ps.add(f"{prefix}.w", (n_in, n_out), rng, fan_in=n_in)
    ps.add(f"{prefix}.b", (n_out,), rng, fan_in=n_in)


def build_params(sizes: NetworkSizes, rng: np.random.Generator) -> ParameterSet:
    """Fresh parameters, uniform +-1/sqrt(fan_in), in a fixed name order."""
    ps = ParameterSet()
    h = sizes.hidden
    _add_affine(ps, "agent.enc", sizes.agent_in, h, rng)
    add_gru_params(ps, "agent.gru", h, h, rng)
    _add_affine(ps, "agent.head", h, sizes.n_actions, rng)
    if sizes.comm_enabled:
        _add_affine(ps, "comm.enc", sizes.agent_in, h, rng)
        add_gru_params(ps, "comm.gru", h, h, rng)
        _add_affine(ps, "comm.mu", h, sizes.msg_len, rng)
        _add_affine(ps, "comm.logvar", h, sizes.msg_len, rng)
        _add_affine(ps, "comm.gate", h, sizes.gate_dim, rng)
        _add_affine(ps, "post.enc", sizes.agent_in, h, rng)
        add_gru_params(ps, "post.gru", h, h, rng)
        _add_affine(ps, "post.head", h, sizes.n_actions, rng)
    s = sizes.state_dim
    _add_affine(ps, "mixer.w1.0", s, sizes.hyper_hidden, rng)
    _add_affine(ps, "mixer.w1.1", sizes.hyper_hidden, sizes.n_agents * sizes.embed, rng)
    _add_affine(ps, "mixer.b1", s, sizes.embed, rng)
    _add_affine(ps, "mixer.w2.0", s, sizes.hyper_hidden, rng)
    _add_affine(ps, "mixer.w2.1", sizes.hyper_hidden, sizes.embed, rng)
    _add_affine(ps, "mixer.v.0", s, sizes.embed, rng)
    _add_affine(ps, "mixer.v.1", sizes.embed, 1, rng)
    return ps


def zero_hidden(n_rows: int, sizes: NetworkSizes) -> Tensor:
    return Tensor(np.zeros((n_rows, sizes.hidden)))


def _recurrent_core(tape: Tape, p: ParameterSet, role: str, obs: Tensor,
                    prev_action: Tensor, inbox: Tensor, h: Tensor) -> Tensor:
    x = tape.concat([obs, prev_action, inbox], axis=-1)
    enc = tape.tanh(tape.affine(x, p[f"{role}.enc.w"], p[f"{role}.enc.b"]))
    return gru_cell(tape, enc, h, p, f"{role}.gru")


def agent_q_forward(tape: Tape, p: ParameterSet, obs: Tensor, prev_action: Tensor,
                    inbox: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
    """One recurrent step of the utility network: Q per phase, next hidden."""
    h2 = _recurrent_core(tape, p, "agent", obs, prev_action, inbox, h)
    q = tape.affine(h2, p["agent.head.w"], p["agent.head.b"])
    return q, h2


def comm_forward(tape: Tape, p: ParameterSet, obs: Tensor, prev_action: Tensor,
                 inbox: Tensor, hc: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Message head: one shared Gaussian per sender plus per-recipient,
    per-coordinate gate logits (slot-ordered N, E, S, W)."""
    hc2 = _recurrent_core(tape, p, "comm", obs, prev_action, inbox, hc)
    mu = tape.affine(hc2, p["comm.mu.w"], p["comm.mu.b"])
    logvar = tape.affine(hc2, p["comm.logvar.w"], p["comm.logvar.b"])
    gate_logits = tape.affine(hc2, p["comm.gate.w"], p["comm.gate.b"])
    return mu, logvar, gate_logits, hc2


def posterior_forward(tape: Tape, p: ParameterSet, obs: Tensor, prev_action: Tensor,
                      inbox: Tensor, hr: Tensor) -> tuple[Tensor, Tensor]:
    """Variational estimate of the recipient's action distribution."""
    hr2 = _recurrent_core(tape, p, "post", obs, prev_action, inbox, hr)
    logits = tape.affine(hr2, p["post.head.w"], p["post.head.b"])
    return tape.softmax(logits), hr2


def posterior_logits(tape: Tape, p: ParameterSet, obs: Tensor, prev_action: Tensor,
                     inbox: Tensor, hr: Tensor) -> tuple[Tensor, Tensor]:
    hr2 = _recurrent_core(tape, p, "post", obs, prev_action, inbox, hr)
    return tape.affine(hr2, p["post.head.w"], p["post.head.b"]), hr2


def mixer_forward(tape: Tape, p: ParameterSet, agent_qs: Tensor, state: Tensor,
                  sizes: NetworkSizes) -> Tensor:
    """Monotonic two-layer mixing of per-agent utilities, (B, n) -> (B,).

    Hypernetworks conditioned on the global state emit layer weights;
    the absolute value keeps every utility-facing weight nonnegative.
    """
    B = agent_qs.shape[0]
    n, e = sizes.n_agents, sizes.embed
    if agent_qs.shape != (B, n):
        raise ValueError(f"agent_qs must be (B, {n}), got {agent_qs.shape}")
    w1_flat = tape.abs(tape.affine(
        tape.tanh(tape.affine(state, p["mixer.w1.0.w"], p["mixer.w1.0.b"])),
        p["mixer.w1.1.w"], p["mixer.w1.1.b"]))
    w1 = tape.reshape(w1_flat, (B, n, e))
    b1 = tape.affine(state, p["mixer.b1.w"], p["mixer.b1.b"])
    qs3 = tape.reshape(agent_qs, (B, n, 1))
    hidden = tape.tanh(tape.add(tape.sum(tape.mul(qs3, w1), axis=1), b1))
    w2 = tape.abs(tape.affine(
        tape.tanh(tape.affine(state, p["mixer.w2.0.w"], p["mixer.w2.0.b"])),
        p["mixer.w2.1.w"], p["mixer.w2.1.b"]))
    v = tape.affine(tape.tanh(tape.affine(state, p["mixer.v.0.w"], p["mixer.v.0.b"])),
                    p["mixer.v.1.w"], p["mixer.v.1.b"])
    out = tape.add(tape.sum(tape.mul(hidden, w2), axis=1),
                   tape.reshape(v, (B,)))
    return out


def select_action(q_values: np.ndarray, epsilon: float, rng: np.random.Generator,
                  mask: list[int] | np.ndarray | None = None) -> int:
    """Epsilon-greedy over the allowed phases; greedy ties take the lowest id."""
    q_values = np.asarray(q_values)
    if mask is None:
        allowed = np.arange(q_values.shape[-1])
    else:
        allowed = np.asarray(mask, dtype=np.int64)
    if allowed.size == 0:
        raise ValueError("empty action mask")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(allowed[rng.integers(0, allowed.size)])
    vals = q_values[allowed]
    return int(allowed[int(np.argmax(vals))])
