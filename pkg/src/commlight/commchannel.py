"""Message sampling, per-recipient gating, and the variational losses.

A sender draws one shared Gaussian message (reparameterized, so
gradients reach the mean and log-variance) and, independently per
recipient and per coordinate, a relaxed Bernoulli gate sampled with
logistic noise at temperature lambda. Training uses the relaxed gates;
execution thresholds them at 0.5. The communication objective is a
cross-entropy bound on the information messages carry about the
recipient's policy, plus KL penalties toward fixed reference
distributions (standard normal for messages, fair Bernoulli for gates).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ParameterSet, Tape, Tensor

__all__ = [
    "GUMBEL_TEMPERATURE", "MESSAGE_LENGTH",
    "MessagePacket", "CommLossTerms",
    "sample_message", "gumbel_sigmoid", "logistic_noise", "hard_gate", "gate",
    "assemble_inbox", "gaussian_kl", "bernoulli_kl",
    "sample_message_t", "gumbel_sigmoid_t", "gaussian_kl_rows_t",
    "bernoulli_kl_from_logits_t", "cross_entropy_rows_t",
    "communication_loss",
]

GUMBEL_TEMPERATURE = 0.67
MESSAGE_LENGTH = 5


@dataclass
class MessagePacket:
    """Everything one sender emits in one step."""
    sender: int
    mu: np.ndarray
    logvar: np.ndarray
    message: np.ndarray                  # sampled (or mean) message
    gates: dict[int, np.ndarray]         # recipient -> relaxed gates in (0,1)
    gated: dict[int, np.ndarray]         # recipient -> message * gates
    hard_bits: dict[int, np.ndarray]     # recipient -> gates > 0.5

    @classmethod
    def build(cls, sender: int, mu, logvar, message, gates: dict[int, np.ndarray]):
        gates = {j: np.asarray(c) for j, c in gates.items()}
        gated = {j: np.asarray(message) * c for j, c in gates.items()}
        bits = {j: (c > 0.5).astype(np.int64) for j, c in gates.items()}
        return cls(sender, np.asarray(mu), np.asarray(logvar),
                   np.asarray(message), gates, gated, bits)


@dataclass
class CommLossTerms:
    ce_term: float
    kl_message: float
    kl_gate: float
    beta_m: float
    beta_c: float

    @property
    def total(self) -> float:
        return self.ce_term + self.beta_m * self.kl_message + self.beta_c * self.kl_gate


# -- sampling ----------------------------------------------------------------

def sample_message(mu: np.ndarray, logvar: np.ndarray, rng: np.random.Generator,
                   mode: str = "stochastic") -> np.ndarray:
    """Draw a message: mu + exp(logvar/2) * eps, or just mu in mean mode."""
    mu = np.asarray(mu, dtype=np.float64)
    if mode == "mean":
        return mu.copy()
    if mode != "stochastic":
        raise ValueError(f"unknown mode '{mode}'")
    logvar = np.asarray(logvar, dtype=np.float64)
    eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps


def logistic_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Difference of two standard Gumbel draws: log U - log(1 - U)."""
    u = rng.random(shape)
    return np.log(u) - np.log1p(-u)


def gumbel_sigmoid(logit, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Relaxed Bernoulli sample: sigmoid((logit + noise) / lambda)."""
    if lam <= 0:
        raise ValueError("temperature must be positive")
    logit = np.asarray(logit, dtype=np.float64)
    z = (logit + logistic_noise(rng, logit.shape)) / lam
    return 1.0 / (1.0 + np.exp(-z))


def hard_gate(c) -> np.ndarray:
    """Execution-time discretization: send a coordinate iff its gate > 0.5."""
    return (np.asarray(c) > 0.5).astype(np.int64)


def gate(m, c) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if m.shape != c.shape:
        raise ValueError(f"message {m.shape} and gates {c.shape} differ")
    return m * c


def assemble_inbox(packets: dict[int, np.ndarray], max_neighbors: int = 4,
                   msg_len: int = MESSAGE_LENGTH) -> np.ndarray:
    """Concatenate gated messages in canonical slot order (N, E, S, W).

    `packets` maps slot index -> gated message; absent slots are zero.
    """
    inbox = np.zeros(max_neighbors * msg_len)
    seen = set()
    for slot, vec in packets.items():
        if slot in seen:
            raise ValueError(f"duplicate slot {slot}")
        if not 0 <= slot < max_neighbors:
            raise ValueError(f"slot {slot} out of range")
        seen.add(slot)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (msg_len,):
            raise ValueError(f"message in slot {slot} has shape {vec.shape}")
        inbox[slot * msg_len:(slot + 1) * msg_len] = vec
    return inbox


# -- closed-form divergences -----------------------------------------------------

def gaussian_kl(mu, logvar) -> float:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over coordinates."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar))


def bernoulli_kl(p, prior: float = 0.5) -> float:
    """KL(Bernoulli(p) || Bernoulli(prior)) with 0*log0 := 0, summed.

    Accepts scalars or arrays (bits x recipients); degenerate p of
    exactly 0 or 1 is legal here, unlike the logit-space training path.
    """
    if not 0.0 < prior < 1.0:
        raise ValueError("prior must lie strictly inside (0, 1)")
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("p must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0.0, p * (np.log(p) - np.log(prior)), 0.0)
        b = np.where(p < 1.0, (1.0 - p) * (np.log1p(-p) - np.log1p(-prior)), 0.0)
    return float(np.sum(a + b))


# -- tape-level counterparts (training path) ------------------------------------

def sample_message_t(tape: Tape, mu: Tensor, logvar: Tensor,
                     noise: np.ndarray) -> Tensor:
    """Reparameterized draw on the tape; `noise` is a fixed standard-normal."""
    std = tape.exp(tape.scale(logvar, 0.5))
    return tape.add(mu, tape.mul(std, tape.leaf(noise)))


def gumbel_sigmoid_t(tape: Tape, logits: Tensor, lam: float,
                     noise: np.ndarray) -> Tensor:
    if lam <= 0:
        raise ValueError("temperature must be positive")
    z = tape.scale(tape.add(logits, tape.leaf(noise)), 1.0 / lam)
    return tape.sigmoid(z)


def gaussian_kl_rows_t(tape: Tape, mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-row KL toward the standard normal: (R, L) -> (R,)."""
    inner = tape.add(tape.add(tape.exp(logvar), tape.mul(mu, mu)),
                     tape.add(tape.leaf(-1.0), tape.scale(logvar, -1.0)))
    return tape.scale(tape.sum(inner, axis=1), 0.5)


def bernoulli_kl_from_logits_t(tape: Tape, logits: Tensor) -> Tensor:
    """Elementwise KL(sigmoid(l) || 1/2) = log2 - softplus(l) + l*sigmoid(l).

    Stays finite for |l| < ~709, where the probability-space form
    already collapses to 0*log(0).
    """
    softplus = tape.log(tape.add(tape.leaf(1.0), tape.exp(logits)))
    lp = tape.mul(logits, tape.sigmoid(logits))
    return tape.add(tape.add(tape.leaf(float(np.log(2.0))),
                             tape.scale(softplus, -1.0)), lp)


def cross_entropy_rows_t(tape: Tape, policy: Tensor, post_logits: Tensor) -> Tensor:
    """Row-wise CE(pi || softmax(post_logits)): (R, A) x (R, A) -> (R,)."""
    log_q = tape.log(tape.softmax(post_logits))
    return tape.scale(tape.sum(tape.mul(policy, log_q), axis=1), -1.0)


def communication_loss(batch, params: ParameterSet, sizes, cfg, net) -> CommLossTerms:
    """Communication loss of a batch of episodes (summary numbers).

    Convenience wrapper over the training unroll; the optimizer uses
    the tape-level version inside `trainer.compute_losses`.
    """
    from .trainer import compute_losses  # local import: trainer builds on this module
    _, terms, _ = compute_losses(Tape(), params, None, batch, sizes, cfg, net,
                                 want_td=False)
    return terms
