"""The standing gradient-check suite: every primitive, the recurrent
cell, and the composite training losses, all against central finite
differences on a toy two-agent episode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    PRIMITIVE_IDS, ParameterSet, Tape, Tensor, add_gru_params, backward,
    finite_difference_check, finite_difference_check_params, gru_cell,
)
from .flows import FlowInterval, FlowSchedule
from .network import build_grid
from .qnets import NetworkSizes, build_params
from .simulator import SimState
from .trainer import TrainConfig, compute_losses, rollout_episode

__all__ = ["CheckResult", "run_all", "toy_episode"]

DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return (f"{verdict:4s} {self.name:<28s} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e}")


def _primitive_case(op_id: str):
    rng = np.random.default_rng(abs(hash(op_id)) % 2**32)
    if op_id in ("add", "mul", "sqerr"):
        other = rng.normal(size=(3, 4))
        return (lambda x, t: t.sum(getattr(t, op_id)(x, t.leaf(other))),
                rng.normal(size=(3, 4)))
    if op_id == "matmul":
        other = rng.normal(size=(4, 2))
        return (lambda x, t: t.sum(t.matmul(x, t.leaf(other))),
                rng.normal(size=(3, 4)))
    if op_id == "affine":
        w, b = rng.normal(size=(4, 3)), rng.normal(size=3)
        return (lambda x, t: t.sum(t.affine(x, t.leaf(w), t.leaf(b))),
                rng.normal(size=(5, 4)))
    if op_id == "concat":
        other = rng.normal(size=(3, 2))
        return (lambda x, t: t.sum(t.tanh(t.concat([x, t.leaf(other)], axis=1))),
                rng.normal(size=(3, 4)))
    if op_id == "slice":
        return (lambda x, t: t.sum(t.exp(t.slice(x, 1, 1, 3))),
                rng.normal(size=(3, 4)))
    if op_id == "reshape":
        return (lambda x, t: t.sum(t.sigmoid(t.reshape(x, (2, 6)))),
                rng.normal(size=(3, 4)))
    if op_id == "gather_rows":
        idx = np.array([2, 0, -1, 1, 2])
        return (lambda x, t: t.sum(t.tanh(t.gather_rows(x, idx))),
                rng.normal(size=(3, 4)))
    if op_id == "log":
        return (lambda x, t: t.sum(t.log(x)), rng.uniform(0.5, 2.0, size=(3, 4)))
    if op_id in ("sum", "mean"):
        return (lambda x, t: getattr(t, op_id)(t.mul(x, x)),
                rng.normal(size=(3, 4)))
    if op_id == "softmax":
        sel = rng.normal(size=(3, 4))
        return (lambda x, t: t.sum(t.mul(t.softmax(x), t.leaf(sel))),
                rng.normal(size=(3, 4)))
    point = rng.normal(size=(3, 4))
    if op_id == "abs":
        point = point + np.sign(point) * 0.2
    return (lambda x, t: t.sum(getattr(t, op_id)(x)), point)


def toy_episode(seed: int = 0):
    """A two-agent, three-step episode with small networks, for FD checks."""
    net = build_grid(1, 2, 200.0)
    intervals = [FlowInterval(0, 15, "west_in_0", "east_out_0", 900.0),
                 FlowInterval(0, 15, "north_in_0", "south_out_0", 900.0)]
    env = SimState(net, FlowSchedule("custom", 0, intervals), horizon_s=15,
                   seed=seed)
    sizes = NetworkSizes(obs_dim=28, n_actions=4, n_agents=2, state_dim=56,
                         hidden=4, embed=3, hyper_hidden=4)
    cfg = TrainConfig(hidden=4, embed=3, hyper_hidden=4)
    params = build_params(sizes, np.random.default_rng(seed + 1))
    ep = rollout_episode(env, params, sizes, cfg, 0.5,
                         np.random.default_rng(seed + 2))
    return net, sizes, cfg, params, ep


def run_all(include_negative_control: bool = False) -> list[CheckResult]:
    results: list[CheckResult] = []
    for op_id in PRIMITIVE_IDS:
        f, point = _primitive_case(op_id)
        err = finite_difference_check(f, Tensor(point), step=1e-5)
        results.append(CheckResult(f"primitive/{op_id}", err, 1e-5))

    # recurrent cell unrolled five steps
    rng = np.random.default_rng(21)
    ps = ParameterSet()
    add_gru_params(ps, "g", 3, 4, rng)
    xs = rng.normal(size=(5, 3))

    def gru_loss(p, tape):
        h = tape.leaf(np.zeros(4))
        for k in range(5):
            h = gru_cell(tape, tape.leaf(xs[k]), h, p, "g")
        return tape.sum(tape.mul(h, h))

    results.append(CheckResult(
        "composite/gru_unroll", finite_difference_check_params(gru_loss, ps),
        DEFAULT_TOL))

    net, sizes, cfg, params, ep = toy_episode()
    target = params.copy()
    # TD targets are constants in the online parameters: compute them
    # once so the thousands of FD evaluations skip the target unroll
    y = compute_losses(Tape(record=False), params, target, [ep], sizes, cfg,
                       net, want_comm=False)[2]["targets"]

    def comm_loss(p, tape):
        return compute_losses(tape, p, None, [ep], sizes, cfg, net,
                              want_td=False)[0]

    def td_only(p, tape):
        return compute_losses(tape, p, target, [ep], sizes, cfg, net,
                              want_comm=False, precomputed_targets=y)[0]

    def full_loss(p, tape):
        return compute_losses(tape, p, target, [ep], sizes, cfg, net,
                              precomputed_targets=y)[0]

    # the message objective touches the message, posterior, and utility
    # parameters; TD touches everything but the posterior
    comm_coords = params.flat_coords(("comm.", "post.", "agent."))
    td_coords = params.flat_coords(("agent.", "comm.", "mixer."))
    results.append(CheckResult(
        "composite/communication_loss",
        finite_difference_check_params(comm_loss, params, coords=comm_coords),
        DEFAULT_TOL))
    results.append(CheckResult(
        "composite/td_loss",
        finite_difference_check_params(td_only, params, coords=td_coords),
        DEFAULT_TOL))
    results.append(CheckResult(
        "composite/total_loss",
        finite_difference_check_params(full_loss, params), DEFAULT_TOL))

    if include_negative_control:
        # deliberately wrong analytic gradient: tanh reported for sigmoid
        x = Tensor(np.array([0.3, -0.8, 1.2]))
        tape = Tape()
        xt = Tensor(x.data.copy())
        out = tape.sum(tape.tanh(xt))
        wrong = backward(tape, out)[id(xt)]
        flat = x.data
        fd = np.zeros(3)
        for i in range(3):
            up, dn = flat.copy(), flat.copy()
            up[i] += 1e-5
            dn[i] -= 1e-5
            t2 = Tape(record=False)
            fd[i] = (t2.sum(t2.sigmoid(t2.leaf(up))).item()
                     - t2.sum(t2.sigmoid(t2.leaf(dn))).item()) / 2e-5
        err = float(np.max(np.abs(wrong - fd) / np.maximum(1, np.abs(wrong))))
        results.append(CheckResult("negative-control/corrupted", err, DEFAULT_TOL))

    return results
