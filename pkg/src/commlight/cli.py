"""Command-line entry points: train, evaluate, baseline, export-messages,
gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime or validation failure.
All runs are reproducible from their archived config and seed; nothing
is read from environment variables.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .config import (
    ConfigError, RunConfig, load_run_config, run_config_from_dict,
    save_run_config, scenario_from_config_dict,
)
from .controllers import make_controller
from .diffcore import DiffcoreError
from .evalkit import CommMode, evaluate, export_messages, write_metrics_csv
from .qnets import build_params
from .scenario import ScenarioError, resolve_scenario
from .trainer import TrainConfig, Trainer, sizes_for

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="commlight",
                description="gated-communication multi-agent signal control")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy from a run config")
    t.add_argument("--config", required=True, help="run-config YAML path")
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--out", default=None, help="override output directory")
    t.add_argument("--episodes", type=int, default=None,
                   help="override total training episodes")
    t.add_argument("--message-timing", choices=("delayed", "samestep"),
                   default=None)
    t.add_argument("--double-q", action="store_true", default=None)
    t.add_argument("--resume", action="store_true",
                   help="continue from the latest checkpoint in the out dir")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", default="learned",
                   help="comma list of learned|full|none|random[:p]")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="metrics CSV path")

    b = sub.add_parser("baseline", help="run a classical controller")
    b.add_argument("--controller", required=True,
                   choices=("fixed", "maxpressure", "sotl", "random"))
    b.add_argument("--scenario", required=True,
                   help="preset name or scenario YAML path")
    b.add_argument("--episodes", type=int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="metrics CSV path")

    x = sub.add_parser("export-messages",
                       help="dump per-step messages with observation features")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--episodes", type=int, default=100)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True, help="CSV path")

    g = sub.add_parser("gradcheck", help="run the finite-difference suite")
    g.add_argument("--with-negative-control", action="store_true")
    return p


# -- train ------------------------------------------------------------------


def _checkpoint_path(out_dir: Path, episode: int) -> Path:
    return out_dir / f"checkpoint_ep{episode:07d}.ckpt"


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    if args.seed is not None:
        run_cfg.seed = args.seed
    if args.out is not None:
        run_cfg.out_dir = args.out
    if args.episodes is not None:
        run_cfg.train.total_episodes = args.episodes
    if args.message_timing is not None:
        run_cfg.train.message_timing = args.message_timing
    if args.double_q:
        run_cfg.train.double_q = True

    scenario = run_cfg.resolve_scenario()
    out_dir = Path(run_cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(run_cfg, out_dir / "config.yaml", scenario)
    resolved = run_cfg.to_dict(scenario)

    trainer = Trainer(scenario, run_cfg.train, run_cfg.seed)
    log_path = out_dir / "training_log.jsonl"

    if args.resume:
        ckpts = sorted(out_dir.glob("checkpoint_ep*.ckpt"))
        if not ckpts:
            raise CheckpointError(f"nothing to resume in {out_dir}")
        load_checkpoint(ckpts[-1], trainer.params)
        trainer.load_state(out_dir / "resume.npz")
    else:
        log_path.write_text("")

    def on_eval(tr: Trainer, diag: dict) -> None:
        def factory(k):
            return scenario.make_env(seed=k)

        metrics = evaluate(tr.params, factory, episodes=tr.cfg.eval_episodes,
                           mode=CommMode("learned"), seed=run_cfg.seed,
                           sizes=tr.sizes, cfg=tr.cfg)
        record = {
            "episode": tr.state.episodes_seen,
            "env_steps": tr.state.env_steps,
            "loss_td": diag["loss_td"],
            "loss_ce": diag["loss_ce"],
            "kl_m": diag["kl_m"],
            "kl_c": diag["kl_c"],
            "eval": {
                "mean_queue": metrics.mean_queue_length,
                "wait_s_per_veh": metrics.mean_wait_time,
                "speed_mps": metrics.mean_speed,
                "pct_comm": metrics.pct_communication,
            },
        }
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        save_checkpoint(_checkpoint_path(out_dir, tr.state.episodes_seen),
                        tr.params, config=resolved,
                        episode=tr.state.episodes_seen,
                        env_steps=tr.state.env_steps)
        tr.save_state(out_dir / "resume.npz")

    trainer.run(on_eval=on_eval)
    print(f"trained {trainer.state.episodes_seen} episodes; "
          f"artifacts in {out_dir}")
    return 0


# -- evaluate ------------------------------------------------------------------


def _load_for_eval(checkpoint: str):
    manifest = read_manifest(checkpoint)
    raw = manifest["config"]
    run_cfg = run_config_from_dict(raw, source=checkpoint)
    scenario = scenario_from_config_dict(raw)
    net = scenario.build_network()
    sizes = sizes_for(net, run_cfg.train)
    params = build_params(sizes, np.random.default_rng(0))
    load_checkpoint(checkpoint, params)
    return scenario, run_cfg, sizes, params


def cmd_evaluate(args) -> int:
    scenario, run_cfg, sizes, params = _load_for_eval(args.checkpoint)

    def factory(k):
        return scenario.make_env(seed=k)

    rows = []
    for mode_text in args.mode.split(","):
        mode = CommMode.parse(mode_text.strip())
        metrics = evaluate(params, factory, episodes=args.episodes, mode=mode,
                           seed=args.seed, sizes=sizes, cfg=run_cfg.train)
        rows.append((mode, args.seed, args.episodes, metrics))
    write_metrics_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# -- baseline ------------------------------------------------------------------


def cmd_baseline(args) -> int:
    scenario = resolve_scenario(args.scenario)
    queue_vals, wait_vals, speed_vals = [], [], []
    for k in range(args.episodes):
        env = scenario.make_env(seed=k)
        env.reset()
        controller = make_controller(args.controller, env,
                                     seed=args.seed * 1000 + k)
        done = False
        while not done:
            done = env.advance(controller.act()).done
        m = env.metrics()
        queue_vals.append(m["mean_queue_length"])
        wait_vals.append(m["mean_wait_s_per_veh"])
        speed_vals.append(m["mean_speed_mps"])

    from .evalkit import EvalMetrics
    metrics = EvalMetrics(float(np.mean(queue_vals)), float(np.mean(wait_vals)),
                          float(np.mean(speed_vals)), 0.0, args.episodes, -1)
    write_metrics_csv(args.out, [(args.controller, args.seed, args.episodes,
                                  metrics)])
    print(f"wrote 1 row to {args.out}")
    return 0


# -- export-messages ---------------------------------------------------------------


def cmd_export_messages(args) -> int:
    scenario, run_cfg, sizes, params = _load_for_eval(args.checkpoint)

    def factory(k):
        return scenario.make_env(seed=k)

    n = export_messages(params, factory, args.episodes, args.out, sizes=sizes,
                        cfg=run_cfg.train, seed=args.seed)
    print(f"wrote {n} rows to {args.out}")
    return 0


# -- gradcheck ------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(include_negative_control=args.with_negative_control)
    failures = 0
    for r in results:
        print(r.line())
        if not r.passed:
            failures += 1
    if args.with_negative_control:
        # the corrupted fixture is supposed to fail; anything else must pass
        real = [r for r in results if not r.name.startswith("negative-control")]
        control = [r for r in results if r.name.startswith("negative-control")]
        ok = all(r.passed for r in real) and all(not r.passed for r in control)
        print("negative control detected" if ok else "negative control MISSED")
        return 0 if ok else 2
    return 0 if failures == 0 else 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "baseline":
            return cmd_baseline(args)
        if args.command == "export-messages":
            return cmd_export_messages(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        raise _UsageError(f"unknown command {args.command}")
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ScenarioError, CheckpointError, DiffcoreError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
