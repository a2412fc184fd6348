"""Checkpoint format, run configs, CLI flows, and resume determinism."""

import json
import struct

import numpy as np
import pytest
import yaml

from commlight import cli
from commlight.checkpoint import (
    CheckpointError, load_checkpoint, read_manifest, save_checkpoint,
)
from commlight.config import ConfigError, load_run_config
from commlight.diffcore import ParameterSet, ShapeMismatch
from commlight.scenario import (
    ScenarioError, load_scenario, preset_scenario, save_scenario,
)


def small_cfg(tmp_path, out_name="run", **train):
    base = {"total_episodes": 6, "batch_episodes": 2, "n_envs": 1,
            "comm_enabled": False, "hidden": 8, "embed": 3, "hyper_hidden": 4,
            "eval_every_episodes": 3, "eval_episodes": 1,
            "epsilon_anneal_steps": 400}
    base.update(train)
    cfg = {"format_version": 1, "scenario": "conflict-1x1", "seed": 11,
           "out_dir": str(tmp_path / out_name), "train": base}
    path = tmp_path / f"{out_name}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, tmp_path / out_name


class TestCheckpoint:
    def _params(self):
        rng = np.random.default_rng(0)
        ps = ParameterSet()
        ps.add("a.w", (3, 4), rng)
        ps.add("b", (7,), rng)
        return ps

    def test_roundtrip(self, tmp_path):
        ps = self._params()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, ps, config={"k": 1}, episode=42, env_steps=99)
        fresh = self._params()
        manifest = load_checkpoint(path, fresh)
        np.testing.assert_array_equal(fresh.flat(), ps.flat())
        assert manifest["episode"] == 42
        assert manifest["format_version"] == 1

    def test_shape_mismatch_refused(self, tmp_path):
        ps = self._params()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, ps, config={})
        rng = np.random.default_rng(1)
        other = ParameterSet()
        other.add("a.w", (4, 3), rng)
        other.add("b", (7,), rng)
        with pytest.raises(ShapeMismatch):
            load_checkpoint(path, other)

    def test_name_mismatch_refused(self, tmp_path):
        ps = self._params()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, ps, config={})
        rng = np.random.default_rng(1)
        other = ParameterSet()
        other.add("a.w", (3, 4), rng)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, other)

    def test_version_mismatch_refused(self, tmp_path):
        ps = self._params()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, ps, config={})
        raw = path.read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        manifest = json.loads(raw[8:8 + n])
        manifest["format_version"] = 99
        blob = json.dumps(manifest).encode()
        path.write_bytes(struct.pack("<Q", len(blob)) + blob + raw[8 + n:])
        with pytest.raises(CheckpointError):
            read_manifest(path)

    def test_payload_is_little_endian_float64(self, tmp_path):
        ps = self._params()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, ps, config={})
        raw = path.read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        manifest = json.loads(raw[8:8 + n])
        row = next(r for r in manifest["tensors"] if r["name"] == "b")
        vals = np.frombuffer(raw[8 + n:], dtype="<f8", count=7,
                             offset=row["offset"])
        np.testing.assert_array_equal(vals, ps["b"].data)


class TestScenarioFiles:
    def test_roundtrip(self, tmp_path):
        s = preset_scenario("corridor-1x2")
        path = tmp_path / "s.yaml"
        save_scenario(s, path)
        back = load_scenario(path)
        assert back.rows == s.rows and back.cols == s.cols
        assert back.custom_intervals == s.custom_intervals

    def test_missing_file_names_path(self):
        with pytest.raises(ScenarioError, match="no/such/scenario.yaml"):
            load_scenario("no/such/scenario.yaml")

    def test_bad_version(self, tmp_path):
        path = tmp_path / "s.yaml"
        path.write_text("format_version: 3\n")
        with pytest.raises(ScenarioError):
            load_scenario(path)


class TestRunConfig:
    def test_unknown_train_key_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({
            "format_version": 1, "scenario": "conflict-1x1",
            "train": {"learning_rte": 1e-3}}))
        with pytest.raises(ConfigError, match="learning_rte"):
            load_run_config(path)

    def test_missing_scenario_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"format_version": 1}))
        with pytest.raises(ConfigError):
            load_run_config(path)


class TestCLI:
    def test_train_writes_checkpoints_and_archives_config(self, tmp_path):
        cfg_path, out = small_cfg(tmp_path)
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        ckpts = sorted(out.glob("checkpoint_ep*.ckpt"))
        assert len(ckpts) >= 1
        assert (out / "config.yaml").exists()
        assert (out / "training_log.jsonl").exists()

    def test_train_missing_config_exits_2_naming_path(self, tmp_path, capsys):
        rc = cli.main(["train", "--config", str(tmp_path / "absent.yaml")])
        assert rc == 2
        assert "absent.yaml" in capsys.readouterr().err

    def test_train_missing_scenario_file_exits_2(self, tmp_path, capsys):
        cfg = {"format_version": 1, "scenario": str(tmp_path / "ghost.yaml"),
               "out_dir": str(tmp_path / "o")}
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(cfg))
        rc = cli.main(["train", "--config", str(path)])
        assert rc == 2
        assert "ghost.yaml" in capsys.readouterr().err

    def test_usage_error_exits_1(self, capsys):
        assert cli.main(["evaluate", "--checkpoint", "x"]) == 1
        assert cli.main(["frobnicate"]) == 1

    def test_evaluate_four_modes_four_rows_and_deterministic(self, tmp_path):
        cfg_path, out = small_cfg(tmp_path)
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        ckpt = sorted(out.glob("checkpoint_ep*.ckpt"))[-1]
        csv1 = tmp_path / "m1.csv"
        csv2 = tmp_path / "m2.csv"
        argv = ["evaluate", "--checkpoint", str(ckpt),
                "--mode", "learned,full,none,random:0.5",
                "--episodes", "2", "--seed", "3"]
        assert cli.main(argv + ["--out", str(csv1)]) == 0
        assert cli.main(argv + ["--out", str(csv2)]) == 0
        body = csv1.read_text()
        assert body == csv2.read_text()
        assert len(body.strip().split("\n")) == 5  # header + 4 rows
        assert "random:0.5" in body

    def test_baseline_empty_scenario_zero_queues(self, tmp_path):
        scen = preset_scenario("conflict-1x1")
        scen.custom_intervals = []
        spath = tmp_path / "empty.yaml"
        save_scenario(scen, spath)
        out = tmp_path / "base.csv"
        rc = cli.main(["baseline", "--controller", "fixed", "--scenario",
                       str(spath), "--episodes", "1", "--seed", "0",
                       "--out", str(out)])
        assert rc == 0
        row = out.read_text().strip().split("\n")[1].split(",")
        assert float(row[3]) == 0.0          # mean queue
        assert float(row[4]) == 0.0          # wait
        assert float(row[5]) == pytest.approx(13.89)  # free-flow speed

    def test_baseline_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            rc = cli.main(["baseline", "--controller", "sotl", "--scenario",
                           "conflict-1x1", "--episodes", "2", "--seed", "7",
                           "--out", str(out)])
            assert rc == 0
        assert a.read_text() == b.read_text()

    def test_export_messages_cli(self, tmp_path):
        cfg_path, out = small_cfg(tmp_path, out_name="comm_run",
                                  comm_enabled=True)
        # comm needs >= 2 agents
        raw = yaml.safe_load(cfg_path.read_text())
        raw["scenario"] = "corridor-1x2"
        cfg_path.write_text(yaml.safe_dump(raw))
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        ckpt = sorted(out.glob("checkpoint_ep*.ckpt"))[-1]
        msgs = tmp_path / "msgs.csv"
        assert cli.main(["export-messages", "--checkpoint", str(ckpt),
                         "--episodes", "1", "--out", str(msgs)]) == 0
        lines = msgs.read_text().strip().split("\n")
        assert len(lines) == 1 + 90 * 2  # header + steps x agents

    def test_resume_reproduces_next_eval_bit_exactly(self, tmp_path):
        # one continuous run of 6 episodes...
        cfg_path, out_full = small_cfg(tmp_path, out_name="full")
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        full_log = (out_full / "training_log.jsonl").read_text().strip().split("\n")

        # ...versus 3 episodes, stop, resume to 6
        cfg_path2, out_half = small_cfg(tmp_path, out_name="half")
        assert cli.main(["train", "--config", str(cfg_path2),
                         "--episodes", "3"]) == 0
        assert cli.main(["train", "--config", str(cfg_path2),
                         "--episodes", "6", "--resume"]) == 0
        half_log = (out_half / "training_log.jsonl").read_text().strip().split("\n")
        assert half_log == full_log

    def test_gradcheck_exit_codes(self, monkeypatch, capsys):
        from commlight.gradcheck import CheckResult

        monkeypatch.setattr("commlight.gradcheck.run_all",
                            lambda include_negative_control=False:
                            [CheckResult("primitive/fake", 1e-9, 1e-5)])
        assert cli.main(["gradcheck"]) == 0
        monkeypatch.setattr("commlight.gradcheck.run_all",
                            lambda include_negative_control=False:
                            [CheckResult("primitive/fake", 1.0, 1e-5)])
        assert cli.main(["gradcheck"]) == 2
        assert "FAIL" in capsys.readouterr().out
