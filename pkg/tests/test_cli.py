import json

import numpy as np
import pytest

from smola import cli
from smola import serialization as ser
from smola.core import SmolaBlock
from smola.diagnostics import THRESHOLDS
from smola.numkit import load_matrix


SMALL = {
    "model": {"num_experts": 2, "rank": 1},
    "mixture": {"d_in": 12, "d_out": 6},
    "train": {"steps": 6, "eval_every": 3, "val_examples": 4,
              "arms": ["omni-smola", "plain-lora", "gated-moe", "lora-mixture"]},
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, command, cfg, out="out"):
    return cli.main([command, "--config", write_cfg(tmp_path, cfg),
                     "--output-dir", str(tmp_path / out)])


class TestTrain:
    def test_outputs_and_table(self, tmp_path, capsys):
        assert run(tmp_path, "train", SMALL) == 0
        out = tmp_path / "out"
        rows = json.loads((out / "comparison.json").read_text())
        assert [r["arm"] for r in rows] == SMALL["train"]["arms"]
        log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
        assert {tuple(sorted(r)) for r in log} == {("arm", "avg", "per_task_loss", "step")}
        assert [r["step"] for r in log if r["arm"] == "plain-lora"] == [0, 3, 6]
        assert (out / "checkpoints" / "omni-smola" / "best.json").exists()
        assert (out / "checkpoints" / "plain-lora" / "final.json").exists()
        assert "final avg loss" in capsys.readouterr().out

    def test_byte_reproducible(self, tmp_path):
        run(tmp_path, "train", SMALL, out="a")
        run(tmp_path, "train", SMALL, out="b")
        for name in ("train_log.jsonl", "comparison.json", "checkpoints/omni-smola/final_block_mm.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_zero_steps(self, tmp_path):
        cfg = json.loads(json.dumps(SMALL))
        cfg["train"].update(steps=0, arms=["omni-smola"])
        assert run(tmp_path, "train", cfg) == 0
        log = (tmp_path / "out" / "train_log.jsonl").read_text().splitlines()
        assert len(log) == 1 and json.loads(log[0])["step"] == 0
        best = ser.load_model(tmp_path / "out" / "checkpoints" / "omni-smola" / "best.json")
        for blk in best.blocks.values():
            assert not np.any(blk.w_out)

    def test_divergence_exit_code(self, tmp_path):
        cfg = json.loads(json.dumps(SMALL))
        cfg["train"].update(arms=["plain-lora"], lr={"plain-lora": 1e6}, steps=100)
        assert run(tmp_path, "train", cfg) == 1

    @pytest.mark.parametrize("override", [
        {"model": {"rank": 9}},
        {"train": {"arms": ["dense"]}},
        {"unknown": 1},
        {"mixture": {"num_tasks": 50}},
    ])
    def test_config_errors(self, tmp_path, override):
        cfg = json.loads(json.dumps(SMALL))
        for k, v in override.items():
            cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
        assert run(tmp_path, "train", cfg) == 2

    def test_unreadable_config(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == 2


class TestGradcheck:
    def test_passes_and_writes_report(self, tmp_path):
        assert run(tmp_path, "gradcheck", {"gradcheck": {"cases": 3}}) == 0
        report = json.loads((tmp_path / "out" / "gradcheck.json").read_text())
        assert report["passed"] and report["max_error"] <= 1e-6

    def test_single_expert(self, tmp_path):
        assert run(tmp_path, "gradcheck", {"gradcheck": {"cases": 2, "num_experts": 1}}) == 0

    def test_rank_too_large(self, tmp_path):
        cfg = {"gradcheck": {"cases": 1, "rank": 5, "d_in": 3}}
        assert run(tmp_path, "gradcheck", cfg) == 2


class TestBench:
    def test_small_sweep(self, tmp_path):
        cfg = {"bench": {"widths": [16, 32], "experts": [1, 2, 4], "experts_width": 16,
                         "width_experts": 2, "rank": 2, "n_tokens": 8, "repeats": 3, "warmup": 0,
                         "min_time": 0.01}}
        assert run(tmp_path, "bench", cfg) == 0
        report = json.loads((tmp_path / "out" / "bench.json").read_text())
        assert len(report["width_sweep"]) == 2 and len(report["expert_sweep"]) == 3
        assert set(report["expert_fit"]) == {"slope", "intercept", "r2"}

    def test_empty_grid(self, tmp_path):
        assert run(tmp_path, "bench", {"bench": {"widths": []}}) == 2

    def test_nonpositive_min_time(self, tmp_path):
        assert run(tmp_path, "bench", {"bench": {"min_time": 0}}) == 2


class TestInspect:
    def trained(self, tmp_path, steps=0):
        cfg = json.loads(json.dumps(SMALL))
        cfg["train"].update(steps=steps, arms=["omni-smola", "plain-lora"])
        run(tmp_path, "train", cfg)
        return tmp_path / "out" / "checkpoints"

    def test_fresh_checkpoint_has_zero_spectra(self, tmp_path):
        ck = self.trained(tmp_path)
        out = tmp_path / "insp"
        assert cli.main(["inspect", str(ck / "omni-smola" / "best.json"),
                         "--output-dir", str(out)]) == 0
        summary = json.loads((out / "inspect.json").read_text())
        assert set(summary["blocks"]) == {"mm", "v", "t"}
        zero = {str(t): 0 for t in THRESHOLDS}
        for entry in summary["blocks"].values():
            assert entry["aggregate"] == zero
            assert all(e == zero for e in entry["experts"])
        for name in ("heatmap_mm.csv", "spectrum_v_expert1.csv", "spectrum_t_aggregate.csv"):
            assert (out / name).exists()

    def test_trained_spectra_parse_and_are_monotone(self, tmp_path):
        ck = self.trained(tmp_path, steps=6)
        out = tmp_path / "insp"
        assert cli.main(["inspect", str(ck / "omni-smola" / "final.json"),
                         "--output-dir", str(out)]) == 0
        files = sorted(out.glob("spectrum_*.csv"))
        assert len(files) == 3 * (2 + 1)
        for f in files:
            rows = [line.split(",") for line in f.read_text().splitlines()[1:]]
            sigma = [float(v) for k, _, v in rows if k == "sigma"]
            counts = [int(v) for k, _, v in sorted((r for r in rows if r[0] == "count_above"),
                                                  key=lambda r: float(r[1]))]
            assert sigma == sorted(sigma, reverse=True)
            assert all(b <= a for a, b in zip(counts, counts[1:]))
            assert counts[0] <= (2 if "aggregate" in f.name else 1)  # rank-1 experts

    def test_lora_checkpoint(self, tmp_path):
        ck = self.trained(tmp_path, steps=3)
        out = tmp_path / "insp"
        assert cli.main(["inspect", str(ck / "plain-lora" / "final.json"),
                         "--output-dir", str(out)]) == 0
        assert (out / "spectrum_lora.csv").exists()

    def test_orthonormal_phi_gives_identity_heatmap(self, tmp_path):
        block = SmolaBlock(np.eye(3, 5), 1.0, np.ones((3, 1, 5)), np.ones((3, 4, 1)), np.zeros((5, 4)))
        ser.save_model(tmp_path / "b.json", block)
        out = tmp_path / "insp"
        assert cli.main(["inspect", str(tmp_path / "b.json"), "--output-dir", str(out)]) == 0
        assert np.array_equal(load_matrix(out / "heatmap_block.csv"), np.eye(3))
        assert json.loads((out / "inspect.json").read_text())["blocks"]["block"]["identity_distance"] == 0

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("not json")
        assert cli.main(["inspect", str(bad)]) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "checkpoint"
