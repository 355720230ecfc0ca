"""Command line subcommands, exit codes and file outputs."""

import csv
import json

import numpy as np
import pytest

from eatformer import cli
from eatformer.data import load_dataset
from eatformer.model import get_variant, load_checkpoint, model_state
from eatformer.verification import CheckResult


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestSummary:
    def test_tiny_table_and_json(self, tmp_path, capsys):
        code, out, _ = run(capsys, "summary", "--variant", "tiny", "--size", "224", "--out", tmp_path)
        assert code == 0 and "stages.2" in out and "total" in out
        report = json.loads((tmp_path / "summary_tiny.json").read_text())
        assert abs(report["reconciliation"]["params_rel_error"]) <= 0.10

    def test_unknown_variant(self, tmp_path, capsys):
        code, _, err = run(capsys, "summary", "--variant", "huge", "--out", tmp_path)
        assert code == 2 and "mobile" in err and "tiny" in err
        assert list(tmp_path.iterdir()) == []

    def test_missing_variant(self, tmp_path, capsys):
        assert run(capsys, "summary", "--out", tmp_path)[0] == 2

    def test_bad_size(self, capsys):
        assert run(capsys, "summary", "--variant", "desk", "--size", "ax3")[0] == 2

    def test_overrides_and_config(self, tmp_path, capsys):
        cfg = tmp_path / "v.yaml"
        cfg.write_text("name: custom\ndims: [32, 64, 96, 128]\nnum_classes: 3\n")
        code, out, _ = run(capsys, "summary", "--config", cfg, "--size", "32", "--norm", "layernorm",
                           "--output", tmp_path / "s.csv")
        assert code == 0 and out.startswith("custom")
        assert (tmp_path / "s.csv").read_text().startswith("name,params,macs,flops")

    def test_invalid_override(self, tmp_path, capsys):
        code, _, err = run(capsys, "summary", "--variant", "desk", "--split-ratio", "2", "--out", tmp_path)
        assert code == 2 and "split_ratio" in err


class TestVerify:
    def test_ea_suite(self, tmp_path, capsys):
        code, out, _ = run(capsys, "verify", "--suite", "ea", "--output", tmp_path / "v.json")
        assert code == 0 and "PASS  ea.crossover_equivalence" in out
        assert json.loads((tmp_path / "v.json").read_text())["passed"] is True

    def test_failure_exits_one(self, monkeypatch, capsys):
        monkeypatch.setitem(cli.run_suites.__globals__["SUITE_RUNNERS"], "ea",
                            lambda seed: [CheckResult("ea.broken", False, "forced")])
        code, _, err = run(capsys, "verify", "--suite", "ea")
        assert code == 1 and "ea.broken" in err


class TestTrain:
    def test_outputs_and_determinism(self, tmp_path, capsys):
        args = ["train", "--variant", "desk", "--synthetic", "--samples", "20", "--epochs", "2",
                "--batch-size", "10"]
        assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
        assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
        for name in ("metrics.csv", "best.eatf", "variant.yaml", "alphas.csv", "alphas.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rows = list(csv.DictReader((tmp_path / "a" / "metrics.csv").open()))
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert load_checkpoint(tmp_path / "a" / "best.eatf").spec == get_variant("desk")

    def test_zero_epochs_saves_initialisation(self, tmp_path, capsys):
        assert run(capsys, "train", "--synthetic", "--samples", "10", "--epochs", "0", "--out", tmp_path / "t")[0] == 0
        assert run(capsys, "build", "--variant", "desk", "--output", tmp_path / "init.eatf")[0] == 0
        assert (tmp_path / "t" / "best.eatf").read_bytes() == (tmp_path / "init.eatf").read_bytes()

    def test_dataset_file(self, tmp_path, capsys):
        assert run(capsys, "dataset", "--samples", "12", "--classes", "3", "--output", tmp_path / "d.eatd")[0] == 0
        assert len(load_dataset(tmp_path / "d.eatd")) == 12
        code, out, _ = run(capsys, "train", "--dataset", tmp_path / "d.eatd", "--epochs", "1", "--out", tmp_path / "r")
        assert code == 0 and "epoch    1" in out

    def test_unreadable_dataset(self, tmp_path, capsys):
        (tmp_path / "bad.eatd").write_bytes(b"junk")
        assert run(capsys, "train", "--dataset", tmp_path / "missing.eatd", "--out", tmp_path / "r")[0] == 2
        assert run(capsys, "train", "--dataset", tmp_path / "bad.eatd", "--out", tmp_path / "r")[0] == 2

    def test_dataset_source_required(self, tmp_path, capsys):
        assert run(capsys, "train", "--out", tmp_path / "r")[0] == 2

    def test_too_many_classes(self, tmp_path, capsys):
        run(capsys, "dataset", "--samples", "6", "--classes", "3", "--output", tmp_path / "d.eatd")
        code, _, err = run(capsys, "train", "--dataset", tmp_path / "d.eatd", "--num-classes", "2", "--epochs", "1",
                           "--out", tmp_path / "r")
        assert code == 2 and "classes" in err


class TestReportAndBuild:
    def test_report_from_checkpoint(self, tmp_path, capsys):
        run(capsys, "build", "--variant", "desk", "--seed", "3", "--output", tmp_path / "m.eatf")
        code, out, _ = run(capsys, "report", "--checkpoint", tmp_path / "m.eatf", "--size", "32",
                           "--out", tmp_path / "rep")
        assert code == 0 and "4 blocks" in out
        assert sorted(p.name for p in (tmp_path / "rep").iterdir()) == [
            "alphas.csv", "alphas.json", "cost.csv", "cost.json"]

    def test_build_is_seeded(self, tmp_path, capsys):
        for name, seed in (("a", 1), ("b", 1), ("c", 2)):
            run(capsys, "build", "--variant", "desk", "--seed", seed, "--output", tmp_path / name)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes() != (tmp_path / "c").read_bytes()

    def test_build_with_trh(self, tmp_path, capsys):
        run(capsys, "build", "--variant", "desk", "--trh", "--output", tmp_path / "m")
        model = load_checkpoint(tmp_path / "m")
        assert model.trh is not None and any(k.startswith("trh.") for k in model_state(model))

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        (tmp_path / "m").write_bytes(b"EATF\x01\x00")
        assert run(capsys, "report", "--checkpoint", tmp_path / "m", "--out", tmp_path / "r")[0] == 2


class TestThreads:
    @pytest.mark.parametrize("value", ["0", "-2", "many"])
    def test_invalid(self, monkeypatch, capsys, value):
        monkeypatch.setenv("EATF_THREADS", value)
        code, _, err = run(capsys, "verify", "--suite", "roundtrip")
        assert code == 2 and "EATF_THREADS" in err

    def test_valid(self, monkeypatch, capsys):
        monkeypatch.setenv("EATF_THREADS", "1")
        assert run(capsys, "verify", "--suite", "roundtrip")[0] == 0

    def test_limit_parsing(self, monkeypatch):
        monkeypatch.delenv("EATF_THREADS", raising=False)
        assert cli.thread_limit() is None
        monkeypatch.setenv("EATF_THREADS", "4")
        assert cli.thread_limit() == 4


def test_help_exits_cleanly(capsys):
    assert cli.main(["--help"]) == 0
    assert "summary" in capsys.readouterr().out


def test_no_subcommand(capsys):
    assert cli.main([]) == 2
