import json

import numpy as np
import pytest

from svdlora.cli import main
from svdlora.data import TaskSpec, generate_task
from svdlora.model import TinyModel
from svdlora.storage import load_adapter_set, load_merge_report
from svdlora.adapter import delta
from svdlora.train import evaluate

EASY = ["--task-seed", "5", "--classes", "2", "--separation", "8.0",
        "--epochs", "25"]
OTHER = ["--task-seed", "6", "--classes", "3", "--separation", "8.0",
         "--epochs", "25"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["train", *EASY, "--out", str(d / "a.mlgo")]) == 0
    assert main(["train", *OTHER, "--out", str(d / "b.mlgo")]) == 0
    return d


class TestTrain:
    def test_prints_test_accuracy(self, workdir, tmp_path, capsys):
        code = main(["train", *EASY, "--out", str(tmp_path / "t.mlgo")])
        out = capsys.readouterr().out
        assert code == 0
        acc = float(out.split("test_acc=")[1].split()[0])
        assert acc >= 0.9
        assert "best_epoch=" in out

    def test_writes_curve_csv(self, workdir):
        lines = (workdir / "a.mlgo.curve.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_acc"
        assert len(lines) == 26

    def test_deterministic_outputs(self, workdir, tmp_path):
        main(["train", *EASY, "--out", str(tmp_path / "r.mlgo")])
        assert (tmp_path / "r.mlgo").read_bytes() == (workdir / "a.mlgo").read_bytes()

    def test_rank_zero_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--rank", "0", "--out", str(tmp_path / "x.mlgo")])
        assert exc.value.code == 2


class TestMerge:
    def test_self_merge_preserves_deltas(self, workdir, tmp_path, capsys):
        out = tmp_path / "m.mlgo"
        code = main(["merge", "--inputs", str(workdir / "a.mlgo"),
                     "--out", str(out), "--report", str(tmp_path / "r.json")])
        assert code == 0
        printed = capsys.readouterr().out
        assert "kept_rank=" in printed and "retained_mass=" in printed
        merged = load_adapter_set(out)
        original = load_adapter_set(workdir / "a.mlgo")
        for tid, a in merged.adapters.items():
            assert np.linalg.norm(delta(a) - delta(original.adapters[tid])) <= 1e-9

    def test_report_retained_mass_threshold(self, workdir, tmp_path):
        report_path = tmp_path / "rep.json"
        main(["merge", "--inputs", str(workdir / "a.mlgo"), str(workdir / "b.mlgo"),
              "--out", str(tmp_path / "m.mlgo"), "--report", str(report_path)])
        report = load_merge_report(report_path)
        assert report["config"]["method"] == "med-lego"
        for rec in report["records"]:
            assert rec["retained_mass"] >= 0.997

    def test_baseline_methods_run(self, workdir, tmp_path):
        for method in ("pre-avg", "task-arith"):
            assert main(["merge", "--inputs", str(workdir / "a.mlgo"),
                         str(workdir / "b.mlgo"), "--method", method,
                         "--out", str(tmp_path / f"{method}.mlgo")]) == 0
            assert load_adapter_set(tmp_path / f"{method}.mlgo").adapters

    def test_threshold_out_of_range_is_usage_error(self, workdir, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["merge", "--inputs", str(workdir / "a.mlgo"),
                  "--threshold", "1.5", "--out", str(tmp_path / "m.mlgo")])
        assert exc.value.code == 2

    def test_missing_input_is_runtime_error(self, tmp_path, capsys):
        code = main(["merge", "--inputs", str(tmp_path / "absent.mlgo"),
                     "--out", str(tmp_path / "m.mlgo")])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestEval:
    def test_matches_train_printed_accuracy(self, workdir, capsys):
        main(["eval", "--adapters", str(workdir / "a.mlgo"), "--task-seed", "5"])
        acc = float(capsys.readouterr().out.split("acc=")[1])
        spec = TaskSpec(task_seed=5, num_classes=2, separation=8.0)
        model = TinyModel(seed=7)
        s = load_adapter_set(workdir / "a.mlgo")
        expected = evaluate(model, s, generate_task(spec).test,
                            head=(s.head_w, s.head_b))
        assert acc == pytest.approx(expected, abs=5e-5)

    def test_merged_with_task_head(self, workdir, tmp_path, capsys):
        merged = tmp_path / "m.mlgo"
        main(["merge", "--inputs", str(workdir / "a.mlgo"), str(workdir / "b.mlgo"),
              "--out", str(merged)])
        code = main(["eval", "--adapters", str(merged),
                     "--head", str(workdir / "a.mlgo"), "--task-seed", "5"])
        assert code == 0
        acc = float(capsys.readouterr().out.split("acc=")[1])
        assert 0.0 <= acc <= 1.0

    def test_merged_without_head_fails(self, workdir, tmp_path, capsys):
        merged = tmp_path / "m.mlgo"
        main(["merge", "--inputs", str(workdir / "a.mlgo"), str(workdir / "b.mlgo"),
              "--out", str(merged)])
        code = main(["eval", "--adapters", str(merged), "--task-seed", "5"])
        assert code == 1
        assert "head" in capsys.readouterr().err


class TestGapDemo:
    def test_positive_gap(self, capsys):
        assert main(["gap-demo", "--seed", "3"]) == 0
        assert float(capsys.readouterr().out.split("gap=")[1]) > 0

    def test_identical_gap_zero(self, capsys):
        assert main(["gap-demo", "--identical"]) == 0
        assert float(capsys.readouterr().out.split("gap=")[1]) == 0.0

    def test_seed_changes_gap(self, capsys):
        main(["gap-demo", "--seed", "1"])
        g1 = capsys.readouterr().out
        main(["gap-demo", "--seed", "2"])
        assert capsys.readouterr().out != g1


class TestInspect:
    def test_reports_param_fraction(self, workdir, capsys):
        assert main(["inspect", "--input", str(workdir / "a.mlgo")]) == 0
        out = capsys.readouterr().out
        # d=32, L=2, Q+V, r=4: 2*2*(32*4+4+4*32) over 12*32*32*2
        assert "param_count=1040" in out
        assert f"param_fraction={1040 / 24576:.6f}" in out
        assert "layer0.Q: rank=" in out

    def test_ranks_match_merge_report(self, workdir, tmp_path, capsys):
        merged, rep = tmp_path / "m.mlgo", tmp_path / "r.json"
        main(["merge", "--inputs", str(workdir / "a.mlgo"), str(workdir / "b.mlgo"),
              "--out", str(merged), "--report", str(rep)])
        capsys.readouterr()
        main(["inspect", "--input", str(merged)])
        out = capsys.readouterr().out
        for rec in json.loads(rep.read_text())["records"]:
            assert f"{rec['target']}: rank={rec['kept_rank']}" in out

    def test_corrupt_file_is_runtime_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.mlgo"
        bad.write_bytes(b"not an adapter file at all")
        assert main(["inspect", "--input", str(bad)]) == 1
        assert "error:" in capsys.readouterr().err
