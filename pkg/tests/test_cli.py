import json

import pandas as pd
import pytest

from graftkit import db
from graftkit.checkpoints import save_backbone
from graftkit.cli import dispatch
from graftkit.evaluation import Detection, GroundTruth, write_detections_jsonl
from graftkit.paired_data import write_manifest

TRAIN_CONFIG = {
    "epochs": 1,
    "lr": 1e-3,
    "batch_size": 8,
    "crop": None,
    "gamma_h": 1e-4,
    "gamma_r": 1e-4,
    "allow_custom_gamma": True,
}


@pytest.fixture
def workspace(tmp_path, lenet, event_split):
    pretrained = save_backbone(lenet, tmp_path / "lenet.pt")
    manifest = write_manifest(event_split, tmp_path / "data")
    config = tmp_path / "c.json"
    config.write_text(json.dumps({**TRAIN_CONFIG, "pretrained": str(pretrained), "data_manifest": str(manifest)}))
    return tmp_path, config


def _error_lines(capsys):
    return [line for line in capsys.readouterr().err.splitlines() if line.startswith("error:")]


class TestUsage:
    def test_unknown_flag(self, capsys, tmp_path):
        assert dispatch(["train", "--no_such_flag", "1", "--out_dir", str(tmp_path)]) == 2
        assert len(_error_lines(capsys)) == 1

    def test_unknown_subcommand(self):
        assert dispatch(["fly"]) == 2

    def test_missing_pretrained_is_usage(self, capsys, tmp_path):
        assert dispatch(["train", "--out_dir", str(tmp_path)]) == 2
        (line,) = _error_lines(capsys)
        assert line.startswith("error: ConfigError:")

    def test_unknown_config_key(self, capsys, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"epochz": 3}))
        assert dispatch(["train", "--config", str(config), "--out_dir", str(tmp_path / "out")]) == 2
        assert "epochz" in _error_lines(capsys)[0]

    def test_runtime_failure(self, capsys, tmp_path):
        assert dispatch(["voxelize", "--in", str(tmp_path / "missing.csv"), "--out_dir", str(tmp_path)]) == 1
        (line,) = _error_lines(capsys)
        assert line.startswith("error: FileNotFoundError:")


class TestVoxelize:
    def test_grid_and_sidecar(self, tmp_path):
        events = tmp_path / "events.csv"
        events.write_text("t,x,y,p\n0,0,0,1\n100,0,0,-1\n200,1,0,1\n")
        out = tmp_path / "out"
        assert dispatch(["voxelize", "--in", str(events), "--D", "3", "--out_dir", str(out)]) == 0
        sidecar = json.loads((out / "events_00000.json").read_text())
        assert sidecar == {"D": 3, "H": 1, "W": 2, "N": 3, "t_start": 0, "t_end": 200}
        assert (out / "events_00000.pt").exists()
        assert json.loads((out / "config.json").read_text())["command"] == "voxelize"

    def test_windows(self, tmp_path):
        events = tmp_path / "events.csv"
        events.write_text("".join(f"{t},0,0,1\n" for t in range(7)))
        out = tmp_path / "out"
        assert dispatch(["voxelize", "--in", str(events), "--N", "3", "--out_dir", str(out)]) == 0
        assert sorted(p.name for p in out.glob("events_*.pt")) == ["events_00000.pt", "events_00001.pt"]

    def test_out_dir_from_environment(self, tmp_path, monkeypatch):
        events = tmp_path / "events.csv"
        events.write_text("0,0,0,1\n")
        monkeypatch.setenv("GRAFTKIT_OUT", str(tmp_path / "env_out"))
        assert dispatch(["voxelize", "--in", str(events), "--out_dir", str(tmp_path / "flag_out")]) == 0
        assert (tmp_path / "env_out" / "events_00000.pt").exists()
        assert not (tmp_path / "flag_out").exists()


class TestTrain:
    def test_same_seed_same_epoch_zero_losses(self, workspace):
        root, config = workspace
        reports = []
        for name in ("a", "b"):
            assert dispatch(["train", "--config", str(config), "--seed", "7", "--out_dir", str(root / name)]) == 0
            reports.append(json.loads((root / name / "report.json").read_text()))
        first, second = (r["epoch_losses"] for r in reports)
        for term in ("frl", "fel", "fsl", "total"):
            assert first[term][0] == pytest.approx(second[term][0], abs=1e-6)

    def test_artifacts_and_registry(self, workspace):
        root, config = workspace
        out = root / "run"
        assert dispatch(["train", "--config", str(config), "--epochs", "2", "--out_dir", str(out)]) == 0
        for name in ("config.json", "report.json", "epoch_losses.csv", "loss_curves.html", "final.pt", "steps.jsonl"):
            assert (out / name).exists(), name
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["epochs"] == 2 and echoed["command"] == "train"

        engine = db.get_db_engine(db.registry_url(out))
        runs = db.get_runs(engine)
        assert list(runs["status"]) == ["ok"]
        assert len(db.get_epoch_losses(engine, int(runs.loc[0, "id"]))) == 2
        engine.dispose()

    def test_echo_reruns_the_command(self, workspace):
        root, config = workspace
        assert dispatch(["train", "--config", str(config), "--out_dir", str(root / "first")]) == 0
        echo = root / "first" / "config.json"
        assert dispatch(["train", "--config", str(echo), "--out_dir", str(root / "second")]) == 0
        first = pd.read_csv(root / "first" / "epoch_losses.csv")
        second = pd.read_csv(root / "second" / "epoch_losses.csv")
        pd.testing.assert_frame_equal(first, second)

    def test_eval_and_decode(self, workspace):
        root, config = workspace
        assert dispatch(["train", "--config", str(config), "--out_dir", str(root / "run")]) == 0
        cfg = json.loads(config.read_text())
        checkpoint = str(root / "run" / "final.pt")

        assert dispatch(["eval", "--checkpoint", checkpoint, "--data_manifest", cfg["data_manifest"],
                         "--pretrained", cfg["pretrained"], "--out_dir", str(root / "eval")]) == 0
        metrics = json.loads((root / "eval" / "metrics.json").read_text())
        assert 0.0 <= metrics["grafted_top1_error"] <= 100.0
        assert metrics["split"] == [2, 3]

        assert dispatch(["decode", "--checkpoint", checkpoint, "--pretrained", cfg["pretrained"],
                         "--data_manifest", cfg["data_manifest"], "--iterations", "5",
                         "--out_dir", str(root / "decode")]) == 0
        assert (root / "decode" / "decoded.png").exists()
        assert len(pd.read_csv(root / "decode" / "objective_trace.csv")) == 6


class TestExperiments:
    def test_ablate_writes_seven_row_summary(self, workspace):
        root, config = workspace
        out = root / "ablation"
        assert dispatch(["ablate", "--config", str(config), "--repeats", "1", "--out_dir", str(out)]) == 0
        summary = pd.read_csv(out / "ablation_summary.csv")
        assert len(summary) == 7
        assert {"terms", "mean", "std"} <= set(summary.columns)
        assert (out / "ablation.html").exists()

    def test_split_sweep(self, workspace):
        root, config = workspace
        out = root / "sweep"
        assert dispatch(["split-sweep", "--config", str(config), "--splits", "1:2,2:3",
                         "--out_dir", str(out)]) == 0
        table = pd.read_csv(out / "split_sweep.csv")
        assert list(table["split_front"]) == [1, 2]
        assert {"trainable_params", "fraction"} <= set(table.columns)

    def test_bad_split_list(self, workspace):
        root, config = workspace
        assert dispatch(["split-sweep", "--config", str(config), "--splits", "2-3",
                         "--out_dir", str(root / "sweep")]) == 2


class TestDetectionEval:
    def test_ap50_and_merge(self, tmp_path):
        truths = write_detections_jsonl([GroundTruth((0, 0, 2, 2), 0), GroundTruth((4, 4, 6, 6), 0)],
                                        tmp_path / "gt.jsonl")
        a = write_detections_jsonl([Detection((0, 0, 2, 2), 0, 0.9)], tmp_path / "a.jsonl")
        b = write_detections_jsonl([Detection((4, 4, 6, 6), 0, 0.8), Detection((0, 0, 2, 2), 0, 0.7)],
                                   tmp_path / "b.jsonl")
        out = tmp_path / "out"
        assert dispatch(["eval", "--detections", str(a), "--ground_truth", str(truths), "--merge_with", str(b),
                         "--out_dir", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["ap50"] == pytest.approx(0.5)
        assert metrics["ap50_combined"] == pytest.approx(1.0)


def _echo_without_out_dir(path):
    echoed = json.loads(path.read_text())
    echoed.pop("out_dir")
    return echoed


class TestEchoRerun:
    @pytest.mark.parametrize("command, extra, table", [
        ("ablate", ["--repeats", "1"], "ablation_summary.csv"),
        ("split-sweep", ["--splits", "1:2,2:3"], "split_sweep.csv"),
        ("sample-sweep", ["--fractions", "1.0,0.5"], "sample_sweep.csv"),
        ("experiment", ["--classifier_epochs", "1"], "experiment.csv"),
    ])
    def test_sweeps_rerun_from_echo(self, workspace, command, extra, table):
        root, config = workspace
        first, second = root / "first", root / "second"
        assert dispatch([command, "--config", str(config), *extra, "--out_dir", str(first)]) == 0
        assert dispatch([command, "--config", str(first / "config.json"), "--out_dir", str(second)]) == 0
        assert _echo_without_out_dir(first / "config.json") == _echo_without_out_dir(second / "config.json")
        a, b = pd.read_csv(first / table), pd.read_csv(second / table)
        assert list(a.columns) == list(b.columns) and len(a) == len(b)

    def test_decode_reruns_from_echo(self, workspace):
        root, config = workspace
        assert dispatch(["train", "--config", str(config), "--out_dir", str(root / "run")]) == 0
        cfg = json.loads(config.read_text())
        assert dispatch(["decode", "--checkpoint", str(root / "run" / "final.pt"), "--pretrained", cfg["pretrained"],
                         "--data_manifest", cfg["data_manifest"], "--iterations", "3", "--tv_weight", "0.5",
                         "--out_dir", str(root / "first")]) == 0
        assert dispatch(["decode", "--config", str(root / "first" / "config.json"),
                         "--out_dir", str(root / "second")]) == 0
        echoed = _echo_without_out_dir(root / "second" / "config.json")
        assert (echoed["iterations"], echoed["tv_weight"]) == (3, 0.5)
        assert echoed == _echo_without_out_dir(root / "first" / "config.json")
        assert len(pd.read_csv(root / "second" / "objective_trace.csv")) == 4

    def test_voxelize_reruns_from_echo(self, tmp_path):
        events = tmp_path / "events.csv"
        events.write_text("t,x,y,p\n0,0,0,1\n100,0,0,-1\n200,1,0,1\n")
        assert dispatch(["voxelize", "--in", str(events), "--D", "2", "--out_dir", str(tmp_path / "first")]) == 0
        assert dispatch(["voxelize", "--config", str(tmp_path / "first" / "config.json"),
                         "--out_dir", str(tmp_path / "second")]) == 0
        assert json.loads((tmp_path / "second" / "events_00000.json").read_text())["D"] == 2

    def test_flags_override_echo(self, workspace):
        root, config = workspace
        assert dispatch(["train", "--config", str(config), "--out_dir", str(root / "first")]) == 0
        assert dispatch(["train", "--config", str(root / "first" / "config.json"), "--epochs", "2",
                         "--out_dir", str(root / "second")]) == 0
        assert json.loads((root / "second" / "config.json").read_text())["epochs"] == 2

    def test_unknown_key_for_flag_only_command(self, capsys, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"input": "x.csv", "windows": 3}))
        assert dispatch(["voxelize", "--config", str(config), "--out_dir", str(tmp_path / "out")]) == 2
        assert "windows" in _error_lines(capsys)[0]
