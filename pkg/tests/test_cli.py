import json

import numpy as np
import pytest

from nocdda.cli import main
from nocdda.plotting import trajectories_svg
from nocdda.sampler import Trajectory, save_trajectories_csv

SMALL = {"dataset": {"generator": "two-moons", "n_per_domain": 120, "rotation_degrees": 30.0, "noise_sd": 0.1},
         "T": 100, "pretrain_epochs": 10, "adversarial_rounds": 10, "unified_epochs": 3, "eps_epochs": 3,
         "active_steps": 10, "jump": 5, "samples_per_class": 10, "finetune_epochs": 3, "n_noisings": 2}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_gen_data_writes_csv_and_sidecar(tmp_path, capsys):
    assert main(["gen-data", "--generator", "two-moons", "--rotation", "30", "--seed", "7",
                 "--out-dir", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "data.json").read_text())
    assert meta["seed"] == 7 and meta["C"] == 2 and meta["params"]["rotation_degrees"] == 30
    assert (tmp_path / "data.csv").read_text().startswith("feature_0,feature_1,label,domain,split")


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("NOCDDA_SEED", "13")
    assert main(["gen-data", "--n", "40", "--out-dir", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "data.json").read_text())["seed"] == 13


def test_adapt_writes_report_and_effective_config(tmp_path, config):
    out = tmp_path / "out"
    assert main(["adapt", "--config", str(config), "--seed", "3", "--samples-per-class", "8",
                 "--out-dir", str(out)]) == 0
    (run_dir,) = out.iterdir()
    report = json.loads((run_dir / "report.json").read_text())
    assert 0 <= report["target_accuracy"] <= 1 and report["status"] == "ok"
    effective = json.loads((run_dir / "config.json").read_text())
    assert effective["samples_per_class"] == 8 and effective["seed"] == 3 and effective["T"] == 100


def test_adapt_is_idempotent(tmp_path, config):
    reports = []
    for _ in range(2):
        assert main(["adapt", "--config", str(config), "--out-dir", str(tmp_path)]) == 0
        (run_dir,) = tmp_path.glob("run-*")
        report = json.loads((run_dir / "report.json").read_text())
        report.pop("timings")
        reports.append(report)
    assert reports[0] == reports[1]


def test_train_source_eval_and_sample(tmp_path, config):
    assert main(["gen-data", "--n", "120", "--seed", "1", "--out-dir", str(tmp_path)]) == 0
    data = str(tmp_path / "data.csv")
    assert main(["train-source", "--data", data, "--epochs", "5", "--T", "100", "--out-dir", str(tmp_path)]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "classifier.json"), "--data", data,
                 "--out-dir", str(tmp_path)]) == 0
    assert 0 <= json.loads((tmp_path / "eval.json").read_text())["accuracy"] <= 1

    assert main(["adapt", "--config", str(config), "--data", data, "--out-dir", str(tmp_path / "a")]) == 0
    (run_dir,) = (tmp_path / "a").iterdir()
    assert main(["sample", "--run-dir", str(run_dir), "--n", "6", "--active-steps", "10", "--jump", "5",
                 "--out-dir", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "samples.csv").read_text().splitlines()
    assert len(lines) == 13 and lines[1].endswith(",generated,train")
    assert main(["plot", "--trajectories", str(tmp_path / "s" / "trajectories.csv"),
                 "--out-dir", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "trajectories.svg").read_text().count("<polyline") == 12


def test_ablate_twice_gives_identical_grids(tmp_path, config):
    grids = []
    for k in range(2):
        out = tmp_path / f"g{k}"
        assert main(["ablate", "--config", str(config), "--tds", "0.5,1.0", "--gen", "0,10",
                     "--variants", "G,NOCDDA", "--seeds", "0,1", "--out-dir", str(out)]) == 0
        grids.append((out / "grid.csv").read_bytes())
    assert grids[0] == grids[1]
    assert grids[0].decode().splitlines()[0] == "tds,G@0,NOCDDA@0,G@10,NOCDDA@10"


def test_bad_flag_exits_two(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["adapt", "--no-such-flag", "--out-dir", str(tmp_path)])
    assert info.value.code == 2


def test_stage_failure_exits_one_with_stage_name(tmp_path, capsys):
    cfg = dict(SMALL, selection={"kind": "threshold", "value": -1.0, "min_per_class": 0})
    (tmp_path / "bad.json").write_text(json.dumps(cfg))
    with pytest.warns(UserWarning):
        code = main(["adapt", "--config", str(tmp_path / "bad.json"), "--out-dir", str(tmp_path)])
    assert code == 1
    assert "[generation]" in capsys.readouterr().err
    (run_dir,) = tmp_path.glob("run-*")
    assert json.loads((run_dir / "report.json").read_text())["failed_stage"] == "generation"


def test_missing_input_exits_one(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.json"), "--data", str(tmp_path / "nope.csv"),
                 "--out-dir", str(tmp_path)]) == 1
    assert "[eval]" in capsys.readouterr().err


def test_empty_trajectory_file_plots_axes_only(tmp_path):
    save_trajectories_csv([], tmp_path / "t.csv")
    assert main(["plot", "--trajectories", str(tmp_path / "t.csv"), "--out-dir", str(tmp_path)]) == 0
    svg = (tmp_path / "trajectories.svg").read_text()
    assert svg.startswith("<svg") and svg.count('class="axis"') == 2 and "<polyline" not in svg


def test_straight_trajectory_has_two_distinct_endpoints():
    tr = Trajectory(0, [(10, np.array([0.0, 0.0])), (5, np.array([1.0, 1.0])), (0, np.array([2.0, 2.0]))])
    svg = trajectories_svg([tr])
    points = svg.split('points="')[1].split('"')[0].split()
    assert len(points) == 3 and points[0] != points[-1]


def test_high_dimensional_plot_needs_dims(tmp_path, capsys):
    tr = Trajectory(1, [(10, np.zeros(3)), (0, np.ones(3))])
    save_trajectories_csv([tr], tmp_path / "t.csv")
    assert main(["plot", "--trajectories", str(tmp_path / "t.csv"), "--out-dir", str(tmp_path)]) == 1
    assert "--dims" in capsys.readouterr().err
    assert main(["plot", "--trajectories", str(tmp_path / "t.csv"), "--dims", "0", "2",
                 "--out-dir", str(tmp_path)]) == 0
