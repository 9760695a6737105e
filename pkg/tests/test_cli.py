import csv
import json

import numpy as np
import pytest

from partialseg.cli import main, save_oracle
from partialseg.synthdata import load
from partialseg.trainer import Session

TINY = {
    "train": {
        "stage1_epochs": 2,
        "stage2_epochs": 2,
        "batches_per_epoch": 3,
        "patches_per_dataset": 4,
        "patch_size": 16,
        "hidden": 8,
    }
}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate", "--out", str(root), "--seed", "3", "--size", "32"]) == 0
    return root


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _csv_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate"])
    assert exc.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_generate_twice_is_identical(tmp_path):
    assert main(["generate", "--seed", "7", "--out", str(tmp_path / "a"), "--size", "32"]) == 0
    assert main(["generate", "--seed", "7", "--out", str(tmp_path / "b"), "--size", "32"]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_generate_size(data):
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["phantom"]["image_size"] == 32
    assert load(data).samples["F"][0].image.shape == (32, 32)


def test_gradcheck_filter_and_trials(tmp_path, capsys):
    out = tmp_path / "g.json"
    assert main(["gradcheck", "--losses", "marginal_ce", "--trials", "7", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert list(doc["reports"]) == ["marginal_ce"]
    assert doc["reports"]["marginal_ce"]["trials"] == 7
    assert doc["passed"] and "config_hash" in doc["provenance"]


def test_gradcheck_unknown_loss_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gradcheck", "--losses", "hinge"])
    assert exc.value.code == 2


def test_gradcheck_failure_exit_code(monkeypatch):
    import partialseg.cli as cli

    monkeypatch.setattr(cli, "run_suite", lambda names, trials, seed: {"x": {"passed": False}})
    assert main(["gradcheck", "--trials", "1"]) == 3


def test_bad_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seeds": []}))
    with pytest.raises(SystemExit) as exc:
        main(["gradcheck", "--config", str(bad)])
    assert exc.value.code == 2


def test_train_evaluate_pipeline(data, config, tmp_path):
    runs, ev = tmp_path / "runs", tmp_path / "eval"
    assert main(["train", "--data", str(data), "--out", str(runs), "--config", config, "--seeds", "0,1", "--networks", "F,All"]) == 0
    f_log = _csv_rows(runs / "F" / "seed0" / "trainlog.csv")
    all_log = _csv_rows(runs / "All" / "seed0" / "trainlog.csv")
    # F: stage 2 skipped. All: stage 1 then stage 2, with dispatch visible
    assert [r["stage"] for r in f_log] == ["1", "1"]
    assert [r["stage"] for r in all_log] == ["1", "1", "2", "2"]
    assert f_log == all_log[:2]
    assert float(all_log[2]["mce"]) > 0 and float(all_log[0]["mce"]) == 0
    header = (runs / "All" / "seed0" / "trainlog.csv").read_text().splitlines()[:4]
    assert header[0].startswith("# config_hash=") and any(h.startswith("# data_manifest=") for h in header)

    assert main(["evaluate", "--data", str(data), "--runs", str(runs), "--out", str(ev), "--config", config]) == 0
    rows = _csv_rows(ev / "metrics.csv")
    assert {r["network"] for r in rows} == {"F", "All"}
    assert {r["seed"] for r in rows} == {"0", "1"}
    summary = json.loads((ev / "summary.json").read_text())
    assert summary["networks"]["All"]["mean_dice"]["n"] == 2
    assert summary["networks"]["All"]["mean_dice"]["std"] is not None
    assert "F/liver" in summary["all_vs_f"]["cells"]
    cell = summary["all_vs_f"]["cells"]["P3/pancreas"]
    assert cell["delta"] == pytest.approx(cell["All"] - cell["F"])


def test_evaluate_oracle_scores_perfectly(data, config, tmp_path):
    runs = tmp_path / "runs" / "All" / "seed0"
    runs.mkdir(parents=True)
    save_oracle(runs / "model.ckpt")
    assert main(["evaluate", "--data", str(data), "--runs", str(tmp_path / "runs"), "--out", str(tmp_path / "e")]) == 0
    rows = _csv_rows(tmp_path / "e" / "metrics.csv")
    assert rows and all(float(r["dice"]) == 1.0 for r in rows)
    flagged = [r for r in rows if r["hd_sentinel_flag"] == "1"]
    assert all(float(r["hausdorff"]) == 0.0 for r in rows if r["hd_sentinel_flag"] == "0")
    assert len(flagged) < len(rows)


def test_evaluate_without_checkpoints_fails(data, tmp_path):
    assert main(["evaluate", "--data", str(data), "--runs", str(tmp_path), "--out", str(tmp_path / "e")]) == 1


def test_resume_continues_log(data, config, tmp_path):
    runs = tmp_path / "runs"
    args = ["train", "--data", str(data), "--out", str(runs), "--config", config, "--seed", "0", "--networks", "All"]
    assert main(args) == 0
    complete = _csv_rows(runs / "All" / "seed0" / "trainlog.csv")
    final = Session.load(runs / "All" / "seed0" / "session.ckpt")[0]

    # simulate an interruption after the third epoch
    other = tmp_path / "other"
    stop = {"n": 0}
    import partialseg.trainer as tr

    real = tr.Session._finish_epoch

    def interrupted(self, *a):
        rec = real(self, *a)
        stop["n"] += 1
        if stop["n"] == 3:
            self.save(other / "All" / "seed0" / "session.ckpt")
            raise KeyboardInterrupt
        return rec

    tr.Session._finish_epoch = interrupted
    try:
        with pytest.raises(KeyboardInterrupt):
            main(["train", "--data", str(data), "--out", str(other), "--config", config, "--seed", "0", "--networks", "All"])
    finally:
        tr.Session._finish_epoch = real
    assert not (other / "All" / "seed0" / "model.ckpt").exists()
    assert main(["train", "--data", str(data), "--out", str(other), "--config", config, "--seed", "0", "--networks", "All", "--resume"]) == 0
    resumed = _csv_rows(other / "All" / "seed0" / "trainlog.csv")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    assert strip(resumed) == strip(complete)
    again = Session.load(other / "All" / "seed0" / "session.ckpt")[0]
    for k in final.model.params:
        np.testing.assert_array_equal(final.model.params[k], again.model.params[k])


def test_sweep_rows(data, config, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--data", str(data), "--out", str(out), "--config", config, "--seeds", "0,1", "--ratios", "1:0,0:1"]) == 0
    rows = _csv_rows(out / "sweep.csv")
    assert [(r["ratio"], r["seed"]) for r in rows] == [("1:0", "0"), ("1:0", "1"), ("0:1", "0"), ("0:1", "1")]
    summary = json.loads((out / "sweep_summary.json").read_text())
    assert set(summary["ratios"]) == {"1:0", "0:1"}


def test_sweep_marginal_only_equals_train_with_ratio(data, config, tmp_path):
    assert main(["sweep", "--data", str(data), "--out", str(tmp_path / "s"), "--config", config, "--seed", "0", "--ratios", "1:0"]) == 0
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", config, "--seed", "0",
                 "--networks", "All", "--ratio", "1:0"]) == 0
    assert main(["evaluate", "--data", str(data), "--runs", str(tmp_path / "r"), "--out", str(tmp_path / "e")]) == 0
    sweep = _csv_rows(tmp_path / "s" / "sweep.csv")[0]
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert float(sweep["mean_dice"]) == pytest.approx(summary["networks"]["All"]["mean_dice"]["mean"], abs=1e-6)


def test_parallel_workers_match_serial(data, config, tmp_path, monkeypatch):
    args = ["--data", str(data), "--config", config, "--seeds", "0,1", "--networks", "F"]
    assert main(["train", *args, "--out", str(tmp_path / "serial")]) == 0
    monkeypatch.setenv("PARTIALSEG_THREADS", "2")
    assert main(["train", *args, "--out", str(tmp_path / "par")]) == 0
    for seed in (0, 1):
        a = (tmp_path / "serial" / "F" / f"seed{seed}" / "model.ckpt").read_bytes()
        b = (tmp_path / "par" / "F" / f"seed{seed}" / "model.ckpt").read_bytes()
        assert a == b


def test_bad_threads_env(data, config, tmp_path, monkeypatch):
    monkeypatch.setenv("PARTIALSEG_THREADS", "zero")
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(data), "--out", str(tmp_path), "--config", config, "--seed", "0", "--networks", "F"])
    assert exc.value.code == 2


def test_unknown_network_is_usage_error(data, config, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(data), "--out", str(tmp_path), "--config", config, "--networks", "Q7"])
    assert exc.value.code == 2


def test_paranoid_training_runs(data, config, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--config", config, "--seed", "0",
                 "--networks", "All", "--paranoid", "5"]) == 0


def test_sensitivity_preset_layout(data, config, tmp_path):
    runs = tmp_path / "runs"
    assert main(["train", "--data", str(data), "--out", str(runs), "--config", config, "--seed", "0",
                 "--networks", "All", "--preset", "sensitivity"]) == 0
    assert sorted(p.name for p in runs.iterdir()) == ["nfull14", "nfull19", "nfull24", "nfull4", "nfull9"]
    assert main(["evaluate", "--data", str(data), "--runs", str(runs), "--out", str(tmp_path / "e")]) == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert "All@nfull4" in summary["networks"]
