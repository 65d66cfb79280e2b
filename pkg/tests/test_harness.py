import json
import os

import numpy as np
import pytest
import yaml

from consistent_evidence.core.constraints import evidence_vector
from consistent_evidence.core.losses import RegMode
from consistent_evidence.core.metrics import PredictionRecord, load_predictions, write_predictions
from consistent_evidence.core.model import Checkpoint
from consistent_evidence.core.synthdata import GenConfig, load_dataset
from consistent_evidence.core.trainer import TrainConfig
from consistent_evidence.harness import cli, report, sweep
from consistent_evidence.utiles import data, lang, utiles
from consistent_evidence.utiles.utiles import ConfigError

GEN = {"n_train": 120, "n_validation": 40, "n_test": 40, "dim": 4, "sigma": 0.5, "p_evidence_label": 0.5}

TRAIN = {"steps": 20, "eval_interval": 10, "hidden": 4, "batch_size": 8, "learning_rate": 0.01, "reg_warmup": 0}


def tiny_grid(**changes):
    document = {"points": [[0, 0], [1, 1]], "seeds": [0, 1], "gen": GEN, "train": TRAIN, **changes}
    return sweep.SweepGrid.from_dict(document)


def write_yaml(document, path):
    path.write_text(yaml.safe_dump(document), encoding="utf-8")
    return str(path)


@pytest.fixture
def english():
    yield
    lang.set_lang(data.BASE_LANG)


def test_slice_points():
    assert sweep.slice_points("omega1", [0, 1]) == [(0.0, 0.0), (1.0, 0.0)]
    assert sweep.slice_points("omega2", [3]) == [(0.0, 3.0)]
    assert sweep.slice_points("diagonal", [2]) == [(2.0, 2.0)]
    assert len(sweep.slice_points("grid", [0, 1, 3])) == 9
    with pytest.raises(ConfigError, match="Unknown slice"):
        sweep.slice_points("antidiagonal", [1])


def test_packaged_grids():
    slices = sweep.SweepGrid.load(data.SLICES_GRID_FILE)
    # the origin is shared by the three slices
    assert len(slices.points) == 13
    assert slices.points[0] == (0.0, 0.0)

    table = sweep.SweepGrid.load(data.TRADEOFF_GRID_FILE)
    assert table.points == [(0.0, 0.0), (3.0, 3.0), (10.0, 6.0), (30.0, 10.0)]
    jobs = table.jobs()
    assert len(jobs) == 3 + 12
    assert [job.mode for job in jobs[:3]] == [sweep.TASK_ONLY] * 3

    soft = sweep.SweepGrid.load(data.TRADEOFF_SOFT_GRID_FILE)
    assert soft.modes == ["hard", "soft"]
    assert len(soft.jobs()) == 2 * 5 * 3


def test_grid_document_errors():
    with pytest.raises(ConfigError, match="Unknown sweep"):
        sweep.SweepGrid.from_dict({"points": [[0, 0]], "omega": 3})
    with pytest.raises(ConfigError, match="pair"):
        sweep.SweepGrid.from_dict({"points": [[0, 0, 1]]})
    with pytest.raises(ConfigError, match="no points"):
        sweep.SweepGrid.from_dict({"seeds": [0]})
    with pytest.raises(ConfigError, match="no seeds"):
        sweep.SweepGrid.from_dict({"points": [[0, 0]], "seeds": []})
    with pytest.raises(ConfigError, match="mode"):
        sweep.SweepGrid.from_dict({"points": [[0, 0]], "modes": "medium"})
    with pytest.raises(ConfigError, match="workers"):
        sweep.SweepGrid.from_dict({"points": [[0, 0]], "workers": 0})


def test_grid_paths_are_relative_to_the_grid_file(tmp_path):
    path = write_yaml({"points": [[0, 0]], "data": "dataset.jsonl", "spec": "spec.json"}, tmp_path / "grid.yaml")
    grid = sweep.SweepGrid.load(path)
    assert grid.data_path == os.path.join(str(tmp_path), "dataset.jsonl")
    assert grid.spec_path == os.path.join(str(tmp_path), "spec.json")


def test_packaged_configs_hold_the_defaults():
    assert TrainConfig.from_dict(utiles.load_config(data.TRAIN_CONFIG_FILE)) == TrainConfig()
    assert GenConfig.from_dict(utiles.load_config(data.GEN_CONFIG_FILE)) == GenConfig()
    assert (TrainConfig().steps, TrainConfig().reg_warmup, GenConfig().sigma) == (6000, 2000, 1.5)


def test_run_job_configs():
    config = TrainConfig.from_dict(utiles.load_config(data.TRAIN_CONFIG_FILE))
    soft = sweep.RunJob(10.0, 6.0, "soft", 1).config(config, 7)
    assert (soft.loss.omega1, soft.loss.omega2, soft.loss.mode) == (10.0, 6.0, RegMode.SOFT)
    baseline = sweep.RunJob(0.0, 0.0, sweep.TASK_ONLY, 1).config(config, 7)
    assert baseline.label_sampling == (1.0,) + (0.0,) * 7


def test_single_run_sweep(tmp_path):
    grid = tiny_grid(points=[[0, 0]], seeds=[0])
    result = sweep.run_sweep(grid, str(tmp_path), workers=1)
    assert result.ok
    assert len(result.rows) == 1
    assert len(result.aggregates) == 1
    assert result.aggregates[0]["n"] == 1
    assert result.aggregates[0]["r1_std"] == 0.0
    assert result.aggregates[0]["acc_y_mean"] == result.rows[0]["acc_y"]


def test_sweep_files(tmp_path):
    result = sweep.run_sweep(tiny_grid(include_task_only=True), str(tmp_path), workers=1)
    runs = utiles.read_csv(str(tmp_path / data.RUNS_CSV_FILE))
    assert len(runs) == 2 + 4
    assert [row["mode"] for row in runs[:2]] == [sweep.TASK_ONLY] * 2
    assert [(row["omega1"], row["seed"]) for row in runs[2:]] == [
        ("0.0", "0"),
        ("0.0", "1"),
        ("1.0", "0"),
        ("1.0", "1"),
    ]
    assert list(runs[0]) == list(sweep.runs_header(7))
    for row in runs:
        per_label = [float(row[f"acc_z{k}"]) for k in range(7)]
        assert float(row["acc_z"]) == pytest.approx(np.mean(per_label), abs=1e-12)
    assert json.loads((tmp_path / data.FAILURES_FILE).read_text(encoding="utf-8")) == []

    metadata = utiles.load_json(str(tmp_path / data.METADATA_FILE))
    assert metadata["workers"] == 1
    assert metadata["grid"]["seeds"] == [0, 1]
    assert len(result.aggregates) == 3


def test_aggregates_derive_from_runs(tmp_path):
    sweep.run_sweep(tiny_grid(), str(tmp_path), workers=1)
    runs = utiles.read_csv(str(tmp_path / data.RUNS_CSV_FILE))
    aggregates = utiles.read_csv(str(tmp_path / data.AGGREGATE_CSV_FILE))
    assert len(aggregates) == 2
    for entry in aggregates:
        point = (entry["omega1"], entry["omega2"], entry["mode"])
        members = [r for r in runs if (r["omega1"], r["omega2"], r["mode"]) == point]
        assert int(entry["n"]) == len(members) == 2
        for metric in ("r1", "r2", "acc_y", "auc_y", "acc_z", "acc_z6"):
            values = np.array([float(r[metric]) for r in members])
            assert float(entry[f"{metric}_mean"]) == pytest.approx(values.mean(), abs=1e-12)
            assert float(entry[f"{metric}_std"]) == pytest.approx(values.std(ddof=1), abs=1e-12)


def test_sweep_output_is_reproducible(tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    sweep.run_sweep(tiny_grid(), str(first), workers=1)
    sweep.run_sweep(tiny_grid(), str(second), workers=1)
    for name in (data.RUNS_CSV_FILE, data.AGGREGATE_CSV_FILE, data.FAILURES_FILE):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_worker_pool_matches_inline_sweep(tmp_path):
    inline, pooled = tmp_path / "inline", tmp_path / "pooled"
    sweep.run_sweep(tiny_grid(), str(inline), workers=1)
    sweep.run_sweep(tiny_grid(), str(pooled), workers=2)
    assert (inline / data.RUNS_CSV_FILE).read_bytes() == (pooled / data.RUNS_CSV_FILE).read_bytes()


@pytest.fixture
def failing_runs(monkeypatch):
    """Runs at omega1 = 1 raise; the rest train normally"""
    original = sweep.train

    def train(pairs, validation, spec, config, seed, trace_path=None):
        if config.loss.omega1 == 1.0:
            raise ValueError("diverged")
        return original(pairs, validation, spec, config, seed, trace_path)

    monkeypatch.setattr(sweep, "train", train)


def test_failed_runs_are_recorded(tmp_path, failing_runs):
    result = sweep.run_sweep(tiny_grid(), str(tmp_path), workers=1)
    assert not result.ok
    assert len(result.rows) == 2
    failures = json.loads((tmp_path / data.FAILURES_FILE).read_text(encoding="utf-8"))
    assert [(f["omega1"], f["seed"]) for f in failures] == [(1.0, 0), (1.0, 1)]
    assert "diverged" in failures[0]["error"]


def test_sweep_command_exit_status(tmp_path, failing_runs):
    grid = write_yaml({"points": [[0, 0], [1, 0]], "seeds": [0], "gen": GEN, "train": TRAIN}, tmp_path / "grid.yaml")
    assert cli.run(["sweep", "--grid", grid, "--out", str(tmp_path / "out"), "--workers", "1"]) == 1
    good = write_yaml({"points": [[0, 0]], "seeds": [0], "gen": GEN, "train": TRAIN}, tmp_path / "good.yaml")
    assert cli.run(["sweep", "--grid", good, "--out", str(tmp_path / "good"), "--workers", "1"]) == 0


def write_aggregate(directory, rows):
    os.makedirs(directory, exist_ok=True)
    header = ("omega1", "omega2", "mode", "n", "r1_mean", "r2_mean", "acc_y_mean", "acc_z_mean")
    utiles.write_csv(header, rows, os.path.join(directory, data.AGGREGATE_CSV_FILE))
    return str(directory)


HARD = [(0.0, 0.0, "hard", 3, 0.5, 0.05, 0.52, 0.8), (10.0, 6.0, "hard", 3, 0.1, 0.02, 0.51, 0.83)]

SOFT = [(0.0, 0.0, "soft", 3, 0.5, 0.05, 0.52, 0.8), (10.0, 6.0, "soft", 3, 0.2, 0.01, 0.5, 0.86)]


def test_report_of_identical_inputs_has_zero_deltas(tmp_path):
    first = write_aggregate(tmp_path / "first", HARD)
    second = write_aggregate(tmp_path / "second", HARD)
    for paths in ([first, second], [first]):
        rows = report.build_report(paths)
        assert len(rows) == 2
        for row in rows:
            assert row[6] == row[9] == row[12] == row[15] == 0.0


def test_report_layout(tmp_path):
    directory = write_aggregate(tmp_path / "sweep", [*HARD, (0.0, 0.0, sweep.TASK_ONLY, 3, 0.6, 0.1, 0.5, 0.7), *SOFT])
    out = tmp_path / "report.csv"
    rows = report.write_report([directory], str(out))
    assert ",".join(report.REPORT_HEADER) == (
        "omega1,omega2,ref,other,r1_ref,r1_other,r1_delta,r2_ref,r2_other,r2_delta,"
        "acc_y_ref,acc_y_other,acc_y_delta,acc_z_ref,acc_z_other,acc_z_delta"
    )
    assert rows[1][:4] == [10.0, 6.0, "sweep:hard", "sweep:soft"]
    assert rows[1][6] == pytest.approx(0.1)
    assert rows[1][12] == pytest.approx(-0.01)
    assert rows[1][13:] == pytest.approx([0.83, 0.86, 0.03])
    assert len(utiles.read_csv(str(out))) == 2


def test_report_groups_get_distinct_names(tmp_path):
    first = write_aggregate(tmp_path / "a" / "run", HARD)
    second = write_aggregate(tmp_path / "b" / "run", HARD)
    assert [g.name for g in report.load_groups([first, second])] == ["run:hard", "run#1:hard"]


def test_report_errors(tmp_path):
    full = write_aggregate(tmp_path / "full", HARD)
    partial = write_aggregate(tmp_path / "partial", HARD[:1])
    with pytest.raises(report.GridMismatchError, match=r"\(10, 6\).*partial"):
        report.build_report([full, partial])
    with pytest.raises(FileNotFoundError):
        report.build_report([str(tmp_path / "nowhere")])
    baseline = write_aggregate(tmp_path / "baseline", [(0.0, 0.0, sweep.TASK_ONLY, 3, 0.6, 0.1, 0.5, 0.7)])
    with pytest.raises(report.GridMismatchError):
        report.build_report([baseline])


def test_report_command(tmp_path, capsys):
    first = write_aggregate(tmp_path / "hard", HARD)
    second = write_aggregate(tmp_path / "soft", SOFT)
    out = str(tmp_path / "report.csv")
    assert cli.run(["report", "--in", first, second, "--out", out]) == 0
    assert "2" in capsys.readouterr().out
    partial = write_aggregate(tmp_path / "partial", SOFT[:1])
    assert cli.run(["report", "--in", first, partial, "--out", out]) == 1
    assert "(10, 6)" in capsys.readouterr().out


def test_validate_command(edema, tmp_path):
    predictions = str(tmp_path / "predictions.jsonl")
    write_predictions(
        [
            PredictionRecord(1, evidence_vector(edema, ["hilar congestion", "septal lines"])),
            PredictionRecord(3, evidence_vector(edema, ["air bronchograms"])),
        ],
        predictions,
    )
    out = tmp_path / "validate"
    assert cli.run(["validate", "--predictions", predictions, "--out", str(out)]) == 0
    result = utiles.load_json(str(out / data.REPORT_JSON_FILE))
    assert result["r1_total"] == 0.5
    assert result["r2_total"] == 0.0
    assert (out / data.REPORT_CSV_FILE).read_text(encoding="utf-8").splitlines() == [
        "class,r1,r2",
        "0,0.0,0.0",
        "1,0.5,0.0",
        "2,0.0,0.0",
        "3,0.0,0.0",
        "total,0.5,0.0",
    ]


def test_validate_command_names_the_bad_line(tmp_path, capsys):
    predictions = tmp_path / "predictions.jsonl"
    predictions.write_text('{"y_hat": 0, "z_hat": [-1, -1, -1, -1, -1, -1, -1]}\n{"y_hat": 9}\n', encoding="utf-8")
    assert cli.run(["validate", "--predictions", str(predictions), "--out", str(tmp_path / "out")]) == 1
    assert f"{predictions}:2" in capsys.readouterr().out


def test_gen_and_train_commands(edema, tmp_path):
    gen_config = write_yaml(GEN, tmp_path / "gen.yaml")
    dataset = str(tmp_path / "dataset.jsonl")
    assert cli.run(["gen", "--config", gen_config, "--seed", "5", "--out", dataset]) == 0
    assert len(load_dataset(dataset, edema).test) == 40

    train_config = write_yaml(TRAIN, tmp_path / "train.yaml")
    out = tmp_path / "train"
    argv = ["train", "--data", dataset, "--config", train_config, "--omega1", "1", "--mode", "soft", "--seed", "2"]
    assert cli.run([*argv, "--out", str(out)]) == 0

    checkpoint = Checkpoint.load(str(out / data.CHECKPOINT_FILE), edema)
    assert checkpoint.config["loss"]["omega1"] == 1.0
    assert checkpoint.config["loss"]["mode"] == "soft"
    assert len(load_predictions(str(out / data.PREDICTIONS_FILE), edema)) == 40
    metrics = utiles.load_json(str(out / data.METRICS_FILE))
    assert 0.0 <= metrics["acc_y"] <= 1.0
    trace = (out / data.TRACE_FILE).read_text(encoding="utf-8").splitlines()
    assert len(trace) == 3


def test_train_command_reports_bad_config(tmp_path, capsys):
    config = write_yaml({"learning_rate": -1}, tmp_path / "train.yaml")
    assert cli.run(["train", "--config", config, "--out", str(tmp_path / "out")]) == 1
    assert "learning_rate" in capsys.readouterr().out


def test_default_workers(monkeypatch):
    monkeypatch.delenv(data.WORKERS_ENV, raising=False)
    assert utiles.default_workers() == 1
    monkeypatch.setenv(data.WORKERS_ENV, "3")
    assert utiles.default_workers() == 3
    for raw in ("0", "many"):
        monkeypatch.setenv(data.WORKERS_ENV, raw)
        with pytest.raises(ConfigError):
            utiles.default_workers()


def test_load_config(tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("", encoding="utf-8")
    assert utiles.load_config(str(empty)) == {}
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        utiles.load_config(str(listing))


def test_messages(english):
    assert lang.languages() == ["en", "ru"]
    english_text = lang.getlocale("report_done", rows=2, out="x.csv")
    lang.set_lang("ru")
    assert lang.getlocale("report_done", rows=2, out="x.csv") != english_text
    with pytest.raises(ValueError):
        lang.set_lang("xx")


def test_language_option(english, tmp_path, capsys):
    first = write_aggregate(tmp_path / "hard", HARD)
    assert cli.run(["--lang", "ru", "report", "--in", first, "--out", str(tmp_path / "r.csv")]) == 0
    assert "Строк сравнения" in capsys.readouterr().out
