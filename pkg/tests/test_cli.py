import json
import math

import numpy as np
import pytest

from edl.cli import CONFIG_SCHEMA, ConfigError, apply_overrides, load_config, main
from edl.datasets import gaussian_mixture
from edl.losses import metrics
from edl.models import fit_tree, tree_predict
from edl.simplex import load_dataset_csv

REGS = ["variance", "jsd_1va", "jsd_uniform", "jensen_gap"]


def write_config(tmp_path, grid=None, seeds=(0,), **train):
    cfg = {
        "dataset": {"generator": "gaussian_mixture", "n": 60, "classes": 3, "seed": 0, "sigma": 0.6},
        "model": {"kind": "mlp", "hidden_layers": [8]},
        "train": {"num_members": 3, "epochs": 2, "batch_size": 16, "patience": None, **train},
        "seeds": list(seeds),
        "grid": grid or [{"regularizer": "jensen_gap", "gammas": [0]}],
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def grid_runs(tmp_path_factory):
    """4 regularizers x 5 gammas x 3 seeds."""
    tmp = tmp_path_factory.mktemp("grid")
    grid = [{"regularizer": r, "gammas": [-0.5, -0.2, 0, 0.5, 1]} for r in REGS]
    cfg = write_config(tmp, grid, seeds=(0, 1, 2), epochs=1)
    assert main(["train", str(cfg), "--out", str(tmp / "runs")]) == 0
    return tmp / "runs"


# --- train ---------------------------------------------------------------------------------


def test_minimal_config_one_run(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", str(cfg), "--out", str(tmp_path / "out")]) == 0
    runs = [p for p in (tmp_path / "out").rglob("history.csv")]
    assert len(runs) == 1
    assert runs[0].parent == tmp_path / "out" / "jensen_gap" / "gamma_0" / "seed_0"
    assert "1/1 runs finished" in capsys.readouterr().out


def test_grid_creates_sixty_runs(grid_runs):
    dirs = sorted(p.parent for p in grid_runs.rglob("history.csv"))
    assert len(dirs) == 60
    assert {d.parent.parent.name for d in dirs} == set(REGS)


def test_rerun_refuses_then_force_is_bit_identical(tmp_path, capsys):
    cfg = write_config(tmp_path, [{"regularizer": "variance", "gammas": [0, -0.5]}])
    out = tmp_path / "out"
    assert main(["train", str(cfg), "--out", str(out)]) == 0
    dump = out / "variance" / "gamma_-0.5" / "seed_0" / "predictions_test.csv"
    first = dump.read_bytes()
    assert main(["train", str(cfg), "--out", str(out)]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["train", str(cfg), "--out", str(out), "--force"]) == 0
    assert dump.read_bytes() == first


def test_parallel_jobs_match_serial(tmp_path):
    cfg = write_config(tmp_path, [{"regularizer": "jsd_uniform", "gammas": [0, 0.5]}])
    assert main(["train", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    for f in (tmp_path / "a").rglob("predictions_test.csv"):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_schema_errors_name_fields(tmp_path, capsys):
    cfg = write_config(tmp_path, [{"regularizer": "jensen_gap", "gammas": [0.5]}], epochs=-1)
    assert main(["train", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "grid/0/gammas" in err and "train/epochs" in err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", str(bad)]) == 2


def test_split_must_sum_to_one(tmp_path):
    with pytest.raises(ConfigError, match="train/split"):
        load_config(write_config(tmp_path, split=[0.5, 0.2, 0.2]))


def test_overrides_and_seed_precedence(tmp_path, monkeypatch):
    path = write_config(tmp_path, seeds=(0, 1))
    cfg = load_config(path, overrides=["train.optimizer.learning_rate=0.01", "model.preset=\"smaller\""])
    assert cfg["train"]["optimizer"]["learning_rate"] == 0.01 and cfg["model"]["preset"] == "smaller"
    monkeypatch.setenv("EDL_SEED", "7")
    assert load_config(path)["seeds"] == [7]
    assert load_config(path, seed_override=3)["seeds"] == [3]
    monkeypatch.setenv("EDL_SEED", "x")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_env_seed_selects_run(tmp_path, monkeypatch):
    monkeypatch.setenv("EDL_SEED", "5")
    assert main(["train", str(write_config(tmp_path)), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "jensen_gap" / "gamma_0" / "seed_5").is_dir()


def test_failed_cell_exits_nonzero(tmp_path, capsys):
    cfg = write_config(tmp_path, [{"regularizer": "jensen_gap", "gammas": [0, -3]}], epochs=20,
                       clip_norm=None, optimizer={"learning_rate": 0.5})
    assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "FAILED" in err and "gamma_-3" in err


def test_help_lists_flags_and_unknown_flag_is_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--out", "--seed", "--jobs", "--force", "--set", "--epochs", "--lr", "--preset"):
        assert flag in text
    with pytest.raises(SystemExit) as info:
        main(["train", "x.json", "--bogus"])
    assert info.value.code == 2


def test_schema_requires_gamma_zero():
    assert CONFIG_SCHEMA["properties"]["grid"]["items"]["properties"]["gammas"]["contains"] == {"const": 0}


# --- analyze -------------------------------------------------------------------------------


def test_analyze_summary_one_verdict_per_cell(grid_runs, tmp_path):
    out = tmp_path / "rep"
    assert main(["analyze", "--runs", str(grid_runs), "--kind", "summary", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["primary_metric"] == "accuracy"
    cells = summary["accuracy"]["cells"]
    assert len(cells) == 20
    assert {(c["regularizer"], c["gamma"]) for c in cells} == {(r, g) for r in REGS for g in (-0.5, -0.2, 0, 0.5, 1)}
    assert all(c["verdict"] in ("hurts", "neutral", "helps") and c["num_seeds"] == 3 for c in cells)
    assert (out / "summary.csv").read_text().startswith("regularizer,gamma,mean,sem,num_seeds,verdict")
    # reports are not overwritten without --force
    assert main(["analyze", "--runs", str(grid_runs), "--kind", "summary", "--out", str(out)]) == 1
    assert main(["analyze", "--runs", str(grid_runs), "--kind", "summary", "--out", str(out), "--force"]) == 0


def test_analyze_decompose_residuals(grid_runs, tmp_path):
    assert main(["analyze", "--runs", str(grid_runs), "--kind", "decompose", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "decomposition_scatter.csv").read_text().splitlines()
    assert len(lines) == 61
    col = lines[0].split(",").index("residual")
    assert max(float(line.split(",")[col]) for line in lines[1:]) <= 1e-10


def test_analyze_counterfactual_baseline_only(grid_runs, tmp_path):
    runs = str(grid_runs / "jensen_gap" / "gamma_0" / "seed_0")
    assert main(["analyze", "--runs", runs, "--kind", "counterfactual", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "counterfactual_jensen_gap_seed0.csv").read_text().splitlines()
    assert rows[0] == "gamma,gap,density,counterfactual_accuracy"
    assert {r.split(",")[0] for r in rows[1:]} == {"0.0"}
    report = json.loads((tmp_path / "counterfactual.json").read_text())
    assert len(report) == 1 and list(report[0]["fits"]) == ["0.0"]


def test_analyze_counterfactual_grid(grid_runs, tmp_path):
    assert main(["analyze", "--runs", str(grid_runs), "--kind", "counterfactual", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("counterfactual_*_seed*.csv"))) == 12


def test_analyze_pool(grid_runs, tmp_path):
    args = ["analyze", "--runs", str(grid_runs / "*" / "gamma_0"), "--kind", "pool", "--out", str(tmp_path),
            "--ensemble-size", "3", "--num-ensembles", "5"]
    assert main(args) == 0
    assert len((tmp_path / "pool.csv").read_text().splitlines()) == 6


def test_analyze_errors(grid_runs, tmp_path):
    nothing = str(tmp_path / "none")
    assert main(["analyze", "--runs", nothing, "--kind", "summary", "--out", str(tmp_path)]) == 2
    only_nonzero = str(grid_runs / "variance" / "gamma_0.5")
    assert main(["analyze", "--runs", only_nonzero, "--kind", "summary", "--out", str(tmp_path)]) == 2
    # a dump made on another dataset cannot be mixed in
    other = tmp_path / "other"
    cfg = write_config(tmp_path)
    data = json.loads(cfg.read_text())
    data["dataset"]["seed"] = 9
    cfg.write_text(json.dumps(data))
    assert main(["train", str(cfg), "--out", str(other)]) == 0
    mixed = str(tmp_path / "mix*")
    (tmp_path / "mix_a").symlink_to(grid_runs / "jensen_gap" / "gamma_0" / "seed_0")
    (tmp_path / "mix_b").symlink_to(other / "jensen_gap" / "gamma_0" / "seed_0")
    assert main(["analyze", "--runs", mixed, "--kind", "decompose", "--out", str(tmp_path / "r")]) == 2


# --- simulate / gen-data / dump ---------------------------------------------------------------


def test_simulate_geometric(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["simulate", "--mechanism", "geometric", "--s-grid", "0:1:5", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "mechanism,s,jensen_gap,avg_member_nll,ensemble_nll,samples,seed"
    assert len(lines) == 6
    assert float(lines[-1].split(",")[4]) == pytest.approx(math.log(3), abs=1e-9)
    assert main(["simulate", "--mechanism", "geometric", "--out", str(out)]) == 1


def test_simulate_stdout_is_deterministic(capsys):
    assert main(["simulate", "--mechanism", "logit", "--samples", "10", "--seed", "3"]) == 0
    a = capsys.readouterr().out
    assert main(["simulate", "--mechanism", "logit", "--samples", "10", "--seed", "3"]) == 0
    assert capsys.readouterr().out == a
    assert main(["simulate", "--mechanism", "logit", "--samples", "0"]) == 2


def test_gen_data_rows_labels_and_determinism(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["gen-data", "gaussian_mixture", "--n", "100", "--classes", "2", "--out", str(a)]) == 0
    assert main(["gen-data", "gaussian_mixture", "--n", "100", "--classes", "2", "--out", str(b)]) == 0
    ds = load_dataset_csv(a)
    assert len(ds) == 100 and set(ds.labels) == {0, 1}
    assert a.read_bytes() == b.read_bytes()
    assert main(["gen-data", "two_spirals", "--n", "50", "--out", str(a)]) == 1
    assert main(["gen-data", "two_spirals", "--n", "50", "--out", str(a), "--force"]) == 0
    assert len(load_dataset_csv(a)) == 50


def test_gen_data_zero_sigma_is_separable(tmp_path):
    path = tmp_path / "d.csv"
    assert main(["gen-data", "gaussian_mixture", "--n", "90", "--classes", "3", "--sigma", "0",
                 "--out", str(path)]) == 0
    ds = load_dataset_csv(path)
    tree = fit_tree(ds, max_depth=2)
    assert metrics(tree_predict(tree, ds.features, ds.labels))["accuracy"] == 1.0
    direct = gaussian_mixture(90, 3, sigma=0.0, seed=0)
    np.testing.assert_array_equal(direct.features, ds.features)


def test_dump_reexports_checkpoint(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == 0
    run = tmp_path / "o" / "jensen_gap" / "gamma_0" / "seed_0"
    data = tmp_path / "d.csv"
    assert main(["gen-data", "gaussian_mixture", "--n", "60", "--classes", "3", "--sigma", "0.6",
                 "--out", str(data)]) == 0
    out = tmp_path / "p.csv"
    assert main(["dump", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                 "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 1 + 3 * 60 * 3
    assert main(["dump", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                 "--out", str(out)]) == 1
    assert main(["dump", "--checkpoint", str(tmp_path / "missing.json"), "--data", str(data),
                 "--out", str(tmp_path / "q.csv")]) == 1
