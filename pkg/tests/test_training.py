import json
import math
import warnings

import numpy as np
import pytest

from edl.datasets import gaussian_mixture, two_spirals
from edl.losses import CrossEntropy, decompose, metrics
from edl.models import init_ensemble, load_checkpoint
from edl.regularizers import RegularizedObjectiveSpec
from edl.simplex import load_predictions
from edl.training import (SGD, AdamW, OptimizerConfig, TrainingDiverged, TrainRunConfig, dump_predictions,
                          make_splits, train_independent, train_joint, write_run_directory)


@pytest.fixture(scope="module")
def toy_splits():
    ds = gaussian_mixture(300, 2, radius=1.0, sigma=0.7, seed=3)
    return make_splits(ds, (0.6, 0.2, 0.2), 0)


def cfg(gamma=0.0, reg="jensen_gap", **kw):
    base = dict(num_members=3, epochs=4, batch_size=32, seed=0, patience=None)
    base.update(kw)
    return TrainRunConfig(RegularizedObjectiveSpec(CrossEntropy(), reg, gamma), **base)


def model_for(splits, M=3, seed=0, hidden=(8,)):
    tr = splits[0]
    return init_ensemble(tr.num_features, tr.num_classes, M, seed, hidden)


# --- optimizer configs ------------------------------------------------------------------


def test_optimizer_config_validation_and_schedules():
    with pytest.raises(ValueError):
        OptimizerConfig(name="rmsprop")
    with pytest.raises(ValueError):
        OptimizerConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(factor=0.0)
    step = OptimizerConfig(learning_rate=1.0, schedule="step", milestones=(2, 4), factor=0.5)
    assert [step.lr_at(e, 6) for e in range(6)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]
    cos = OptimizerConfig(learning_rate=2.0, schedule="cosine", warmup_epochs=2)
    assert cos.lr_at(0, 10) == pytest.approx(1.0)
    assert cos.lr_at(2, 10) == pytest.approx(2.0)
    assert cos.lr_at(6, 10) == pytest.approx(1.0)
    assert OptimizerConfig().lr_at(50, 100) == 5e-4


def test_adamw_first_step_closed_form():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, -0.1])
    c = OptimizerConfig(learning_rate=0.1, weight_decay=0.01)
    AdamW([p], c).step([g], 0.1)
    # first Adam step moves each coordinate by lr * sign(g) (bias-corrected m / sqrt(v))
    want = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + c.eps)
    np.testing.assert_allclose(p, want, atol=1e-12)


def test_sgd_momentum_closed_form():
    p = np.array([1.0])
    opt = SGD([p], OptimizerConfig(name="sgd", learning_rate=0.1, momentum=0.9, weight_decay=0.0))
    opt.step([np.array([1.0])], 0.1)
    opt.step([np.array([1.0])], 0.1)
    assert p[0] == pytest.approx(1.0 - 0.1 - 0.1 * 1.9)


def test_run_config_validation():
    with pytest.raises(ValueError):
        TrainRunConfig(split=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        TrainRunConfig(num_members=0)
    assert cfg(-0.95).effective_clip_norm == 10.0
    assert cfg(-0.5).effective_clip_norm is None
    assert TrainRunConfig().num_members == 4


# --- joint training ---------------------------------------------------------------------


def test_zero_learning_rate_keeps_parameters(toy_splits):
    model = model_for(toy_splits)
    res = train_joint(model, toy_splits, cfg(0.5, epochs=1, optimizer=OptimizerConfig(learning_rate=0.0)))
    assert np.array_equal(res.model.flat_parameters(), model.flat_parameters())


def test_joint_training_is_deterministic(toy_splits):
    a = train_joint(model_for(toy_splits), toy_splits, cfg(-0.5))
    b = train_joint(model_for(toy_splits), toy_splits, cfg(-0.5))
    assert np.array_equal(a.model.flat_parameters(), b.model.flat_parameters())
    assert a.history == b.history
    assert np.array_equal(a.predictions["test"].probs, b.predictions["test"].probs)


def test_gamma_zero_joint_equals_independent():
    ds = gaussian_mixture(240, 3, radius=1.0, sigma=0.6, seed=1)
    splits = make_splits(ds, (0.8, 0.0, 0.2), 0)  # no validation split: keep the final epoch
    c = cfg(0.0, epochs=3, num_members=3)
    joint = train_joint(model_for(splits, M=3, hidden=(8, 8)), splits, c)
    indep = train_independent(joint.model.arch, 3, splits, c, batch_seed=c.seed)
    assert joint.best_epoch == 2
    assert np.array_equal(joint.model.flat_parameters(), indep.model.flat_parameters())


def test_negative_gamma_increases_test_gap():
    ds = gaussian_mixture(400, 2, radius=1.0, sigma=0.8, seed=0)
    splits = make_splits(ds, (0.6, 0.2, 0.2), 0)
    gaps = {}
    for g in (-0.5, 0.0):
        res = train_joint(model_for(splits, M=4, hidden=(16, 16)), splits,
                          cfg(g, num_members=4, epochs=30, optimizer=OptimizerConfig(learning_rate=5e-3)))
        gaps[g] = decompose(CrossEntropy(), res.predictions["test"]).jensen_gap
    assert gaps[-0.5] > gaps[0.0]


def test_history_and_early_stopping(toy_splits):
    c = cfg(0.0, epochs=60, patience=2, optimizer=OptimizerConfig(learning_rate=0.05))
    res = train_joint(model_for(toy_splits), toy_splits, c)
    assert len(res.history) <= 60
    assert [h["epoch"] for h in res.history] == list(range(len(res.history)))
    best = min(h["val_metric"] for h in res.history)
    assert res.history[res.best_epoch]["val_metric"] == best
    val = res.predictions["val"]
    avg_member = decompose(CrossEntropy(), val).avg_member_risk
    assert avg_member == pytest.approx(best, rel=1e-10)
    if res.stopped_early:
        assert len(res.history) == res.best_epoch + 1 + 2  # best epoch, then `patience` stale epochs
    assert res.history_csv().splitlines()[0] == "epoch,objective,avg_loss,diversity,val_metric"


def test_divergence_aborts_with_finite_state(toy_splits):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        c = cfg(-3.0, epochs=20, clip_norm=None, optimizer=OptimizerConfig(learning_rate=0.5))
        with pytest.raises(TrainingDiverged) as info:
            train_joint(model_for(toy_splits), toy_splits, c)
    res = info.value.result
    assert np.all(np.isfinite(res.model.flat_parameters()))


@pytest.mark.parametrize("reg", ["variance", "jsd_1va", "jsd_uniform", "jensen_gap"])
def test_every_regularizer_trains(toy_splits, reg):
    res = train_joint(model_for(toy_splits), toy_splits, cfg(-0.5, reg=reg, epochs=2))
    assert np.all(np.isfinite([h["objective"] for h in res.history]))


def test_rff_members_train(toy_splits):
    tr = toy_splits[0]
    model = init_ensemble(tr.num_features, 2, 3, seed=0, num_features=32)
    res = train_joint(model, toy_splits, cfg(0.0, epochs=3, optimizer=OptimizerConfig(learning_rate=0.05)))
    assert res.model.kind == "rff"
    assert metrics(res.predictions["test"])["accuracy"] > 0.5


# --- independent training -----------------------------------------------------------------


def test_independent_single_member(toy_splits):
    arch = model_for(toy_splits).arch
    res = train_independent(arch, 1, toy_splits, cfg(0.0, num_members=1))
    assert res.model.num_members == 1
    assert {h["member"] for h in res.history} == {0}


def test_independent_same_seed_identical(toy_splits):
    arch = model_for(toy_splits).arch
    res = train_independent(arch, 2, toy_splits, cfg(0.0, num_members=2), member_seeds=[5, 5])
    assert np.array_equal(res.model.members[0].flatten(), res.model.members[1].flatten())


def test_independent_ensemble_is_diverse():
    ds = two_spirals(300, 2, noise=0.1, seed=0)
    splits = make_splits(ds, (0.6, 0.2, 0.2), 0)
    arch = model_for(splits).arch
    res = train_independent(arch, 4, splits, cfg(0.0, num_members=4, epochs=5))
    assert decompose(CrossEntropy(), res.predictions["test"]).jensen_gap > 0


# --- dumps and run directories ---------------------------------------------------------------


def test_dump_round_trip(tmp_path):
    ds = gaussian_mixture(100, 3, seed=2)
    splits = make_splits(ds, (0.6, 0.2, 0.2), 0)
    res = train_joint(init_ensemble(2, 3, 4, 0, (8,)), splits, cfg(-0.5, num_members=4, epochs=2))
    dump_predictions(res, ds, tmp_path / "p.csv", tag="mlp:smaller")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert len(lines) - 1 == 4 * 100 * 3
    preds, meta = load_predictions(tmp_path / "p.csv")
    assert meta["gamma"] == -0.5 and meta["regularizer"] == "jensen_gap" and meta["seed"] == 0
    want = res.model.predict(ds.features, ds.labels)
    assert decompose(CrossEntropy(), preds).to_dict() == decompose(CrossEntropy(), want).to_dict()
    assert metrics(preds) == metrics(want)


def test_dump_reports_path_on_io_error(tmp_path):
    ds = gaussian_mixture(10, 2, seed=0)
    model = init_ensemble(2, 2, 2, 0, (4,))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        dump_predictions(model, ds, blocker / "p.csv")


def test_run_directory_contents(tmp_path, toy_splits):
    res = train_joint(model_for(toy_splits), toy_splits, cfg(0.5, epochs=2))
    run = write_run_directory(res, tmp_path / "run", tag="t")
    names = {p.name for p in run.iterdir()}
    assert {"config.json", "history.csv", "checkpoint.json", "decomposition.json",
            "predictions_test.csv", "predictions_test.json"} <= names
    conf = json.loads((run / "config.json").read_text())
    assert conf["objective"]["gamma"] == 0.5
    back = load_checkpoint(run / "checkpoint.json")
    assert np.array_equal(back.flat_parameters(), res.model.flat_parameters())
    assert math.isfinite(json.loads((run / "decomposition.json").read_text())["test"]["jensen_gap"])
