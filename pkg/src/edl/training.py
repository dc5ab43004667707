"""Joint gamma-regularized ensemble training and independent member training.

Joint training feeds every member the same minibatch (the regularizer couples
members point by point) and steps each member's own optimizer on the gradient
of ``M * objective``. At gamma = 0 that gradient is exactly each member's own
loss gradient, so joint training reproduces independent training bit for bit
when initialisations and batch order agree.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import decompose
from .models.ensemble import EnsembleModel, init_ensemble, save_checkpoint
from .models.mlp import MlpArchitecture, mlp_backward
from .regularizers import RegularizedObjectiveSpec, batch_objective_grad_logits, objective_terms
from .simplex import PredictionSet, SeededRng, TabularDataset, _atomic_write_text, save_predictions, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"  # "adamw" | "sgd"
    learning_rate: float = 5e-4
    weight_decay: float = 2e-5
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"  # "constant" | "step" | "cosine"
    milestones: tuple = ()
    factor: float = 0.1
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.name not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.schedule not in ("constant", "step", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not (self.learning_rate >= 0):
            raise ValueError("learning_rate must be non-negative")
        if not (0 < self.factor <= 1):
            raise ValueError("schedule factor must be in (0, 1]")
        object.__setattr__(self, "milestones", tuple(self.milestones))

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        lr = self.learning_rate
        if self.schedule == "step":
            return lr * self.factor ** sum(epoch >= m for m in self.milestones)
        if self.schedule == "cosine":
            if epoch < self.warmup_epochs:
                return lr * (epoch + 1) / self.warmup_epochs
            span = max(1, total_epochs - self.warmup_epochs)
            return lr * 0.5 * (1 + math.cos(math.pi * (epoch - self.warmup_epochs) / span))
        return lr


class AdamW:
    """Decoupled weight decay Adam, updating a list of arrays in place."""

    def __init__(self, params, cfg: OptimizerConfig):
        self.params, self.cfg = params, cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr):
        c = self.cfg
        self.t += 1
        bc1, bc2 = 1 - c.beta1**self.t, 1 - c.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if c.weight_decay:
                p -= lr * c.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


class SGD:
    def __init__(self, params, cfg: OptimizerConfig):
        self.params, self.cfg = params, cfg
        self.buf = [np.zeros_like(p) for p in params]

    def step(self, grads, lr):
        c = self.cfg
        for p, g, b in zip(self.params, grads, self.buf):
            d = g + c.weight_decay * p if c.weight_decay else g
            b *= c.momentum
            b += d
            p -= lr * b


def make_optimizer(params, cfg: OptimizerConfig):
    return AdamW(params, cfg) if cfg.name == "adamw" else SGD(params, cfg)


@dataclass(frozen=True)
class TrainRunConfig:
    objective: RegularizedObjectiveSpec = field(default_factory=RegularizedObjectiveSpec)
    num_members: int = 4
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    patience: int | None = 10  # None disables early stopping
    split: tuple = (0.6, 0.2, 0.2)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    clip_norm: float | None | str = "auto"  # "auto": 10 when gamma < -0.9, else off

    def __post_init__(self):
        if self.num_members < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("num_members and batch_size must be >= 1, epochs >= 0")
        split = tuple(float(s) for s in self.split)
        if any(s < 0 for s in split) or abs(sum(split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {split}")
        object.__setattr__(self, "split", split)

    @property
    def effective_clip_norm(self) -> float | None:
        if self.clip_norm == "auto":
            return 10.0 if self.objective.gamma < -0.9 else None
        return self.clip_norm


class TrainingDiverged(RuntimeError):
    """Raised when the objective goes non-finite; ``result`` holds the last finite state."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass
class TrainedEnsemble:
    model: EnsembleModel
    history: list  # one dict per epoch run (per member for independent training)
    best_epoch: int
    stopped_early: bool
    predictions: dict  # split name -> PredictionSet
    config: TrainRunConfig

    def history_csv(self) -> str:
        cols = ["epoch", "objective", "avg_loss", "diversity", "val_metric"]
        if self.history and "member" in self.history[0]:
            cols = ["member"] + cols
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(self.history)
        return buf.getvalue()


def _evaluate(model: EnsembleModel, inputs, labels, spec):
    """Mean objective, avg member loss and diversity on a full split."""
    logits = np.stack([model.forward_inputs(m, inputs[m])[0] for m in range(model.num_members)])
    obj, avg, div, *_ = objective_terms(spec, softmax(logits), labels)
    return float(obj.mean()), float(avg.mean()), float(div.mean())


def _clip(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for member in grads for g in member))
    if total > max_norm:
        scale = max_norm / total
        return [[g * scale for g in member] for member in grads]
    return grads


def _train(model: EnsembleModel, splits, config: TrainRunConfig, batch_rng: SeededRng,
           member_index=None) -> TrainedEnsemble:
    train, val, test = splits
    spec = config.objective
    M = model.num_members
    model = model.copy()
    tr_in = [model.member_inputs(m, train.features) for m in range(M)]
    va_in = [model.member_inputs(m, val.features) for m in range(M)]
    params = [p.arrays() for p in model.members]
    opts = [make_optimizer(params[m], config.optimizer) for m in range(M)]
    gen = batch_rng.generator()
    clip = config.effective_clip_norm
    n = len(train)

    best_val, best_epoch, best_members = math.inf, -1, [p.copy() for p in model.members]
    history, since_best, stopped_early = [], 0, False

    def result(members, stopped):
        final = EnsembleModel(model.arch, members, model.feature_maps, model.seed, dict(model.meta))
        preds = {name: final.predict(d.features, d.labels) for name, d in
                 (("train", train), ("val", val), ("test", test)) if len(d)}
        return TrainedEnsemble(final, history, best_epoch, stopped, preds, config)

    for epoch in range(config.epochs):
        lr = config.optimizer.lr_at(epoch, config.epochs)
        perm = gen.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            y = train.labels[idx]
            outs = [model.forward_inputs(m, tr_in[m][idx]) for m in range(M)]
            try:
                obj, dlogits, _ = batch_objective_grad_logits(
                    spec, np.stack([o[0] for o in outs]), y, member_scale=M)
                if not math.isfinite(obj):
                    raise FloatingPointError("objective is not finite")
            except (FloatingPointError, ValueError) as exc:
                res = result([p.copy() for p in model.members], True)
                raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}", res) from exc
            grads = [mlp_backward(model.arch, model.members[m], outs[m][1], dlogits[m]).arrays()
                     for m in range(M)]
            if clip is not None:
                grads = _clip(grads, clip)
            for m in range(M):
                opts[m].step(grads[m], lr)

        try:
            obj, avg, div = _evaluate(model, tr_in, train.labels, spec)
            val_metric = _evaluate(model, va_in, val.labels, spec)[1] if len(val) else avg
        except (FloatingPointError, ValueError) as exc:
            res = result([p.copy() for p in best_members], True)
            raise TrainingDiverged(f"training diverged after epoch {epoch}: {exc}", res) from exc
        row = {"epoch": epoch, "objective": obj, "avg_loss": avg, "diversity": div,
               "val_metric": val_metric}
        if member_index is not None:
            row["member"] = member_index
        history.append(row)
        if not all(math.isfinite(v) for v in (obj, avg, val_metric)):
            res = result([p.copy() for p in best_members], True)
            raise TrainingDiverged(f"non-finite metrics after epoch {epoch}", res)
        if val_metric < best_val:
            best_val, best_epoch = val_metric, epoch
            best_members = [p.copy() for p in model.members]
            since_best = 0
        else:
            since_best += 1
            if config.patience is not None and since_best >= config.patience:
                stopped_early = True
                break

    if config.epochs == 0 or best_epoch < 0:
        best_members = [p.copy() for p in model.members]
    return result(best_members, stopped_early)


def make_splits(dataset: TabularDataset, fractions, seed=0):
    return dataset.split(fractions, SeededRng(seed).child("split"))


def train_joint(model: EnsembleModel, splits, config: TrainRunConfig) -> TrainedEnsemble:
    """Minimise the batch-mean regularized objective over all members together.

    ``splits`` is (train, val, test). The checkpoint with the lowest validation
    average member loss is kept.
    """
    return _train(model, splits, config, SeededRng(config.seed).child("batches"))


def train_independent(arch: MlpArchitecture, num_members, splits, config: TrainRunConfig,
                      member_seeds=None, batch_seed=None, num_features=None) -> TrainedEnsemble:
    """Train M members separately (no regularizer) and stack them into one ensemble.

    Member m is initialised like ``init_ensemble`` would; its batch order comes
    from ``SeededRng(batch_seed).child("batches")`` if ``batch_seed`` is given
    (shared schedule), otherwise from its own stream.
    """
    single = replace(config, num_members=1,
                     objective=replace(config.objective, gamma=0.0))
    if member_seeds is None:
        # same member streams as init_ensemble(..., num_members) for joint training
        full = init_ensemble(arch.input_dim, arch.num_classes, num_members, config.seed,
                             arch.hidden_layers, num_features=num_features)
    trained, history = [], []
    for m in range(num_members):
        if member_seeds is None:
            member_model = EnsembleModel(full.arch, [full.members[m]],
                                         None if full.feature_maps is None else [full.feature_maps[m]],
                                         config.seed)
        else:
            member_model = init_ensemble(arch.input_dim, arch.num_classes, 1, config.seed,
                                         arch.hidden_layers, num_features=num_features,
                                         member_seeds=[member_seeds[m]])
        if batch_seed is not None:
            brng = SeededRng(batch_seed).child("batches")
        elif member_seeds is not None:
            brng = SeededRng(member_seeds[m]).child("batches")
        else:
            brng = SeededRng(config.seed).child("batches", m)
        res = _train(member_model, splits, single, brng, member_index=m)
        trained.append(res)
        history.extend(res.history)

    model = EnsembleModel(trained[0].model.arch, [t.model.members[0] for t in trained],
                          None if trained[0].model.feature_maps is None
                          else [t.model.feature_maps[0] for t in trained], config.seed)
    train, val, test = splits
    preds = {name: model.predict(d.features, d.labels) for name, d in
             (("train", train), ("val", val), ("test", test)) if len(d)}
    return TrainedEnsemble(model, history, max(t.best_epoch for t in trained),
                           any(t.stopped_early for t in trained), preds, config)


def run_metadata(config: TrainRunConfig, tag="") -> dict:
    spec = config.objective
    return {"gamma": spec.gamma, "regularizer": spec.regularizer.value, "loss": spec.loss.name,
            "label_smoothing": getattr(spec.loss, "label_smoothing", 0.0),
            "num_members": config.num_members, "tag": tag}


def dump_predictions(ensemble, dataset: TabularDataset, path, tag="", **meta):
    """Write the prediction CSV + sidecar for ``dataset`` under ``path``."""
    model = ensemble.model if isinstance(ensemble, TrainedEnsemble) else ensemble
    extra = dict(meta)
    seed = model.seed
    if isinstance(ensemble, TrainedEnsemble):
        extra = {**run_metadata(ensemble.config, tag), **extra}
        seed = ensemble.config.seed
    extra.pop("tag", None)
    preds = model.predict(dataset.features, dataset.labels)
    try:
        return save_predictions(preds, path, seed=seed, tag=tag, **extra)
    except OSError as exc:
        raise OSError(f"failed to write predictions to {path}: {exc}") from exc


def config_to_dict(config: TrainRunConfig) -> dict:
    d = asdict(config)
    spec = config.objective
    d["objective"] = {"loss": spec.loss.name,
                      "label_smoothing": getattr(spec.loss, "label_smoothing", 0.0),
                      "regularizer": spec.regularizer.value, "gamma": spec.gamma}
    d["optimizer"]["milestones"] = list(config.optimizer.milestones)
    d["split"] = list(config.split)
    return d


def write_run_directory(trained: TrainedEnsemble, run_dir, test: TabularDataset | None = None,
                        tag="", extra_config=None):
    """config.json, history.csv, checkpoint.json and per-split prediction dumps."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = config_to_dict(trained.config)
    if extra_config:
        cfg["experiment"] = extra_config
    _atomic_write_text(run_dir / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    _atomic_write_text(run_dir / "history.csv", trained.history_csv())
    save_checkpoint(trained.model, run_dir / "checkpoint.json", **run_metadata(trained.config, tag),
                    best_epoch=trained.best_epoch)
    meta = run_metadata(trained.config, tag)
    meta.pop("tag")
    for name, preds in trained.predictions.items():
        save_predictions(preds, run_dir / f"predictions_{name}.csv", seed=trained.config.seed,
                         tag=tag, split=name, **meta)
    summary = {name: decompose(trained.config.objective.loss, p).to_dict()
               for name, p in trained.predictions.items() if p.labels is not None}
    _atomic_write_text(run_dir / "decomposition.json", json.dumps(summary, indent=2) + "\n")
    return run_dir
