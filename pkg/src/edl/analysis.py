"""Post-hoc analyses over stored ensemble predictions.

* counterfactual accuracy: how the baseline (gamma = 0) ensemble's correctness
  depends on the per-point diversity of an intervened ensemble;
* sweep summaries with the mean +/- 2 SEM hurts / neutral / helps verdicts;
* decomposition scatter tables (diversity vs. average member risk);
* homogeneous / heterogeneous ensemble assembly from a pool of models.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .losses import CrossEntropy, argmax_lowest, decompose
from .simplex import PredictionSet, _atomic_write_text, as_generator, ensemble_average

# --- counterfactual accuracy -------------------------------------------------


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    sd = x.std(ddof=1) if n > 1 else 0.0
    iqr = np.subtract(*np.percentile(x, [75, 25])) if n > 1 else 0.0
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    if not spread > 0:
        return 1e-3 * max(1.0, abs(float(x.mean())))
    return 0.9 * spread * n ** (-0.2)


def gaussian_kde(samples, grid, bandwidth=None) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    h = silverman_bandwidth(samples) if bandwidth is None else float(bandwidth)
    out = np.empty(grid.shape[0])
    step = max(1, 2_000_000 // max(1, samples.size))
    for start in range(0, grid.shape[0], step):
        z = (grid[start:start + step, None] - samples[None, :]) / h
        out[start:start + step] = np.exp(-0.5 * z * z).sum(axis=1)
    return out / (samples.size * h * math.sqrt(2 * math.pi))


@dataclass
class LogisticFit:
    intercept: float
    slope: float
    converged: bool
    degenerate: bool = False  # constant outcome or constant feature: curve is flat

    def predict(self, x):
        z = self.intercept + self.slope * np.asarray(x, dtype=np.float64)
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic sigmoid without overflow

    @property
    def crossing(self) -> float:
        """Feature value where the fitted probability equals 0.5."""
        return -self.intercept / self.slope if self.slope != 0 else math.nan


def fit_logistic_1d(x, y, l2=1e-6, tol=1e-8, max_iter=500) -> LogisticFit:
    """Newton's method on mean log loss + l2/2 * (w^2 + b^2), feature standardised.

    Converged when the gradient's infinity norm is below ``tol``. The L2 term
    keeps the optimum finite on separable data.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rate = y.mean()
    if rate in (0.0, 1.0) or x.std() == 0:
        b = math.log(rate / (1 - rate)) if 0 < rate < 1 else (math.inf if rate == 1 else -math.inf)
        return LogisticFit(b, 0.0, True, degenerate=True)
    mu, sd = x.mean(), x.std()
    A = np.stack([np.ones_like(x), (x - mu) / sd], axis=1)
    theta = np.zeros(2)

    def loss_grad(th):
        z = A @ th
        # log(1 + e^z) - y z, stably
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * th @ th
        p = 1.0 / (1.0 + np.exp(-z))
        return loss, A.T @ (p - y) / x.size + l2 * th, p

    converged = False
    for _ in range(max_iter):
        loss, g, p = loss_grad(theta)
        if np.max(np.abs(g)) < tol:
            converged = True
            break
        H = (A * (p * (1 - p))[:, None]).T @ A / x.size + l2 * np.eye(2)
        step = np.linalg.solve(H, g)
        t = 1.0
        while t > 1e-12:
            new = theta - t * step
            if loss_grad(new)[0] <= loss - 1e-4 * t * (g @ step):
                break
            t *= 0.5
        theta = new
    b0, w0 = theta
    return LogisticFit(float(b0 - w0 * mu / sd), float(w0 / sd), converged)


@dataclass
class CounterfactualReport:
    grid: np.ndarray
    densities: dict  # gamma -> density on grid
    accuracy: dict  # gamma -> counterfactual accuracy on grid
    fits: dict  # gamma -> LogisticFit
    gaps: dict  # gamma -> per-point CE Jensen gap
    baseline_correct: np.ndarray

    def rows(self):
        for g in sorted(self.densities):
            for x, d, a in zip(self.grid, self.densities[g], self.accuracy[g]):
                yield g, float(x), float(d), float(a)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gamma", "gap", "density", "counterfactual_accuracy"])
        for g, x, d, a in self.rows():
            w.writerow([repr(float(g)), repr(x), repr(d), repr(a)])
        return buf.getvalue()


def counterfactual_analysis(baseline: PredictionSet, intervened: dict, grid_size=None,
                            bandwidth=None) -> CounterfactualReport:
    """Per-point diversity densities and counterfactual accuracy curves.

    ``intervened`` maps gamma to the PredictionSet of the ensemble trained
    with that gamma, on the same points in the same order as ``baseline``.
    """
    labels = baseline.require_labels()
    correct = (argmax_lowest(ensemble_average(baseline)) == labels).astype(np.float64)
    gaps, hs = {}, {}
    for g, preds in intervened.items():
        if preds.labels is not None and not np.array_equal(preds.labels, labels):
            raise ValueError(f"gamma={g}: labels differ from the baseline")
        if preds.num_points != baseline.num_points:
            raise ValueError(f"gamma={g}: {preds.num_points} points vs {baseline.num_points} in baseline")
        gaps[g] = decompose(CrossEntropy(), preds.with_labels(labels)).gap
        hs[g] = silverman_bandwidth(gaps[g]) if bandwidth is None else float(bandwidth)

    lo = min(float(gaps[g].min()) - 6 * hs[g] for g in gaps)
    hi = max(float(gaps[g].max()) + 6 * hs[g] for g in gaps)
    if grid_size is None:
        grid_size = int(min(20001, max(512, math.ceil(8 * (hi - lo) / min(hs.values())) + 1)))
    grid = np.linspace(lo, hi, grid_size)

    densities, accuracy, fits = {}, {}, {}
    for g in gaps:
        densities[g] = gaussian_kde(gaps[g], grid, hs[g])
        fit = fit_logistic_1d(gaps[g], correct)
        fits[g] = fit
        if fit.degenerate:
            accuracy[g] = np.full_like(grid, correct.mean())
        else:
            accuracy[g] = fit.predict(grid)
    return CounterfactualReport(grid, densities, accuracy, fits, gaps, correct)


# --- sweep summaries -----------------------------------------------------------

HIGHER_IS_BETTER = {"accuracy": True, "nll": False, "brier": False, "ece": False,
                    "jensen_gap": True, "ensemble_risk": False}


@dataclass
class SweepCell:
    regularizer: str
    gamma: float
    mean: float
    sem: float
    num_seeds: int
    verdict: str


@dataclass
class SweepSummary:
    metric: str
    baseline_mean: float
    baseline_sem: float
    baseline_seeds: int
    cells: list = field(default_factory=list)

    @property
    def band(self):
        return (self.baseline_mean - 2 * self.baseline_sem, self.baseline_mean + 2 * self.baseline_sem)

    def verdicts(self) -> dict:
        return {(c.regularizer, c.gamma): c.verdict for c in self.cells}

    def to_dict(self) -> dict:
        return {"metric": self.metric,
                "baseline": {"mean": self.baseline_mean, "sem": self.baseline_sem,
                             "num_seeds": self.baseline_seeds, "band": list(self.band)},
                "cells": [vars(c) for c in self.cells]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["regularizer", "gamma", "mean", "sem", "num_seeds", "verdict"])
        for c in self.cells:
            w.writerow([c.regularizer, c.gamma, repr(c.mean), repr(c.sem), c.num_seeds, c.verdict])
        return buf.getvalue()


def _sem(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan


def sweep_summary(runs, metric="accuracy", higher_is_better=None) -> SweepSummary:
    """Classify each (regularizer, gamma) cell against the gamma = 0 band.

    ``runs`` is an iterable of mappings with keys ``regularizer``, ``gamma``,
    ``seed`` and ``metrics`` (a dict containing ``metric``). gamma = 0 runs are
    the same training procedure for every regularizer, so they are pooled by
    seed (duplicates of one seed count once) to form the baseline.
    """
    if higher_is_better is None:
        if metric not in HIGHER_IS_BETTER:
            raise ValueError(f"say whether higher {metric!r} is better")
        higher_is_better = HIGHER_IS_BETTER[metric]
    cells = defaultdict(lambda: defaultdict(list))
    for r in runs:
        cells[(str(r["regularizer"]), float(r["gamma"]))][r["seed"]].append(float(r["metrics"][metric]))
    # repeated (regularizer, gamma, seed) runs are averaged first, so duplicates never re-weight a seed
    base_by_seed = defaultdict(list)
    for (reg, gamma), by_seed in cells.items():
        if gamma == 0:
            for s, v in by_seed.items():
                base_by_seed[s].append(float(np.mean(v)))
    if len(base_by_seed) < 2:
        raise ValueError("need gamma = 0 runs for at least two seeds to form the baseline band")
    base = [float(np.mean(v)) for _, v in sorted(base_by_seed.items(), key=lambda kv: str(kv[0]))]
    base_mean, base_sem = float(np.mean(base)), _sem(base)
    lo, hi = base_mean - 2 * base_sem, base_mean + 2 * base_sem

    out = []
    for (reg, gamma) in sorted(cells, key=lambda k: (k[0], k[1])):
        per_seed = [float(np.mean(v)) for _, v in sorted(cells[(reg, gamma)].items(), key=lambda kv: str(kv[0]))]
        mean = float(np.mean(per_seed))
        if higher_is_better:
            verdict = "helps" if mean > hi else "hurts" if mean < lo else "neutral"
        else:
            verdict = "helps" if mean < lo else "hurts" if mean > hi else "neutral"
        out.append(SweepCell(reg, gamma, mean, _sem(per_seed), len(per_seed), verdict))
    return SweepSummary(metric, base_mean, base_sem, len(base), out)


# --- decomposition scatter -----------------------------------------------------

SCATTER_COLUMNS = ["gamma", "regularizer", "seed", "jensen_gap", "avg_member_risk", "ensemble_risk", "residual"]


def decomposition_scatter(runs, loss=None) -> list[dict]:
    """One row per run: (gamma, regularizer, gap, avg member risk, ensemble risk).

    ``runs`` yields (meta, PredictionSet) pairs; ``residual`` is
    |avg - gap - ens| and should be at rounding level.
    """
    loss = loss or CrossEntropy()
    rows = []
    for meta, preds in runs:
        rep = decompose(loss, preds)
        rows.append({"gamma": float(meta.get("gamma", math.nan)),
                     "regularizer": meta.get("regularizer", ""),
                     "seed": meta.get("seed"),
                     "jensen_gap": rep.jensen_gap,
                     "avg_member_risk": rep.avg_member_risk,
                     "ensemble_risk": rep.ensemble_risk,
                     "residual": abs(rep.avg_member_risk - rep.jensen_gap - rep.ensemble_risk)})
    rows.sort(key=lambda r: (r["regularizer"], r["gamma"], str(r["seed"])))
    return rows


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# --- pool assembly -------------------------------------------------------------


@dataclass
class PoolSpec:
    """Pool of single-model predictions, each with a tag (architecture / run identity).

    ``entries`` holds (tag, PredictionSet) pairs; multi-member sets contribute
    one pool entry per member, all with that tag.
    """

    entries: list
    ensemble_size: int = 4
    num_ensembles: int = 1
    mode: str = "homogeneous"  # or "heterogeneous"
    num_quantiles: int = 10

    def __post_init__(self):
        if self.mode not in ("homogeneous", "heterogeneous"):
            raise ValueError(f"unknown pool mode {self.mode!r}")
        if self.ensemble_size < 1 or self.num_ensembles < 1 or self.num_quantiles < 1:
            raise ValueError("ensemble_size, num_ensembles and num_quantiles must be positive")


def _flatten_pool(entries):
    tags, probs, labels, shape = [], [], None, None
    for tag, preds in entries:
        if shape is None:
            shape, labels = preds.probs.shape[1:], preds.labels
        if preds.probs.shape[1:] != shape:
            raise ValueError(f"pool entry {tag!r} has shape {preds.probs.shape[1:]}, expected {shape}")
        if labels is not None and preds.labels is not None and not np.array_equal(labels, preds.labels):
            raise ValueError(f"pool entry {tag!r} has different labels / point order")
        for m in range(preds.num_members):
            tags.append(tag)
            probs.append(preds.probs[m])
    return tags, np.stack(probs), labels


def assemble_from_pool(spec: PoolSpec, rng) -> list[PredictionSet]:
    """Draw ensembles of ``spec.ensemble_size`` members from the pool.

    Homogeneous: all members share one tag. Heterogeneous: members have
    distinct tags and their individual NLLs fall into the same quantile
    bucket of the pool's NLL distribution. Members are drawn without
    replacement within an ensemble.
    """
    gen = as_generator(rng)
    tags, probs, labels = _flatten_pool(spec.entries)
    M = spec.ensemble_size
    by_tag = defaultdict(list)
    for i, t in enumerate(tags):
        by_tag[t].append(i)

    if spec.mode == "homogeneous":
        eligible = sorted(t for t, idx in by_tag.items() if len(idx) >= M)
        if not eligible:
            raise ValueError(f"no tag has {M} models for a homogeneous ensemble")
        choose = lambda: gen.choice(by_tag[eligible[gen.integers(len(eligible))]], M, replace=False)  # noqa: E731
    else:
        if labels is None:
            raise ValueError("heterogeneous assembly needs labels to rank models by NLL")
        nll = np.array([CrossEntropy().values(p, labels).mean() for p in probs])
        edges = np.quantile(nll, np.linspace(0, 1, spec.num_quantiles + 1)[1:-1])
        bucket = np.searchsorted(edges, nll, side="right")
        groups = {}
        for b in np.unique(bucket):
            members = defaultdict(list)
            for i in np.flatnonzero(bucket == b):
                members[tags[i]].append(i)
            if len(members) >= M:
                groups[int(b)] = members
        if not groups:
            raise ValueError(f"no NLL quantile bucket holds models with {M} distinct tags")
        keys = sorted(groups)

        def choose():
            members = groups[keys[gen.integers(len(keys))]]
            chosen_tags = gen.choice(sorted(members), M, replace=False)
            return np.array([gen.choice(members[t]) for t in chosen_tags])

    return [PredictionSet(probs[np.asarray(choose())], labels) for _ in range(spec.num_ensembles)]


def write_report(path, text):
    _atomic_write_text(path, text)


def write_json(path, obj):
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")
