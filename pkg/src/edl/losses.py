"""Losses, ensemble metrics, and the Jensen-gap decomposition of ensemble risk.

For a strictly convex loss ``l`` and members ``f_1..f_M`` with mean ``f``::

    l(f, y) = mean_i l(f_i, y) - [mean_i l(f_i, y) - l(f, y)]

The bracket is the Jensen gap, used throughout as the measure of predictive
diversity. All logs are natural.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .simplex import PredictionSet, _atomic_write_text, ensemble_average, pad_probs


class LossError(ValueError):
    """A loss could not be evaluated (e.g. log of a zero probability)."""


@dataclass(frozen=True)
class CrossEntropy:
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")

    name = "cross_entropy"

    def targets(self, labels, num_classes):
        t = np.zeros(labels.shape + (num_classes,))
        np.put_along_axis(t, labels[..., None], 1.0, axis=-1)
        if self.label_smoothing:
            t = (1.0 - self.label_smoothing) * t + self.label_smoothing / num_classes
        return t

    def values(self, probs, labels):
        """Per-point loss for probs ``(..., C)`` and integer labels ``(...)``."""
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels)
        if self.label_smoothing == 0.0:
            p = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
            _check_positive(p)
            return -np.log(p)
        t = self.targets(labels, probs.shape[-1])
        _check_positive(np.where(t > 0, probs, 1.0), class_axis=True)
        return -np.sum(t * np.log(np.where(t > 0, probs, 1.0)), axis=-1)

    def grad(self, probs, labels):
        """d loss / d probs, same shape as probs."""
        t = self.targets(np.asarray(labels), probs.shape[-1])
        return -t / np.where(t > 0, probs, 1.0)


@dataclass(frozen=True)
class SquaredError:
    name = "squared_error"

    def values(self, probs, labels):
        probs = np.asarray(probs, dtype=np.float64)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, np.asarray(labels)[..., None], 1.0, axis=-1)
        return np.sum((probs - onehot) ** 2, axis=-1)

    def grad(self, probs, labels):
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, np.asarray(labels)[..., None], 1.0, axis=-1)
        return 2.0 * (probs - onehot)


@dataclass(frozen=True)
class Brier(SquaredError):
    """Multiclass Brier score; numerically identical to SquaredError on probabilities."""

    name = "brier"


LossKind = CrossEntropy | SquaredError


def _check_positive(p, class_axis=False):
    bad = ~(p > 0)
    if np.any(bad):
        idx = [int(i) for i in np.argwhere(bad)[0]]
        if class_axis:
            idx = idx[:-1]
        where = f"point {idx[-1]}" if len(idx) == 1 else f"member {idx[0]}, point {idx[-1]}"
        raise LossError(f"cross entropy needs a positive probability on the target class; "
                        f"zero found at {where} (pad predictions first)")


def loss_from_name(name: str, label_smoothing: float = 0.0):
    if name in ("cross_entropy", "ce", "nll"):
        return CrossEntropy(label_smoothing)
    if name in ("squared_error", "mse"):
        return SquaredError()
    if name == "brier":
        return Brier()
    raise ValueError(f"unknown loss {name!r}")


def point_loss(kind, pred, label) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    return float(kind.values(pred[None], np.array([label]))[0])


@dataclass(frozen=True)
class DecompositionReport:
    ensemble_risk: float
    avg_member_risk: float
    jensen_gap: float
    avg_loss: np.ndarray  # per point, mean member loss
    ens_loss: np.ndarray  # per point, loss of the averaged prediction
    gap: np.ndarray  # per point, avg_loss - ens_loss

    @property
    def per_point(self) -> np.ndarray:
        """``(N, 3)`` rows of (member-avg loss, ensemble loss, gap)."""
        return np.stack([self.avg_loss, self.ens_loss, self.gap], axis=1)

    def to_dict(self) -> dict:
        return {"ensemble_risk": self.ensemble_risk,
                "avg_member_risk": self.avg_member_risk,
                "jensen_gap": self.jensen_gap}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def per_point_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["point", "avg_loss", "ens_loss", "gap"])
        for i, (a, e, g) in enumerate(self.per_point):
            w.writerow([i, repr(float(a)), repr(float(e)), repr(float(g))])
        return buf.getvalue()

    def save(self, json_path, csv_path=None):
        _atomic_write_text(json_path, self.to_json() + "\n")
        if csv_path is not None:
            _atomic_write_text(csv_path, self.per_point_csv())


def decompose(kind, preds: PredictionSet) -> DecompositionReport:
    labels = preds.require_labels()
    member = kind.values(preds.probs, np.broadcast_to(labels, preds.probs.shape[:2]))
    avg = member.mean(axis=0)
    ens = kind.values(ensemble_average(preds), labels)
    gap = avg - ens
    return DecompositionReport(
        ensemble_risk=float(ens.mean()),
        avg_member_risk=float(avg.mean()),
        jensen_gap=float(gap.mean()),
        avg_loss=avg, ens_loss=ens, gap=gap,
    )


def correct_class_probs(preds: PredictionSet) -> np.ndarray:
    """``(M, N)`` member probabilities on the labelled class."""
    labels = preds.require_labels()
    idx = np.broadcast_to(labels[None, :, None], (preds.num_members, preds.num_points, 1))
    return np.take_along_axis(preds.probs, idx, axis=-1)[..., 0]


def ce_gap_closed_form(preds: PredictionSet) -> np.ndarray:
    """Per-point cross-entropy Jensen gap written as a KL divergence.

    KL between the uniform distribution over members and the distribution
    that picks member i with probability proportional to its correct-class
    probability.
    """
    p = correct_class_probs(preds)
    _check_positive(p.T)
    M = preds.num_members
    share = p / p.sum(axis=0, keepdims=True)
    return np.sum((1.0 / M) * (math.log(1.0 / M) - np.log(share)), axis=0)


def mse_gap_closed_form(preds: PredictionSet) -> np.ndarray:
    """Per-point squared-error Jensen gap as (M-1)/M times the sample variance."""
    M = preds.num_members
    if M < 2:
        raise ValueError("sample variance needs at least two members")
    var = preds.probs.var(axis=0, ddof=1)
    return ((M - 1) / M) * var.sum(axis=-1)


@dataclass(frozen=True)
class EceConfig:
    num_bins: int = 15

    def __post_init__(self):
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")


def argmax_lowest(probs) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(probs, axis=-1)


def expected_calibration_error(probs, labels, num_bins=15) -> float:
    conf = probs.max(axis=-1)
    correct = (argmax_lowest(probs) == labels).astype(np.float64)
    # bins (k/B, (k+1)/B]; confidence 0 lands in the first bin
    upper = np.arange(1, num_bins + 1) / num_bins
    bins = np.minimum(np.searchsorted(upper, conf, side="left"), num_bins - 1)
    n = conf.shape[0]
    ece = 0.0
    for b in range(num_bins):
        mask = bins == b
        if mask.any():
            ece += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(ece)


def metrics(preds: PredictionSet, ece_cfg: EceConfig = EceConfig()) -> dict:
    """Accuracy, NLL, Brier and ECE of the ensemble-averaged prediction."""
    labels = preds.require_labels()
    fbar = ensemble_average(preds)
    return {
        "accuracy": float(np.mean(argmax_lowest(fbar) == labels)),
        "nll": float(CrossEntropy().values(fbar, labels).mean()),
        "brier": float(Brier().values(fbar, labels).mean()),
        "ece": expected_calibration_error(fbar, labels, ece_cfg.num_bins),
    }


def auxiliary_diversity(preds: PredictionSet, epsilon=1e-10) -> dict:
    """Pairwise correlation, pairwise KL and cosine similarity between members.

    Correlation is NaN (missing) when some member's predictions are constant.
    """
    M = preds.num_members
    if M < 2:
        raise ValueError("auxiliary diversity metrics need at least two members")
    flat = preds.probs.reshape(M, -1)
    pairs = list(combinations(range(M), 2))

    corrs = []
    for i, j in pairs:
        a, b = flat[i] - flat[i].mean(), flat[j] - flat[j].mean()
        den = math.sqrt(float(a @ a) * float(b @ b))
        corrs.append(float(a @ b) / den if den > 0 else math.nan)
    corr = math.nan if any(math.isnan(c) for c in corrs) else float(np.mean(corrs))

    padded = pad_probs(preds.probs, epsilon)
    logp = np.log(padded)
    kls = [np.sum(padded[i] * (logp[i] - logp[j]), axis=-1).mean()
           for i in range(M) for j in range(M) if i != j]

    norms = np.linalg.norm(preds.probs, axis=-1)
    cos = [np.mean(np.sum(preds.probs[i] * preds.probs[j], axis=-1) / (norms[i] * norms[j]))
           for i, j in pairs]
    return {"pairwise_correlation": corr,
            "avg_pairwise_kl": float(np.mean(kls)),
            "avg_cosine_similarity": float(np.mean(cos))}
