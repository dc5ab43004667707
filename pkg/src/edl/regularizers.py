"""Diversity regularizers and the gamma-weighted ensemble objective.

Per datapoint the objective is::

    mean_i loss(f_i, y) + gamma * D(f_1, ..., f_M)

so gamma < 0 rewards diversity and gamma > 0 penalises it. With the Jensen
gap as ``D`` this equals ``loss(fbar, y) + (gamma + 1) * gap``.

All functions work on batches: member probabilities ``(M, B, C)`` and labels
``(B,)``. Gradients are exact (including the derivative of the max in the
variance regularizer, routed to the first maximising member).
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .losses import CrossEntropy
from .simplex import DEFAULT_EPSILON, softmax


class RegularizerKind(str, enum.Enum):
    VARIANCE = "variance"
    JSD_ONE_VS_ALL = "jsd_1va"
    JSD_UNIFORM = "jsd_uniform"
    JENSEN_GAP = "jensen_gap"


@dataclass(frozen=True)
class RegularizedObjectiveSpec:
    loss: object = field(default_factory=CrossEntropy)
    regularizer: RegularizerKind = RegularizerKind.JENSEN_GAP
    gamma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "regularizer", RegularizerKind(self.regularizer))
        if not math.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.regularizer is RegularizerKind.JENSEN_GAP and self.gamma <= -1:
            warnings.warn(f"gamma={self.gamma} <= -1 with the Jensen gap regularizer: "
                          "the objective no longer bounds the ensemble loss and can diverge",
                          stacklevel=2)


def _as_batch(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 2:
        probs, labels = probs[:, None, :], labels.reshape(1)
    return probs, labels.astype(np.int64)


def _pad(probs, eps):
    C = probs.shape[-1]
    return (probs + eps) / (1.0 + C * eps), 1.0 / (1.0 + C * eps)


def _entropy(p):
    return -np.sum(p * np.log(p), axis=-1)


def _js_pair(a, b):
    m = 0.5 * (a + b)
    return _entropy(m) - 0.5 * _entropy(a) - 0.5 * _entropy(b)


def _variance(probs, labels):
    M = probs.shape[0]
    py = np.take_along_axis(probs, labels[None, :, None], axis=-1)[..., 0]
    mx = py.max(axis=0)
    if np.any(~(mx > 0)):
        raise ValueError("variance regularizer: every member gives the true class zero probability")
    dev = py - py.mean(axis=0)
    num = np.sum(dev**2, axis=0)
    value = num / (2.0 * (M - 1) * mx)
    gy = dev / ((M - 1) * mx)
    # d/d max of 1/max, shared equally by tied arg-max members so the
    # gradient stays permutation equivariant; exact when the max is unique
    at_max = py == mx
    gy -= at_max * (value / mx / at_max.sum(axis=0))
    grad = np.zeros_like(probs)
    np.put_along_axis(grad, labels[None, :, None], gy[..., None], axis=-1)
    return value, grad


def _jsd_one_vs_all(probs, eps):
    M = probs.shape[0]
    p, scale = _pad(probs, eps)
    rest = (p.sum(axis=0, keepdims=True) - p) / (M - 1)
    m = 0.5 * (p + rest)
    value = _js_pair(p, rest).mean(axis=0)
    # dJS/da = 0.5 log(a/m); dJS/db = 0.5 log(b/m)
    d_self = 0.5 * np.log(p / m) / M
    d_rest = 0.5 * np.log(rest / m) / (M * (M - 1))
    grad = d_self + (d_rest.sum(axis=0, keepdims=True) - d_rest)
    return value, grad * scale


def _jsd_uniform(probs, eps):
    p, scale = _pad(probs, eps)
    pbar = p.mean(axis=0)
    value = _entropy(pbar) - _entropy(p).mean(axis=0)
    grad = np.log(p / pbar) / p.shape[0]
    return value, grad * scale


def _jensen_gap(probs, labels, loss):
    M = probs.shape[0]
    member = loss.values(probs, np.broadcast_to(labels, probs.shape[:2]))
    pbar = probs.mean(axis=0)
    value = member.mean(axis=0) - loss.values(pbar, labels)
    grad = (loss.grad(probs, np.broadcast_to(labels, probs.shape[:2]))
            - loss.grad(pbar, labels)[None]) / M
    return value, grad


def diversity_terms(kind, probs, labels, loss=None, epsilon=DEFAULT_EPSILON):
    """Diversity value ``(B,)`` and its gradient w.r.t. member probabilities ``(M, B, C)``.

    A single member has no diversity: value and gradient are zero.
    """
    kind = RegularizerKind(kind)
    probs, labels = _as_batch(probs, labels)
    if probs.shape[0] == 1:
        return np.zeros(probs.shape[1]), np.zeros_like(probs)
    if kind is RegularizerKind.VARIANCE:
        return _variance(probs, labels)
    if kind is RegularizerKind.JSD_ONE_VS_ALL:
        return _jsd_one_vs_all(probs, epsilon)
    if kind is RegularizerKind.JSD_UNIFORM:
        return _jsd_uniform(probs, epsilon)
    return _jensen_gap(probs, labels, loss if loss is not None else CrossEntropy())


def diversity_value(kind, probs, label, loss=None, epsilon=DEFAULT_EPSILON) -> float:
    """Diversity of ``M`` member predictions ``(M, C)`` at a single point."""
    value, _ = diversity_terms(kind, np.asarray(probs)[:, None, :], np.array([label]), loss, epsilon)
    return float(value[0])


def member_loss_terms(loss, probs, labels):
    """Per-member losses ``(M, B)`` and their probability gradients ``(M, B, C)``."""
    lab = np.broadcast_to(labels, probs.shape[:2])
    return loss.values(probs, lab), loss.grad(probs, lab)


def objective_terms(spec: RegularizedObjectiveSpec, probs, labels):
    """Return per-point (objective, avg member loss, diversity) and the gradient pieces.

    The gradient is returned as two arrays so callers can weight them
    without reassociating floating point sums: ``member_grad`` is d loss_i /
    d f_i (unscaled) and ``div_grad`` is dD / d f_i.
    """
    probs, labels = _as_batch(probs, labels)
    member, member_grad = member_loss_terms(spec.loss, probs, labels)
    avg = member.mean(axis=0)
    if spec.gamma == 0:
        # diversity is still reported for logging, but carries no gradient
        div = diversity_terms(spec.regularizer, probs, labels, spec.loss)[0]
        return avg, avg, div, member_grad, None
    div, div_grad = diversity_terms(spec.regularizer, probs, labels, spec.loss)
    return avg + spec.gamma * div, avg, div, member_grad, div_grad


def objective_value(spec: RegularizedObjectiveSpec, probs, label) -> float:
    """Objective at one point for member predictions ``(M, C)``."""
    obj, *_ = objective_terms(spec, np.asarray(probs)[:, None, :], np.array([label]))
    return float(obj[0])


def softmax_backward(probs, grad_probs):
    """Chain d/d probs through a softmax along the last axis."""
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=-1, keepdims=True))


def batch_objective_grad_logits(spec: RegularizedObjectiveSpec, logits, labels, member_scale=None):
    """Batch-mean objective and its gradient w.r.t. member logits ``(M, B, C)``.

    ``member_scale`` multiplies the whole objective; the trainer passes ``M``
    so that, at gamma = 0, each member receives exactly the gradient of its
    own loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    M, B, _ = logits.shape
    probs = softmax(logits)
    obj, avg, div, member_grad, div_grad = objective_terms(spec, probs, labels)
    if member_scale is None:
        gp = member_grad / M
        if div_grad is not None:
            gp = gp + spec.gamma * div_grad
    else:
        gp = member_grad * (member_scale / M) if member_scale != M else member_grad
        if div_grad is not None:
            gp = gp + (member_scale * spec.gamma) * div_grad
    grad = softmax_backward(probs, gp) / B
    if not np.all(np.isfinite(grad)):
        m, b, c = np.argwhere(~np.isfinite(grad))[0]
        raise FloatingPointError(f"non-finite objective gradient at member {m}, point {b}, class {c}")
    return float(obj.mean()), grad, {"objective": obj, "avg_loss": avg, "diversity": div}


def objective_gradient(spec: RegularizedObjectiveSpec, logits, label) -> np.ndarray:
    """Gradient of the one-point objective w.r.t. member logits ``(M, C)``."""
    _, grad, _ = batch_objective_grad_logits(spec, np.asarray(logits)[:, None, :], np.array([label]))
    return grad[:, 0, :]
