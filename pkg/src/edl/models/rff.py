"""Random Fourier feature classifiers: frozen cos(Wx + b) features, linear softmax head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..simplex import PredictionSet, SeededRng, TabularDataset, as_generator, softmax


@dataclass(frozen=True)
class RffFeatureMap:
    projection: np.ndarray  # (num_features, F)
    phase: np.ndarray  # (num_features,)

    def __post_init__(self):
        W = np.array(self.projection, dtype=np.float64)
        b = np.array(self.phase, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ValueError(f"projection {W.shape} and phase {b.shape} do not match")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "projection", W)
        object.__setattr__(self, "phase", b)

    @property
    def num_features(self) -> int:
        return self.projection.shape[0]

    @property
    def input_dim(self) -> int:
        return self.projection.shape[1]


def make_rff_map(input_dim: int, num_features: int, rng) -> RffFeatureMap:
    """W ~ N(0, 1/num_features) entrywise, b ~ Uniform[0, 2 pi]."""
    if num_features < 1:
        raise ValueError("num_features must be positive")
    gen = as_generator(rng)
    W = gen.standard_normal((num_features, input_dim)) / np.sqrt(num_features)
    b = gen.uniform(0.0, 2.0 * np.pi, size=num_features)
    return RffFeatureMap(W, b)


def rff_transform(fmap: RffFeatureMap, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != fmap.input_dim:
        raise ValueError(f"expected inputs of shape (N, {fmap.input_dim}), got {X.shape}")
    return np.cos(X @ fmap.projection.T + fmap.phase)


@dataclass
class RffClassifier:
    fmap: RffFeatureMap
    weights: np.ndarray  # (num_features, C)
    bias: np.ndarray  # (C,)
    converged: bool = False
    iterations: int = 0

    def logits(self, X):
        return rff_transform(self.fmap, X) @ self.weights + self.bias

    def predict_proba(self, X):
        return softmax(self.logits(X))


def _logreg_loss_grad(Phi, Y, W, b, l2):
    N = Phi.shape[0]
    P = softmax(Phi @ W + b)
    loss = -np.sum(Y * np.log(np.clip(P, 1e-300, None))) / N + 0.5 * l2 * np.sum(W * W)
    G = (P - Y) / N
    return loss, Phi.T @ G + l2 * W, G.sum(axis=0)


def fit_softmax_regression(Phi, labels, num_classes, l2=1e-3, tol=1e-6, max_iter=20000):
    """Full-batch accelerated gradient descent on L2-penalised multinomial log loss.

    The step is 1/L with L = ||Phi||_2^2 / N + l2 (the softmax Hessian is
    bounded by the identity). Stops when the gradient's 2-norm is below tol.
    Returns (weights, bias, converged, iterations).
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    N, D = Phi.shape
    Y = np.eye(num_classes)[labels]
    design = np.hstack([Phi, np.ones((N, 1))])
    lipschitz = np.linalg.norm(design, 2) ** 2 / N + l2
    step = 1.0 / lipschitz
    W, b = np.zeros((D, num_classes)), np.zeros(num_classes)
    W_prev, b_prev = W, b
    for it in range(1, max_iter + 1):
        mom = (it - 1) / (it + 2)
        VW, Vb = W + mom * (W - W_prev), b + mom * (b - b_prev)
        _, gW, gb = _logreg_loss_grad(Phi, Y, VW, Vb, l2)
        W_prev, b_prev = W, b
        W, b = VW - step * gW, Vb - step * gb
        if it % 10 == 0:
            _, gW, gb = _logreg_loss_grad(Phi, Y, W, b, l2)
            if np.sqrt(np.sum(gW**2) + np.sum(gb**2)) < tol:
                return W, b, True, it
    return W, b, False, max_iter


def fit_rff_classifier(dataset: TabularDataset, num_features, rng, l2=1e-3, tol=1e-6, max_iter=20000):
    fmap = make_rff_map(dataset.num_features, num_features, rng)
    Phi = rff_transform(fmap, dataset.features)
    W, b, ok, it = fit_softmax_regression(Phi, dataset.labels, dataset.num_classes, l2, tol, max_iter)
    return RffClassifier(fmap, W, b, ok, it)


def fit_rff_ensemble(dataset: TabularDataset, num_members, num_features, seed, bootstrap=True, **kw):
    """Bagged ensemble: member m gets its own feature map and (optionally) a bootstrap resample."""
    members = []
    root = SeededRng(seed)
    for m in range(num_members):
        gen = root.child("rff", m).generator()
        data = dataset
        if bootstrap:
            data = dataset.subset(gen.integers(0, len(dataset), size=len(dataset)))
        members.append(fit_rff_classifier(data, num_features, gen, **kw))
    return members


def rff_ensemble_predict(members, X, labels=None) -> PredictionSet:
    return PredictionSet(np.stack([m.predict_proba(X) for m in members]), labels)
