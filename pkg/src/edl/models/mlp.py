"""Fully connected ReLU networks with hand-written reverse mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..simplex import as_generator

PRESETS = {
    "smaller": (32, 32),
    "small": (64, 64),
    "big": (512,) * 8,
    "bigger": (1024,) * 8,
}


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.input_dim < 1 or self.num_classes < 1 or any(w < 1 for w in self.hidden_layers):
            raise ValueError(f"all layer widths must be >= 1: {self}")

    @property
    def widths(self) -> tuple:
        return (self.input_dim, *self.hidden_layers, self.num_classes)

    @property
    def shapes(self) -> list[tuple]:
        w = self.widths
        return [(w[i], w[i + 1]) for i in range(len(w) - 1)]

    @classmethod
    def preset(cls, name, input_dim, num_classes):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(input_dim, PRESETS[name], num_classes)


@dataclass
class MlpParameters:
    weights: list
    biases: list

    def arrays(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...]; views, so in-place updates stick."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> MlpParameters:
        return MlpParameters([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def unflatten(cls, arch: MlpArchitecture, flat) -> MlpParameters:
        flat = np.asarray(flat, dtype=np.float64)
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in arch.shapes:
            weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            biases.append(flat[pos:pos + fan_out].copy())
            pos += fan_out
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")
        return cls(weights, biases)

    def check(self, arch: MlpArchitecture):
        got = [W.shape for W in self.weights]
        if got != arch.shapes or [b.shape for b in self.biases] != [(s[1],) for s in arch.shapes]:
            raise ValueError(f"parameter shapes {got} do not match architecture {arch.shapes}")


def init_mlp(arch: MlpArchitecture, rng) -> MlpParameters:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    gen = as_generator(rng)
    weights = [gen.standard_normal((i, o)) * np.sqrt(2.0 / i) for i, o in arch.shapes]
    biases = [np.zeros(o) for _, o in arch.shapes]
    return MlpParameters(weights, biases)


@dataclass
class MlpCache:
    arch: MlpArchitecture
    inputs: list  # input to each affine layer
    preacts: list  # pre-activation of each hidden layer
    param_ids: tuple


def mlp_forward(arch: MlpArchitecture, params: MlpParameters, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"expected inputs of shape (N, {arch.input_dim}), got {X.shape}")
    params.check(arch)
    inputs, preacts = [], []
    h = X
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ W + b
        if k == last:
            return z, MlpCache(arch, inputs, preacts, tuple(id(W) for W in params.weights))
        preacts.append(z)
        h = np.maximum(z, 0.0)


def mlp_backward(arch: MlpArchitecture, params: MlpParameters, cache: MlpCache, dlogits) -> MlpParameters:
    """Parameter gradients given d objective / d logits."""
    if cache.arch != arch or cache.param_ids != tuple(id(W) for W in params.weights):
        raise ValueError("stale cache: it was produced for a different network")
    dz = np.asarray(dlogits, dtype=np.float64)
    if dz.shape != (cache.inputs[0].shape[0], arch.num_classes):
        raise ValueError(f"dlogits shape {dz.shape} does not match the cached forward pass")
    n_layers = len(params.weights)
    dW, db = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        dW[k] = cache.inputs[k].T @ dz
        db[k] = dz.sum(axis=0)
        if k > 0:
            dz = (dz @ params.weights[k].T) * (cache.preacts[k - 1] > 0)
    return MlpParameters(dW, db)


def mlp_logits(arch, params, X) -> np.ndarray:
    return mlp_forward(arch, params, X)[0]
