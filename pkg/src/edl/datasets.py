"""Seeded synthetic tabular datasets."""

from __future__ import annotations

import numpy as np

from .simplex import SeededRng, TabularDataset


def _balanced_labels(n, num_classes, gen):
    return gen.permutation(np.arange(n) % num_classes)


def gaussian_mixture(n=1000, num_classes=3, radius=1.0, sigma=0.5, seed=0, dim=2) -> TabularDataset:
    """Class means evenly spaced on a circle of ``radius`` in the first two
    coordinates; isotropic noise of std ``sigma`` on every coordinate."""
    if dim < 2:
        raise ValueError("gaussian_mixture needs dim >= 2")
    gen = SeededRng(seed).child("gaussian_mixture").generator()
    y = _balanced_labels(n, num_classes, gen)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0], means[:, 1] = radius * np.cos(angles), radius * np.sin(angles)
    X = means[y] + sigma * gen.standard_normal((n, dim))
    return TabularDataset(X, y, num_classes)


def two_spirals(n=1000, num_classes=2, turns=1.5, noise=0.1, seed=0) -> TabularDataset:
    """Interleaved Archimedean spirals, one arm per class, rotated by 2 pi / K."""
    gen = SeededRng(seed).child("two_spirals").generator()
    y = _balanced_labels(n, num_classes, gen)
    t = np.sqrt(gen.uniform(0.0, 1.0, n)) * turns * 2 * np.pi
    angle = t + 2 * np.pi * y / num_classes
    r = t / (turns * 2 * np.pi)
    X = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    X += noise * gen.standard_normal(X.shape)
    return TabularDataset(X, y, num_classes)


GENERATORS = {"gaussian_mixture": gaussian_mixture, "two_spirals": two_spirals}
