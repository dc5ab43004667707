"""Probability-simplex containers, padding, softmax, seeded RNG and datasets.

Everything downstream consumes a :class:`PredictionSet`: an ``(M, N, C)``
float64 array of member probabilities with optional integer labels.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIMPLEX_ATOL = 1e-9
DEFAULT_EPSILON = 1e-10


def check_simplex(probs, atol=SIMPLEX_ATOL, what="probabilities"):
    """Raise ValueError unless every row along the last axis is on the simplex."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] < 2:
        raise ValueError(f"{what}: need at least 2 classes, got {probs.shape[-1]}")
    if not np.all(np.isfinite(probs)):
        raise ValueError(f"{what}: non-finite entries")
    if np.any(probs < 0):
        raise ValueError(f"{what}: negative entries")
    sums = probs.sum(axis=-1)
    bad = np.abs(sums - 1.0) > atol
    if np.any(bad):
        where = np.argwhere(bad)[0]
        raise ValueError(f"{what}: row {tuple(where)} sums to {sums[tuple(where)]!r}")
    return probs


@dataclass(frozen=True)
class PredictionSet:
    """Member probabilities of shape ``(M, N, C)`` plus optional labels ``(N,)``."""

    probs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim == 2:
            probs = probs[None]
        if probs.ndim != 3:
            raise ValueError(f"probs must be (M, N, C), got shape {probs.shape}")
        if probs.shape[0] < 1 or probs.shape[1] < 1:
            raise ValueError("need at least one member and one point")
        check_simplex(probs)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if self.labels is not None:
            labels = np.array(self.labels)
            if labels.shape != (probs.shape[1],):
                raise ValueError(f"labels shape {labels.shape} != ({probs.shape[1]},)")
            if not np.issubdtype(labels.dtype, np.integer):
                if not np.all(labels == np.round(labels)):
                    raise ValueError("labels must be integers")
            labels = labels.astype(np.int64)
            if np.any(labels < 0) or np.any(labels >= probs.shape[2]):
                raise ValueError(f"labels must lie in [0, {probs.shape[2]})")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def num_members(self) -> int:
        return self.probs.shape[0]

    @property
    def num_points(self) -> int:
        return self.probs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("this operation needs labels on the PredictionSet")
        return self.labels

    def members(self, idx) -> PredictionSet:
        """Sub-ensemble made of the members at ``idx``."""
        idx = np.atleast_1d(idx)
        return PredictionSet(self.probs[idx], self.labels)

    def with_labels(self, labels) -> PredictionSet:
        return PredictionSet(self.probs, labels)


def ensemble_average(preds: PredictionSet) -> np.ndarray:
    """Arithmetic mean of member probabilities, shape ``(N, C)``."""
    if preds.num_members == 1:
        return preds.probs[0].copy()
    return preds.probs.mean(axis=0)


@dataclass(frozen=True)
class PaddingPolicy:
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be a finite non-negative number, got {self.epsilon}")

    def check(self, num_classes: int):
        if self.epsilon >= 1.0 / num_classes:
            raise ValueError(f"epsilon={self.epsilon} must be below 1/C = {1.0 / num_classes}")


def pad_probs(probs, epsilon=DEFAULT_EPSILON):
    """Map each probability p to (p + eps) / (1 + C * eps) along the last axis."""
    probs = np.asarray(probs, dtype=np.float64)
    num_classes = probs.shape[-1]
    PaddingPolicy(epsilon).check(num_classes)
    if epsilon == 0:
        return probs.copy()
    return (probs + epsilon) / (1.0 + num_classes * epsilon)


def pad_and_renormalize(preds: PredictionSet, policy: PaddingPolicy = PaddingPolicy()) -> PredictionSet:
    return PredictionSet(pad_probs(preds.probs, policy.epsilon), preds.labels)


def softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax: non-finite logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class SeededRng:
    """A seed plus a path of child keys, resolved to a Philox stream.

    Philox is counter based, and numpy's ``SeedSequence`` spawn keys give
    independent sub-streams, so ``SeededRng(7).child(2)`` is the same stream
    no matter which other children were created first.
    """

    seed: int
    key: tuple = ()

    ALGORITHM = "numpy.random.Philox(SeedSequence(seed, spawn_key=key))"

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")

    def child(self, *keys) -> SeededRng:
        return SeededRng(self.seed, self.key + tuple(_key_to_int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))

    def derive_seed(self) -> int:
        """A 64-bit integer seed derived from this stream's position."""
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.key)
        return int(ss.generate_state(1, dtype=np.uint64)[0])


def _key_to_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("child keys must be non-negative")
        return int(k)
    # strings hash to a stable 32-bit integer (not Python's salted hash)
    data = str(k).encode()
    h = 2166136261
    for byte in data:
        h = ((h ^ byte) * 16777619) & 0xFFFFFFFF
    return h


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, SeededRng):
        return rng.generator()
    return SeededRng(int(rng)).generator()


@dataclass(frozen=True)
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int = field(default=0)

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.labels).astype(np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"features {X.shape} and labels {y.shape} do not line up")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        num_classes = self.num_classes or (int(y.max()) + 1 if y.size else 0)
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", int(num_classes))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> TabularDataset:
        return TabularDataset(self.features[idx], self.labels[idx], self.num_classes)

    def split(self, fractions, rng) -> list[TabularDataset]:
        """Shuffle once and cut into consecutive pieces of the given fractions."""
        fractions = np.asarray(fractions, dtype=np.float64)
        if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
        perm = as_generator(rng).permutation(len(self))
        cuts = np.round(np.cumsum(fractions)[:-1] * len(self)).astype(int)
        return [self.subset(np.sort(part)) for part in np.split(perm, cuts)]


# --- file formats -----------------------------------------------------------


def _atomic_write_text(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset_csv(dataset: TabularDataset, path):
    """Header ``f0..f{F-1},label``; floats written with round-trip precision."""
    lines = [",".join([f"f{j}" for j in range(dataset.num_features)] + ["label"])]
    for x, y in zip(dataset.features, dataset.labels):
        lines.append(",".join([repr(float(v)) for v in x] + [str(int(y))]))
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_dataset_csv(path, num_classes=0) -> TabularDataset:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    header, body = rows[0], [r for r in rows[1:] if r]
    if not header or header[-1] != "label":
        raise ValueError(f"{path}: last column must be 'label'")
    expected = [f"f{j}" for j in range(len(header) - 1)]
    if header[:-1] != expected:
        raise ValueError(f"{path}: feature columns must be named {expected}")
    X = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), -1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return TabularDataset(X, y, num_classes)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_predictions(preds: PredictionSet, path, seed=None, tag="", **meta):
    """Write the ``member,point,class,prob`` CSV plus a JSON sidecar.

    The sidecar always carries ``M, N, C, seed, tag``; labels and any extra
    keyword metadata (gamma, regularizer, ...) are stored alongside.
    """
    path = Path(path)
    M, N, C = preds.probs.shape
    m, n, c = np.meshgrid(np.arange(M), np.arange(N), np.arange(C), indexing="ij")
    lines = ["member,point,class,prob"]
    for mi, ni, ci, p in zip(m.ravel(), n.ravel(), c.ravel(), preds.probs.ravel()):
        lines.append(f"{mi},{ni},{ci},{float(p)!r}")
    _atomic_write_text(path, "\n".join(lines) + "\n")
    side = {"M": M, "N": N, "C": C, "seed": seed, "tag": tag}
    side.update(meta)
    if preds.labels is not None:
        side["labels"] = [int(v) for v in preds.labels]
    _atomic_write_text(sidecar_path(path), json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def load_predictions(path) -> tuple[PredictionSet, dict]:
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
    except OSError as exc:
        raise OSError(f"cannot read prediction dump {path}: {exc}") from exc
    if header != ["member", "point", "class", "prob"]:
        raise ValueError(f"{path}: unexpected header {header}")
    M, N, C = meta["M"], meta["N"], meta["C"]
    if len(rows) != M * N * C:
        raise ValueError(f"{path}: expected {M * N * C} rows, found {len(rows)}")
    probs = np.full((M, N, C), np.nan)
    for r in rows:
        probs[int(r[0]), int(r[1]), int(r[2])] = float(r[3])
    if np.isnan(probs).any():
        raise ValueError(f"{path}: missing (member, point, class) entries")
    labels = meta.get("labels")
    return PredictionSet(probs, None if labels is None else np.asarray(labels)), meta
