"""Ensembles of M members sharing one architecture, plus JSON checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..simplex import PredictionSet, SeededRng, _atomic_write_text, softmax
from .mlp import MlpArchitecture, MlpParameters, init_mlp, mlp_forward
from .rff import RffFeatureMap, make_rff_map, rff_transform

CHECKPOINT_FORMAT = "edl-ensemble-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class EnsembleModel:
    """M trainable heads. For RFF members the head is a linear layer on frozen features."""

    arch: MlpArchitecture
    members: list
    feature_maps: list | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_members(self) -> int:
        return len(self.members)

    @property
    def kind(self) -> str:
        return "mlp" if self.feature_maps is None else "rff"

    def member_inputs(self, m, X):
        if self.feature_maps is None:
            return np.asarray(X, dtype=np.float64)
        return rff_transform(self.feature_maps[m], X)

    def forward(self, m, X):
        return mlp_forward(self.arch, self.members[m], self.member_inputs(m, X))

    def forward_inputs(self, m, Xm):
        """Forward pass of member m on already-transformed inputs."""
        return mlp_forward(self.arch, self.members[m], Xm)

    def logits(self, X) -> np.ndarray:
        return np.stack([self.forward(m, X)[0] for m in range(self.num_members)])

    def predict(self, X, labels=None) -> PredictionSet:
        return PredictionSet(softmax(self.logits(X)), labels)

    def copy(self) -> EnsembleModel:
        return EnsembleModel(self.arch, [p.copy() for p in self.members],
                             self.feature_maps, self.seed, dict(self.meta))

    def flat_parameters(self) -> np.ndarray:
        return np.stack([p.flatten() for p in self.members])


def member_rng(seed, m) -> SeededRng:
    return SeededRng(seed).child("member", m)


def init_member(arch: MlpArchitecture, rng: SeededRng, num_features=None, input_dim=None):
    """One member's (params, feature map or None) from its own stream."""
    gen = rng.generator()
    fmap = None
    if num_features is not None:
        fmap = make_rff_map(input_dim, num_features, gen)
    return init_mlp(arch, gen), fmap


def init_ensemble(input_dim, num_classes, num_members, seed, hidden_layers=(32, 32),
                  num_features=None, member_seeds=None) -> EnsembleModel:
    """MLP ensemble, or an RFF ensemble when ``num_features`` is given.

    Member m draws from ``SeededRng(member_seeds[m])`` when given, else from
    ``SeededRng(seed).child("member", m)``.
    """
    if num_features is not None:
        arch = MlpArchitecture(num_features, (), num_classes)
    else:
        arch = MlpArchitecture(input_dim, hidden_layers, num_classes)
    members, fmaps = [], []
    for m in range(num_members):
        rng = SeededRng(member_seeds[m]) if member_seeds is not None else member_rng(seed, m)
        params, fmap = init_member(arch, rng, num_features, input_dim)
        members.append(params)
        fmaps.append(fmap)
    return EnsembleModel(arch, members, fmaps if num_features is not None else None, seed)


def checkpoint_dict(model: EnsembleModel, **meta) -> dict:
    members = []
    for m, params in enumerate(model.members):
        entry = {"params": params.flatten().tolist()}
        if model.feature_maps is not None:
            fmap = model.feature_maps[m]
            entry["rff"] = {"projection": fmap.projection.ravel().tolist(),
                            "phase": fmap.phase.tolist(),
                            "input_dim": fmap.input_dim}
        members.append(entry)
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "architecture": {"input_dim": model.arch.input_dim,
                         "hidden_layers": list(model.arch.hidden_layers),
                         "num_classes": model.arch.num_classes},
        "seed": model.seed,
        "meta": {**model.meta, **meta},
        "members": members,
    }


def model_from_checkpoint(doc: dict) -> EnsembleModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not an ensemble checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    a = doc["architecture"]
    arch = MlpArchitecture(a["input_dim"], tuple(a["hidden_layers"]), a["num_classes"])
    members, fmaps = [], []
    for entry in doc["members"]:
        members.append(MlpParameters.unflatten(arch, entry["params"]))
        if "rff" in entry:
            r = entry["rff"]
            W = np.asarray(r["projection"], dtype=np.float64).reshape(-1, r["input_dim"])
            fmaps.append(RffFeatureMap(W, np.asarray(r["phase"], dtype=np.float64)))
    return EnsembleModel(arch, members, fmaps if doc["kind"] == "rff" else None,
                         doc.get("seed"), dict(doc.get("meta", {})))


def save_checkpoint(model: EnsembleModel, path, **meta):
    # json writes floats with repr(), which round-trips float64 exactly
    _atomic_write_text(Path(path), json.dumps(checkpoint_dict(model, **meta)) + "\n")


def load_checkpoint(path) -> EnsembleModel:
    return model_from_checkpoint(json.loads(Path(path).read_text()))
