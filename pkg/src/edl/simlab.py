"""Toy simulations: inject diversity into a perfect prediction and trace the decomposition.

Three mechanisms are indexed by a scale ``s`` in [0, 1], with ``s = 0`` the
undiversified (perfect, up to padding) prediction:

* ``Geometric``: member i is (1 - s) e_y + s e_{y+i}; deterministic.
* ``LogitNoise``: member i is softmax(logit_scale * e_y + noise_i), noise ~ N(0, s I).
* ``Dirichlet``: members drawn i.i.d. from a sparse Dirichlet concentrated on
  e_y at s = 0 and spreading mass to the other classes as s grows.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .losses import CrossEntropy
from .simplex import PaddingPolicy, SeededRng, as_generator, pad_probs, softmax

ALPHA_FLOOR = 1e-8


# --- samplers ----------------------------------------------------------------


def _log_gamma_shape_ge1(shape, gen):
    """log of Gamma(shape, 1) draws for shape >= 1, Marsaglia & Tsang (2000)."""
    orig = np.shape(shape)
    shape = np.asarray(shape, dtype=np.float64).ravel()
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(shape)
    todo = np.ones(shape.shape, dtype=bool)
    while todo.any():
        n = int(todo.sum())
        x = gen.standard_normal(n)
        u = gen.random(n)
        v = (1.0 + c[todo] * x) ** 3
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            accept = ok & (np.log(u) < 0.5 * x * x + d[todo] - d[todo] * v + d[todo] * np.log(v))
        idx = np.flatnonzero(todo)[accept]
        out[idx] = np.log(d[todo][accept]) + np.log(v[accept])
        todo[idx] = False
    return out.reshape(orig)


def sample_log_gamma(shape, gen):
    """log Gamma(shape, 1) for any shape > 0.

    Shapes below 1 use the boost G(a) = G(a + 1) * U^(1/a), kept in log space
    so tiny shapes do not underflow to an exact zero before normalisation.
    """
    shape = np.asarray(shape, dtype=np.float64)
    if np.any(~(shape > 0)):
        raise ValueError("gamma shape must be positive")
    small = shape < 1
    out = _log_gamma_shape_ge1(np.where(small, shape + 1.0, shape), gen)
    if small.any():
        u = gen.random(int(small.sum()))
        # 1 - u lies in (0, 1], so its log is finite
        out[small] += np.log1p(-u) / shape[small]
    return out


def sample_dirichlet(alpha, gen, size=1):
    """``size`` draws from Dir(alpha), shape ``(size, K)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    logg = sample_log_gamma(np.broadcast_to(alpha, (size, alpha.size)).copy(), gen)
    logg -= logg.max(axis=1, keepdims=True)
    g = np.exp(logg)
    return g / g.sum(axis=1, keepdims=True)


# --- mechanisms --------------------------------------------------------------


@dataclass(frozen=True)
class Geometric:
    name = "geometric"
    stochastic = False


@dataclass(frozen=True)
class LogitNoise:
    logit_scale: float = 10.0
    name = "logit"
    stochastic = True

    def __post_init__(self):
        if not self.logit_scale > 0:
            raise ValueError("logit_scale must be positive")


@dataclass(frozen=True)
class Dirichlet:
    """Concentration ``scale * [1 - s, s/(C-1), ...]`` on the correct class first.

    ``anchored=False`` switches to ``scale * [s, (1-s)/(C-1), ...]``, which
    puts the perfect prediction at s = 1 instead of s = 0.
    """

    concentration_scale: float = 0.1
    anchored: bool = True
    name = "dirichlet"
    stochastic = True

    def __post_init__(self):
        if not self.concentration_scale > 0:
            raise ValueError("concentration_scale must be positive")

    def alpha(self, s, num_classes, correct_class):
        on, off = (1.0 - s, s) if self.anchored else (s, 1.0 - s)
        a = np.full(num_classes, off / (num_classes - 1))
        a[correct_class] = on
        return self.concentration_scale * a


MECHANISMS = {"geometric": Geometric, "logit": LogitNoise, "dirichlet": Dirichlet}


@dataclass(frozen=True)
class DiversitySweepSpec:
    mechanism: object = field(default_factory=Geometric)
    s_grid: tuple = tuple(np.linspace(0.0, 1.0, 21))
    num_members: int = 3
    num_classes: int = 3
    correct_class: int = 0
    num_samples: int = 100
    padding: PaddingPolicy = field(default_factory=PaddingPolicy)

    def __post_init__(self):
        grid = tuple(float(s) for s in self.s_grid)
        if any(not (0.0 <= s <= 1.0) for s in grid):
            raise ValueError("s values must lie in [0, 1]")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if not (0 <= self.correct_class < self.num_classes):
            raise ValueError("correct_class out of range")
        self.padding.check(self.num_classes)
        object.__setattr__(self, "s_grid", grid)


def generate_point(mechanism, s, spec: DiversitySweepSpec, rng) -> np.ndarray:
    """Member predictions ``(M, C)`` for one draw at scale ``s`` (padded)."""
    M, C, y = spec.num_members, spec.num_classes, spec.correct_class
    if isinstance(mechanism, Geometric):
        if M > C:
            raise ValueError(f"geometric mechanism needs M <= C, got M={M}, C={C}")
        eye = np.eye(C)
        probs = np.stack([(1 - s) * eye[y] + s * eye[(y + i) % C] for i in range(M)])
    elif isinstance(mechanism, LogitNoise):
        gen = as_generator(rng)
        base = mechanism.logit_scale * np.eye(C)[y]
        probs = softmax(base + math.sqrt(s) * gen.standard_normal((M, C)))
    elif isinstance(mechanism, Dirichlet):
        alpha = mechanism.alpha(s, C, y)
        if np.any(alpha <= 0):
            warnings.warn(f"Dirichlet concentration has zero entries at s={s}; "
                          f"clamped to {ALPHA_FLOOR}", stacklevel=2)
            alpha = np.maximum(alpha, ALPHA_FLOOR)
        probs = sample_dirichlet(alpha, as_generator(rng), size=M)
    else:
        raise TypeError(f"unknown mechanism {mechanism!r}")
    return pad_probs(probs, spec.padding.epsilon)


@dataclass
class SweepRow:
    s: float
    jensen_gap: float
    avg_member_nll: float
    ensemble_nll: float
    samples: int
    # standard errors of the means over samples (0 for deterministic rows)
    jensen_gap_sem: float = 0.0
    avg_member_nll_sem: float = 0.0
    ensemble_nll_sem: float = 0.0


def _point_terms(probs, y):
    ce = CrossEntropy()
    labels = np.full(probs.shape[0], y)
    avg = float(ce.values(probs, labels).mean())
    ens = float(ce.values(probs.mean(axis=0), np.array(y)))
    return avg - ens, avg, ens


def run_sweep(spec: DiversitySweepSpec, seed=0) -> list[SweepRow]:
    """Mean (gap, avg member NLL, ensemble NLL) at each s, in grid order sorted by s.

    Each s cell draws from its own stream ``SeededRng(seed).child(mechanism, index)``.
    """
    mech = spec.mechanism
    n = spec.num_samples if mech.stochastic else 1
    rows = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for k, s in sorted(enumerate(spec.s_grid), key=lambda t: t[1]):
            gen = SeededRng(seed).child(mech.name, k).generator()
            vals = np.array([_point_terms(generate_point(mech, s, spec, gen), spec.correct_class)
                             for _ in range(n)])
            means = vals.mean(axis=0)
            sems = vals.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(3)
            rows.append(SweepRow(s, *map(float, means), n, *map(float, sems)))
    if caught:
        # one flag per sweep instead of one per draw
        warnings.warn(f"{mech.name} sweep: {caught[0].message} (and {len(caught) - 1} similar)",
                      stacklevel=2)
    return rows


SWEEP_COLUMNS = ["mechanism", "s", "jensen_gap", "avg_member_nll", "ensemble_nll", "samples", "seed"]


def sweep_csv(rows, mechanism_name, seed) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([mechanism_name, repr(r.s), repr(r.jensen_gap), repr(r.avg_member_nll),
                    repr(r.ensemble_nll), r.samples, seed])
    return buf.getvalue()
