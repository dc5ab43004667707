"""Train small MLP ensembles with the Jensen gap regularizer over a range of gamma.

gamma < 0 rewards diversity, gamma > 0 penalises it. Takes about a minute.
"""

import warnings

import numpy as np

from edl import CrossEntropy, decompose, metrics
from edl.analysis import sweep_summary
from edl.datasets import gaussian_mixture
from edl.models import init_ensemble
from edl.regularizers import RegularizedObjectiveSpec
from edl.training import TrainRunConfig, make_splits, train_joint

warnings.simplefilter("ignore")

splits = make_splits(gaussian_mixture(1000, 3, radius=1.0, sigma=0.7, seed=0), (0.6, 0.2, 0.2), 0)
gammas = (-0.9, -0.5, 0.0, 0.5, 1.0)
runs = []
for gamma in gammas:
    for seed in range(5):
        cfg = TrainRunConfig(RegularizedObjectiveSpec(CrossEntropy(), "jensen_gap", gamma),
                             num_members=4, epochs=60, batch_size=64, seed=seed, patience=10)
        res = train_joint(init_ensemble(2, 3, 4, seed, (32, 32)), splits, cfg)
        test = res.predictions["test"]
        runs.append({"regularizer": "jensen_gap", "gamma": gamma, "seed": seed,
                     "metrics": {**metrics(test), **decompose(CrossEntropy(), test).to_dict()}})

print(" gamma   test gap   accuracy")
for gamma in gammas:
    cell = [r["metrics"] for r in runs if r["gamma"] == gamma]
    print(f"{gamma:6.1f} {np.mean([m['jensen_gap'] for m in cell]):10.4f} {np.mean([m['accuracy'] for m in cell]):10.4f}")

summary = sweep_summary(runs, "accuracy")
lo, hi = summary.band
print(f"\nbaseline accuracy band [{lo:.4f}, {hi:.4f}]")
for c in summary.cells:
    print(f"  gamma {c.gamma:5.1f}: {c.mean:.4f} -> {c.verdict}")
