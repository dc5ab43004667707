"""Ensemble risk = average member risk - Jensen gap, checked on random predictions."""

import numpy as np

from edl import CrossEntropy, PredictionSet, SquaredError, decompose
from edl.losses import ce_gap_closed_form, mse_gap_closed_form
from edl.simplex import softmax

rng = np.random.default_rng(0)

# 4 members, 8 points, 3 classes
probs = softmax(2.0 * rng.normal(size=(4, 8, 3)))
labels = rng.integers(0, 3, size=8)
preds = PredictionSet(probs, labels)

for loss in (CrossEntropy(), SquaredError()):
    r = decompose(loss, preds)
    print(f"{loss.name:>14}: avg {r.avg_member_risk:.4f} - gap {r.jensen_gap:.4f} = ens {r.ensemble_risk:.4f}"
          f"  (residual {abs(r.avg_member_risk - r.jensen_gap - r.ensemble_risk):.1e})")

# per point, the CE gap is a mean KL to the averaged prediction and the MSE gap a scaled variance
print("CE gap per point  ", np.round(ce_gap_closed_form(preds), 4))
print("MSE gap per point ", np.round(mse_gap_closed_form(preds), 4))

# identical members have no gap at all
same = PredictionSet(np.repeat(probs[:1], 4, axis=0), labels)
print("identical members gap:", decompose(CrossEntropy(), same).jensen_gap)
