"""Start from three perfect members and add diversity: the ensemble only gets worse."""

import warnings

from edl.simlab import Dirichlet, DiversitySweepSpec, Geometric, LogitNoise, run_sweep

warnings.simplefilter("ignore")  # the anchored Dirichlet clamps zero concentrations at s = 0

grid = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)
for mech in (Geometric(), LogitNoise(), Dirichlet()):
    rows = run_sweep(DiversitySweepSpec(mech, grid, num_members=3, num_classes=3, num_samples=200), seed=0)
    print(f"\n{mech.name}")
    print("     s      gap   avg NLL   ens NLL")
    for r in rows:
        print(f"  {r.s:4.2f} {r.jensen_gap:8.4f} {r.avg_member_nll:9.4f} {r.ensemble_nll:9.4f}")
