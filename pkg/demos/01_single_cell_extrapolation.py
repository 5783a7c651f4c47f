"""Sparse MDT samples of one cell -> labelled regions -> dense GP field.

Run: python demos/01_single_cell_extrapolation.py
"""
from collections import Counter

import numpy as np

from arcade.extrapolation import extrapolate_cell
from arcade.grid import field_of, field_to_array, ingest
from arcade.simulator import ground_truth_fields, hexagonal_cluster, sample_mdt

env = hexagonal_cluster(seed=0)          # 7 sites, PCI 101 overshoots into a 3-4 km ring
pci = 101
grid = ingest(env.spec, sample_mdt(env, 800, seed=0))
field = field_of(grid, pci)
print(f"{len(field)} of {env.spec.rows * env.spec.cols} elements carry a sample for PCI {pci}")

ex = extrapolate_cell(field, env.spec)
print("labels:", dict(Counter(lab.name for lab in ex.labels.values())))
print("training set:", len(ex.augmented.values), "points, lengthscale", ex.model.hyper.lengthscale_m, "m")

truth = ground_truth_fields(env)[pci]
serv = truth >= -110.0
sparse = field_to_array(field, env.spec)
err = (ex.values - truth)[serv]
print(f"GP RMSE over the serviceable area: {np.sqrt(np.mean(err ** 2)):.2f} dB")

# coarse ASCII map: '#' serviceable estimate, '.' not, 'o' sampled
for r in range(env.spec.rows - 1, -1, -5):
    print("".join("o" if not np.isnan(sparse[r, c]) and ex.values[r, c] >= -110 else
                  "#" if ex.values[r, c] >= -110 else "." for c in range(0, env.spec.cols, 2)))
