"""Positioning measurement reports: train the locator on positioned MDT
reports, then place unpositioned MR reports and compare with k-NN matching.

Run: python demos/03_mr_locator.py
"""
import numpy as np

from arcade import nn
from arcade.simulator import hexagonal_cluster, sample_mdt_reports, sample_mr

env = hexagonal_cluster(seed=1)
reports = sample_mdt_reports(env, 800, seed=1)
train = [(r.position, r.readings) for r in reports]
loc = nn.locator_train(train, env.pcis, env.spec)
print(f"locator trained on {len(train)} MDT reports, {len(env.pcis)} PCIs")

# MR samples carry no position; the simulator keeps the truth aside
mr, hidden = sample_mr(env, 200, 1, seed=11)
fps = np.stack([loc.fingerprint({s.pci: s.rsrp_dbm for s in samples}) for _, samples in mr])
est = loc.locate_m(fps)
true = np.array([env.spec.to_meters(hidden[ue]) for ue, _ in mr])
err = np.hypot(*(est - true).T)

# plain k-NN over the training fingerprints, for scale
fp_tr = np.stack([loc.fingerprint(rd) for _, rd in train])
pos_tr = np.array([env.spec.to_meters(p) for p, _ in train])
d = ((fps[:, None, :] - fp_tr[None]) ** 2).sum(-1)
knn = pos_tr[np.argsort(d, axis=1)[:, :5]].mean(axis=1)
kerr = np.hypot(*(knn - true).T)

print(f"locator  median {np.median(err):6.0f} m   p90 {np.percentile(err, 90):6.0f} m")
print(f"5-NN     median {np.median(kerr):6.0f} m   p90 {np.percentile(kerr, 90):6.0f} m")
