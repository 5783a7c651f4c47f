"""Whole-cluster diagnosis: every cell is extrapolated, modelled by a small
network, and scored. The injected overshooter should top the ranking.

Run: python demos/02_cluster_diagnosis.py [seed]
"""
import sys
import time

from arcade.grid import ingest
from arcade.pipeline import analyze
from arcade.simulator import hexagonal_cluster, sample_mdt

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
env = hexagonal_cluster(seed=seed)
grid = ingest(env.spec, sample_mdt(env, 800, seed))

t0 = time.perf_counter()
result = analyze(grid)
print(f"analysis took {time.perf_counter() - t0:.1f} s")

rep = result.report
print(f"{'pci':>4} {'CI':>6} {'OI':>6} {'ISI':>6} {'IAX':>6} {'CQualI':>7}  flags  score")
for pci in rep.ranking:
    c = rep.cell(pci)
    flags = ("O" if c.overshooter else "-") + ("F" if c.fragmented else "-")
    print(f"{c.pci:>4} {c.ci:6.3f} {c.oi:6.3f} {c.isi:6.3f} {c.iax:6.3f} {c.cquali:7.3f}  {flags:>5}  {c.score:.3f}")

print("ranking:", rep.ranking)
print("coverage matrix row of", rep.ranking[0], [round(v, 2) for v in rep.matrix[sorted(env.pcis).index(rep.ranking[0])]])
