"""Forecast follow-up graphs from baselines and compare selection strategies.

Four strategies pick the k most similar training subjects at baseline; the
prediction at each follow-up is the mean of those subjects' graphs.  A
select-all prediction (the global training mean) is the yardstick.
"""

import numpy as np

from brainevo import evaluation as ev
from brainevo import ggan
from brainevo.cbt import build_cbt
from brainevo.selection import predict_trajectory, top_k
from brainevo.synth import SynthConfig, generate, independent_population

cfg = SynthConfig(seed=2, n_subjects=30, n_r=10)
data = generate(cfg).dataset
cbt = build_cbt([s.graphs[0] for s in independent_population(cfg, 12).trajectories])
model, _ = ggan.train([s.graphs[0] for s in data.train], cbt, ggan.TrainConfig(epochs=40, hidden=12, seed=2))

report = ev.holdout_evaluate(data, cbt, model, k_range=range(2, 8))
for row in report.table_rows():
    print(" | ".join(row))
print("select-all:", np.round(report.extra["select-all"], 6))

# one testing subject in detail
S = ev.select_ours([s.graphs[0] for s in data.train], [s.graphs[0] for s in data.test], cbt, model)
subj = data.test[0]
nbrs = top_k(S, 0, 3)
print(subj.subject_id, "(cluster", subj.label + ") borrows from", [data.train[j].subject_id for j in nbrs],
      [data.train[j].label for j in nbrs])
for t, pred in zip((1, 2), predict_trajectory(data.train, nbrs, [1, 2])):
    print(f"  t{t}: MAE {ev.mae(pred, subj.graphs[t]):.4f}")
