"""Train a small graph GAN normaliser and inspect its embeddings.

The normaliser learns to map any subject's graph towards the template; its
two encoding layers give one number per ROI, which is the embedding used to
compare subjects.
"""

import numpy as np

from brainevo import ggan
from brainevo.cbt import build_cbt
from brainevo.synth import SynthConfig, generate, independent_population

cfg = SynthConfig(seed=1, n_subjects=24, n_r=10)
data = generate(cfg).dataset
cbt = build_cbt([s.graphs[0] for s in independent_population(cfg, 12).trajectories])

baselines = [s.graphs[0] for s in data.train]
config = ggan.TrainConfig(epochs=40, hidden=12, disc_hidden=8, seed=1)
model, trace = ggan.train(baselines, cbt, config)

for r in trace[::10] + [trace[-1]]:
    print(f"epoch {r.epoch:3d}  L_D {r.loss_d:.4f}  L_N {r.loss_n:.3f}  L1 {r.loss_l1:.4f}")

Z = ggan.embed_many(model, baselines)
z_cbt = ggan.embed(model, cbt.template)
print("embedding matrix:", Z.shape)
labels = np.array([s.label for s in data.train])
for c in sorted(set(labels)):
    r = np.abs(Z[labels == c] - z_cbt)
    print(f"cluster {c}: mean residual norm {np.linalg.norm(r, axis=1).mean():.3f}")

print("D(template) = %.3f" % ggan.discriminate(model, cbt.template, cbt))
