"""Build a template graph from a small population and look at where it came from."""

import numpy as np

from brainevo.cbt import build_cbt, cumulative_strength, pairwise_distances
from brainevo.synth import SynthConfig, independent_population

cfg = SynthConfig(seed=3, n_r=8)
pop = independent_population(cfg, n_c=9)
graphs = [s.graphs[0] for s in pop.trajectories]
print("population:", len(graphs), "subjects,", graphs[0].n_r, "ROIs")

# every connection gets the value of the subject closest to everyone else there
H = pairwise_distances(graphs)
M = cumulative_strength(H)
print("summed distances at connection (0, 1):", np.round(M[0, 1], 3))

cbt = build_cbt(graphs, [s.subject_id for s in pop.trajectories])
print("chosen subject at (0, 1):", cbt.source_ids[cbt.argmin[0, 1]])

# the template is stitched together from many subjects
picked, counts = np.unique(cbt.argmin[np.triu_indices(8, 1)], return_counts=True)
for k, c in zip(picked, counts):
    print(f"  {cbt.source_ids[k]} supplies {c} connections")

w = cbt.template.weights
print("template symmetric:", np.array_equal(w, w.T), " diagonal zero:", not np.diag(w).any())
