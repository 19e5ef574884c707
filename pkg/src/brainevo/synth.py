"""Seeded synthetic longitudinal brain-graph populations.

Subjects belong to one of ``n_clusters`` groups.  Each group has a random
centroid graph and a smooth drift field; a subject starts at its centroid
plus symmetric Gaussian noise and moves by ``t * delta`` times its group's
drift field at timepoint ``t``.  Subjects sharing a group therefore share
their trajectory shape.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from brainevo.errors import ContractError
from brainevo.graph import BrainGraph, LongitudinalDataset, SubjectTrajectory

CENTROID_RANGE = (0.15, 0.85)


@dataclass
class SynthConfig:
    seed: int = 0
    n_subjects: int = 75
    n_r: int = 35
    n_timepoints: int = 3
    n_clusters: int = 3
    sigma: float = 0.02
    delta: float = 0.03
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ContractError(f"need at least one cluster, got {self.n_clusters}")
        if self.n_subjects < self.n_clusters:
            raise ContractError(f"{self.n_subjects} subjects cannot populate {self.n_clusters} clusters")
        if self.n_r < 2:
            raise ContractError(f"n_r must be >= 2, got {self.n_r}")
        if self.n_timepoints < 1:
            raise ContractError(f"n_timepoints must be >= 1, got {self.n_timepoints}")
        if self.sigma < 0 or self.delta < 0:
            raise ContractError("sigma and delta must be non-negative")
        if not 0.0 < self.train_fraction < 1.0:
            raise ContractError(f"train fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass
class Population:
    """A generated dataset plus the ground truth behind it."""

    dataset: LongitudinalDataset
    clusters: np.ndarray  # cluster index per subject, dataset order
    centroids: np.ndarray  # n_clusters x n_r x n_r
    drift: np.ndarray  # n_clusters x n_r x n_r, entries in [-1, 1]
    clamped: int  # number of generated entries clipped into [0, 1]


def _streams(seed: int) -> list:
    # fixed roles: centroids, drift, assignment, subject noise, split, independent noise
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)]


def _sym_noise(rng: np.random.Generator, n_r: int, sigma: float) -> np.ndarray:
    iu = np.triu_indices(n_r, k=1)
    out = np.zeros((n_r, n_r))
    out[iu] = rng.normal(0.0, sigma, len(iu[0])) if sigma > 0 else 0.0
    return out + out.T


def _ground_truth(config: SynthConfig, streams: list) -> tuple[np.ndarray, np.ndarray]:
    n_r, c = config.n_r, config.n_clusters
    iu = np.triu_indices(n_r, k=1)
    centroids = np.zeros((c, n_r, n_r))
    for k in range(c):
        centroids[k][iu] = streams[0].uniform(*CENTROID_RANGE, len(iu[0]))
        centroids[k] = centroids[k] + centroids[k].T
    # smooth over ROI index: half-sum of a single sine period with a per-cluster phase
    phase = streams[1].uniform(0.0, 2 * np.pi, c)
    idx = np.arange(n_r) / n_r
    drift = np.zeros((c, n_r, n_r))
    for k in range(c):
        u = np.sin(2 * np.pi * idx + phase[k])
        drift[k] = 0.5 * (u[:, None] + u[None, :])
        np.fill_diagonal(drift[k], 0.0)
    return centroids, drift


def _subject_graphs(base: np.ndarray, drift: np.ndarray, config: SynthConfig) -> tuple[list, int]:
    graphs, clamped = [], 0
    for t in range(config.n_timepoints):
        w = base + t * config.delta * drift
        np.fill_diagonal(w, 0.0)
        clamped += int(np.count_nonzero((w < 0.0) | (w > 1.0)))
        graphs.append(BrainGraph(np.clip(w, 0.0, 1.0)))
    return graphs, clamped


def generate(config: SynthConfig, split_subjects: bool = True) -> Population:
    """Generate a population; with ``split_subjects`` a stratified train/test split is applied."""
    streams = _streams(config.seed)
    centroids, drift = _ground_truth(config, streams)
    c = config.n_clusters
    clusters = streams[2].permutation(np.arange(config.n_subjects) % c)
    trajectories, clamped = [], 0
    for s, k in enumerate(clusters):
        base = centroids[k] + _sym_noise(streams[3], config.n_r, config.sigma)
        graphs, n_clamped = _subject_graphs(base, drift[k], config)
        clamped += n_clamped
        trajectories.append(SubjectTrajectory(f"s{s:03d}", graphs, "train", f"c{k}"))
    meta = {f"config.{k}": v for k, v in asdict(config).items()}
    meta["clamped"] = clamped
    dataset = LongitudinalDataset(trajectories, tuple(f"t{t}" for t in range(config.n_timepoints)), meta)
    if split_subjects:
        dataset = split(dataset, config.train_fraction, streams[4])
    return Population(dataset, clusters, centroids, drift, clamped)


def independent_population(config: SynthConfig, n_c: int = 23) -> LongitudinalDataset:
    """Baseline-only subjects drawn from the same clusters, for building a template.

    Noise comes from a stream separate from the main population, so these
    subjects never coincide with generated training or testing subjects.
    """
    if n_c < 2:
        raise ContractError(f"an independent population needs at least 2 subjects, got {n_c}")
    streams = _streams(config.seed)
    centroids, _ = _ground_truth(config, streams)
    rng = streams[5]
    clusters = rng.permutation(np.arange(n_c) % config.n_clusters)
    trajectories = []
    for s, k in enumerate(clusters):
        w = centroids[k] + _sym_noise(rng, config.n_r, config.sigma)
        np.fill_diagonal(w, 0.0)
        trajectories.append(SubjectTrajectory(f"ind{s:03d}", (BrainGraph(np.clip(w, 0.0, 1.0)),), "train", f"c{k}"))
    meta = {f"config.{k}": v for k, v in asdict(config).items()}
    meta["n_c"] = n_c
    return LongitudinalDataset(trajectories, ("t0",), meta)


def split(dataset: LongitudinalDataset, train_fraction: float, seed) -> LongitudinalDataset:
    """Seeded train/test split, stratified by subject label.

    The number of training subjects is ``round(train_fraction * total)``;
    it is shared out between labels by largest remainder, and every label
    keeps at least one training subject when that is possible.  ``seed`` is
    an int or a numpy Generator.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    subjects = dataset.trajectories
    labels = [s.label for s in subjects]
    groups: dict[Optional[str], list] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    keys = sorted(groups, key=lambda k: (k is None, k or ""))
    total = len(subjects)
    n_train = int(round(train_fraction * total))
    quota = {k: train_fraction * len(groups[k]) for k in keys}
    alloc = {k: int(np.floor(q)) for k, q in quota.items()}
    for k in sorted(keys, key=lambda k: -(quota[k] - alloc[k]))[: n_train - sum(alloc.values())]:
        alloc[k] += 1
    for k in keys:
        if alloc[k] == 0:
            donor = max(keys, key=lambda d: alloc[d])
            if alloc[donor] > 1:
                alloc[donor] -= 1
                alloc[k] = 1
    absent = [k for k in keys if alloc[k] == 0]
    notes = []
    if absent:
        msg = f"labels absent from training: {', '.join(str(k) for k in absent)}"
        warnings.warn(msg)
        notes.append(msg)
    is_train = np.zeros(total, dtype=bool)
    for k in keys:
        members = np.array(groups[k])
        chosen = rng.permutation(members)[: alloc[k]]
        is_train[chosen] = True
    out = [
        SubjectTrajectory(s.subject_id, s.graphs, "train" if is_train[i] else "test", s.label)
        for i, s in enumerate(subjects)
    ]
    meta = dict(dataset.meta)
    if notes:
        meta["split_warning"] = ";".join(n.replace(" ", "_") for n in notes)
    return LongitudinalDataset(out, dataset.timepoints, meta)
