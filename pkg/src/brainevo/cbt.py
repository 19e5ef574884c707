"""Connectional brain template from an independent population.

For every connection (i, j) the template keeps the value of the subject
whose summed absolute distance to all other subjects at that connection is
smallest.  Ties go to the lowest subject index, and only the strict upper
triangle is computed before mirroring, so the template is symmetric by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from brainevo.errors import ContractError, LoadError, ValidationError
from brainevo.graph import BrainGraph, read_kv, read_matrix, write_kv, write_matrix

PROVENANCE = "cbt_provenance.txt"


@dataclass(frozen=True, eq=False)
class HighOrderDistance:
    """Pairwise subject distances per connection.

    ``values[i, j]`` is the n_c x n_c matrix of |V^s_ij - V^s'_ij|.
    """

    values: np.ndarray

    def __getitem__(self, conn: tuple[int, int]) -> np.ndarray:
        return self.values[conn]

    @property
    def n_c(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True, eq=False)
class Cbt:
    template: BrainGraph
    source_ids: tuple
    argmin: np.ndarray  # n_r x n_r, index into source_ids; diagonal is 0


def _stack(population: Sequence[BrainGraph]) -> np.ndarray:
    if len(population) < 2:
        raise ContractError(f"a template needs at least 2 subjects, got {len(population)}")
    n_r = population[0].n_r
    for s, g in enumerate(population):
        if g.n_r != n_r:
            raise ValidationError(f"subject {s} has n_r={g.n_r}, expected {n_r}")
    return np.stack([g.weights for g in population], axis=-1)  # n_r x n_r x n_c


def pairwise_distances(population: Sequence[BrainGraph]) -> HighOrderDistance:
    v = _stack(population)
    return HighOrderDistance(np.abs(v[..., :, None] - v[..., None, :]))


def cumulative_strength(H: HighOrderDistance) -> np.ndarray:
    """Node strength of every subject in each connection's distance graph.

    Returns an n_r x n_r x n_c array.
    """
    return H.values.sum(axis=-1)


def build_cbt(population: Sequence[BrainGraph], source_ids: Optional[Sequence[str]] = None) -> Cbt:
    v = _stack(population)
    n_r, n_c = v.shape[0], v.shape[-1]
    if source_ids is None:
        source_ids = [f"s{k}" for k in range(n_c)]
    if len(source_ids) != n_c:
        raise ContractError(f"{len(source_ids)} source ids for {n_c} subjects")
    iu = np.triu_indices(n_r, k=1)
    upper = v[iu]  # n_conn x n_c
    strength = np.abs(upper[:, :, None] - upper[:, None, :]).sum(axis=-1)
    # Sums that are equal in exact arithmetic (the two middle subjects of an
    # even population always are) can differ by rounding.  Anything within the
    # summation error bound of the minimum counts as tied; argmax over the
    # boolean mask then returns the lowest tied subject index.
    best = strength.min(axis=1, keepdims=True)
    tol = 4 * n_c * np.finfo(np.float64).eps * np.maximum(best, np.finfo(np.float64).tiny)
    choice = np.argmax(strength <= best + tol, axis=1)
    template = np.zeros((n_r, n_r))
    template[iu] = upper[np.arange(len(choice)), choice]
    template.T[iu] = template[iu]
    argmin = np.zeros((n_r, n_r), dtype=np.int64)
    argmin[iu] = choice
    argmin.T[iu] = choice
    return Cbt(BrainGraph(template), tuple(source_ids), argmin)


def save_cbt(cbt: Cbt, out_dir) -> Path:
    """Write ``cbt.csv``, ``cbt_argmin.csv`` and a provenance record; return the template path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_matrix(out_dir / "cbt.csv", cbt.template.weights)
    write_matrix(out_dir / "cbt_argmin.csv", cbt.argmin)
    meta = {
        "template": "cbt.csv",
        "argmin": "cbt_argmin.csv",
        "n_c": len(cbt.source_ids),
        "source_ids": ",".join(cbt.source_ids),
    }
    write_kv(out_dir / PROVENANCE, meta, header="brainevo template provenance")
    return out_dir / "cbt.csv"


def load_cbt(path) -> Cbt:
    """Load a template from ``cbt.csv`` or from the directory holding it."""
    path = Path(path)
    if path.is_dir():
        path = path / "cbt.csv"
    if not path.is_file():
        raise LoadError(f"template file not found: {path}")
    template = BrainGraph(read_matrix(path))
    prov = path.parent / PROVENANCE
    if prov.is_file():
        meta, _ = read_kv(prov, "connection")
        ids = tuple(meta.get("source_ids", "").split(","))
        argmin = read_matrix(path.parent / meta.get("argmin", "cbt_argmin.csv")).astype(np.int64)
    else:
        ids, argmin = (), np.zeros((template.n_r, template.n_r), dtype=np.int64)
    return Cbt(template, ids, argmin)
