"""Template-residual similarity, top-k neighbour selection and trajectory prediction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from brainevo.errors import ContractError, DimensionError
from brainevo.ggan import embed, embed_many
from brainevo.graph import BrainGraph


def residual(z, z_cbt) -> np.ndarray:
    """Element-wise |z - z_cbt|."""
    z = np.asarray(z, dtype=np.float64)
    z_cbt = np.asarray(z_cbt, dtype=np.float64)
    if z.shape != z_cbt.shape:
        raise DimensionError(f"residual: embedding shapes {z.shape} and {z_cbt.shape} differ")
    return np.abs(z - z_cbt)


def similarity_matrix(r_test, r_train, normalize: bool = False) -> np.ndarray:
    """Dot products between testing rows and training rows, shaped m x n.

    With ``normalize`` every vector is scaled to unit L2 norm first (zero
    vectors are left as they are), which turns the score into a cosine.
    """
    r_test = np.atleast_2d(np.asarray(r_test, dtype=np.float64))
    r_train = np.atleast_2d(np.asarray(r_train, dtype=np.float64))
    if r_test.size == 0 or r_train.size == 0:
        raise ContractError("similarity needs at least one testing and one training vector")
    if r_test.shape[1] != r_train.shape[1]:
        raise DimensionError(f"similarity: vector lengths {r_test.shape[1]} and {r_train.shape[1]} differ")
    if normalize:
        r_test = _unit_rows(r_test)
        r_train = _unit_rows(r_train)
    return r_test @ r_train.T


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norms > 0, norms, 1.0)


def top_k(S: np.ndarray, i: int, k: int) -> np.ndarray:
    """Indices of the k largest scores in row i, best first; ties go to the lower index."""
    S = np.atleast_2d(S)
    n = S.shape[1]
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")
    if not 0 <= i < S.shape[0]:
        raise ContractError(f"row {i} out of range for {S.shape[0]} testing subjects")
    return np.argsort(-S[i], kind="stable")[:k]


def predict_trajectory(train: Sequence, neighbors: Sequence[int], timepoints: Sequence[int]) -> list:
    """Element-wise mean of the neighbours' graphs at each requested timepoint.

    Args:
        train: training :class:`~brainevo.graph.SubjectTrajectory` objects.
        neighbors: indices into ``train``.
        timepoints: timepoint indices to predict (usually 1..T).
    """
    if len(neighbors) == 0:
        raise ContractError("prediction needs at least one neighbour")
    out = []
    for t in timepoints:
        stack = []
        for j in neighbors:
            subj = train[j]
            if t >= len(subj.graphs):
                raise ContractError(f"training subject {subj.subject_id} has no graph at timepoint t{t}")
            stack.append(subj.graphs[t].weights)
        out.append(BrainGraph(np.mean(stack, axis=0)))
    return out


@dataclass
class SimilarityArtifacts:
    z_train: np.ndarray  # n x n_r
    z_test: np.ndarray  # m x n_r
    z_cbt: np.ndarray  # n_r
    r_train: np.ndarray
    r_test: np.ndarray
    S: np.ndarray  # m x n


def residual_similarity(
    z_train: np.ndarray, z_test: np.ndarray, z_cbt: np.ndarray, normalize: bool = False
) -> SimilarityArtifacts:
    """Residuals against the template embedding, then their similarity matrix."""
    z_train = np.atleast_2d(z_train)
    z_test = np.atleast_2d(z_test)
    r_train = np.array([residual(z, z_cbt) for z in z_train])
    r_test = np.array([residual(z, z_cbt) for z in z_test])
    S = similarity_matrix(r_test, r_train, normalize)
    return SimilarityArtifacts(z_train, z_test, np.asarray(z_cbt), r_train, r_test, S)


def embed_and_score(
    model, train_graphs: Sequence[BrainGraph], test_graphs: Sequence[BrainGraph], cbt, normalize: bool = False
) -> SimilarityArtifacts:
    """Full method: embed everything through the normaliser and score residuals."""
    template = cbt.template if hasattr(cbt, "template") else cbt
    return residual_similarity(
        embed_many(model, train_graphs), embed_many(model, test_graphs), embed(model, template), normalize
    )


def predict_all(
    S: np.ndarray, train: Sequence, k: int, timepoints: Sequence[int], neighbors: Optional[list] = None
) -> list:
    """Predictions for every testing row of ``S``: a list (per subject) of graph lists."""
    preds = []
    for i in range(S.shape[0]):
        idx = top_k(S, i, k)
        if neighbors is not None:
            neighbors.append(idx)
        preds.append(predict_trajectory(train, idx, timepoints))
    return preds
