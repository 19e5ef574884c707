"""MAE metrics, k sweeps, cross-validation and the comparison selection strategies.

The four selection strategies differ only in the similarity matrix they
build; neighbour selection and trajectory averaging are shared:

* ``SS-OF``: dot products of vectorised baseline graphs.
* ``SS-CR``: dot products of |vectorised graph - vectorised template|.
* ``SS-CE``: dot products of normaliser embeddings.
* ``Ours``: dot products of |embedding - template embedding|.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from brainevo import ggan
from brainevo.cbt import Cbt
from brainevo.errors import ContractError, DimensionError
from brainevo.graph import BrainGraph, LongitudinalDataset, format_number, vectorize
from brainevo.selection import embed_and_score, predict_trajectory, residual, similarity_matrix, top_k

logger = logging.getLogger(__name__)

METHODS = ("SS-OF", "SS-CR", "SS-CE", "Ours")
K_RANGE = tuple(range(2, 11))

# Table 2 of the reference study (OASIS-2, 35 ROIs); not reproducible here.
REFERENCE_TABLE = {
    "SS-OF": {"t1": (0.04469, 0.00247, 0.04194), "t2": (0.05368, 0.00449, 0.04825)},
    "SS-CR": {"t1": (0.04417, 0.002026, 0.04225), "t2": (0.05045, 0.000942, 0.04939)},
    "SS-CE": {"t1": (0.04255, 0.001835, 0.04064), "t2": (0.04948, 0.002480, 0.04707)},
    "Ours": {"t1": (0.04237, 0.001679, 0.04075), "t2": (0.04882, 0.002517, 0.04624)},
}


def mae(predicted: BrainGraph, truth: BrainGraph) -> float:
    """Mean absolute error over all n_r x n_r cells."""
    if predicted.n_r != truth.n_r:
        raise DimensionError(f"mae: graphs with n_r={predicted.n_r} and n_r={truth.n_r}")
    return float(np.abs(predicted.weights - truth.weights).mean())


# ---------------------------------------------------------------------------
# similarity strategies


def _vectors(graphs: Sequence[BrainGraph]) -> np.ndarray:
    return np.array([vectorize(g) for g in graphs])


def select_ss_of(train: Sequence[BrainGraph], test: Sequence[BrainGraph]) -> np.ndarray:
    return similarity_matrix(_vectors(test), _vectors(train))


def select_ss_cr(train: Sequence[BrainGraph], test: Sequence[BrainGraph], cbt) -> np.ndarray:
    ref = vectorize(cbt.template if isinstance(cbt, Cbt) else cbt)
    r_train = np.array([residual(v, ref) for v in _vectors(train)])
    r_test = np.array([residual(v, ref) for v in _vectors(test)])
    return similarity_matrix(r_test, r_train)


def select_ss_ce(train: Sequence[BrainGraph], test: Sequence[BrainGraph], model) -> np.ndarray:
    return similarity_matrix(ggan.embed_many(model, test), ggan.embed_many(model, train))


def select_ours(train, test, cbt, model, normalize: bool = False) -> np.ndarray:
    return embed_and_score(model, train, test, cbt, normalize).S


def similarities(train, test, cbt, model, normalize: bool = False) -> dict:
    """Similarity matrix of every method, keyed by method name."""
    return {
        "SS-OF": select_ss_of(train, test),
        "SS-CR": select_ss_cr(train, test, cbt),
        "SS-CE": select_ss_ce(train, test, model),
        "Ours": select_ours(train, test, cbt, model, normalize),
    }


# ---------------------------------------------------------------------------
# sweeps


def subject_errors(S: np.ndarray, train: Sequence, test: Sequence, k_range: Sequence[int]) -> np.ndarray:
    """Per-subject MAE, shaped (len(k_range), m, T), for follow-ups t1..tT."""
    n = len(train)
    for k in k_range:
        if not 1 <= k <= n:
            raise ContractError(f"k={k} outside [1, {n}] training subjects")
    if S.shape != (len(test), n):
        raise DimensionError(f"similarity matrix {S.shape} for {len(test)} testing and {n} training subjects")
    T = len(train[0].graphs) - 1
    steps = list(range(1, T + 1))
    out = np.zeros((len(k_range), len(test), T))
    for a, k in enumerate(k_range):
        for i, subj in enumerate(test):
            if len(subj.graphs) < T + 1:
                raise ContractError(f"testing subject {subj.subject_id} lacks ground truth up to t{T}")
            preds = predict_trajectory(train, top_k(S, i, k), steps)
            out[a, i] = [mae(p, subj.graphs[t]) for p, t in zip(preds, steps)]
    return out


def k_sweep(S: np.ndarray, train: Sequence, test: Sequence, k_range: Sequence[int] = K_RANGE) -> np.ndarray:
    """MAE averaged over testing subjects, shaped (len(k_range), T)."""
    return subject_errors(S, train, test, k_range).mean(axis=1)


def aggregate(per_k: np.ndarray) -> dict:
    """Mean, std (population, across k) and best MAE per timepoint for one method."""
    per_k = np.atleast_2d(per_k)
    return {"mean": per_k.mean(axis=0), "std": per_k.std(axis=0), "best": per_k.min(axis=0)}


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    methods: tuple
    timepoints: tuple  # follow-up labels, e.g. ("t1", "t2")
    k_values: tuple
    per_k: dict  # method -> (n_k, T), pooled over all testing subjects
    fold_per_k: dict = field(default_factory=dict)  # method -> (folds, n_k, T)
    folds: list = field(default_factory=list)  # subject ids per held-out fold
    seed: int = 0
    extra: dict = field(default_factory=dict)  # baseline name -> (T,) MAE, not part of the table

    def summary(self) -> dict:
        out = {}
        for m in self.methods:
            agg = aggregate(self.per_k[m])
            if m in self.fold_per_k:
                agg["std_joint"] = self.fold_per_k[m].reshape(-1, len(self.timepoints)).std(axis=0)
            out[m] = agg
        return out

    def table_rows(self) -> list:
        """Rows in the layout of the reference table (strings)."""
        header = ["method"]
        for tp in self.timepoints:
            header += [f"{tp} Mean MAE ± std", f"{tp} Best MAE"]
        rows = [header]
        summ = self.summary()
        for m in self.methods:
            row = [m]
            for t in range(len(self.timepoints)):
                s = summ[m]
                row += [f"{s['mean'][t]:.6f} ± {s['std'][t]:.6f}", f"{s['best'][t]:.6f}"]
            rows.append(row)
        return rows


def write_report(report: EvalReport, out_dir) -> dict:
    """Write the table, a per-k breakdown, a summary and the fold assignment.

    Returns the written paths keyed by role.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": out_dir / "report.csv",
        "per_k": out_dir / "report_per_k.csv",
        "summary": out_dir / "report_summary.csv",
        "folds": out_dir / "folds.csv",
    }
    paths["table"].write_text("\n".join(",".join(r) for r in report.table_rows()) + "\n", encoding="utf-8")

    lines = ["method,fold,k,timepoint,mae"]
    for m in report.methods:
        for a, k in enumerate(report.k_values):
            for t, tp in enumerate(report.timepoints):
                lines.append(f"{m},all,{k},{tp},{format_number(report.per_k[m][a, t])}")
        if m in report.fold_per_k:
            for f, block in enumerate(report.fold_per_k[m]):
                for a, k in enumerate(report.k_values):
                    for t, tp in enumerate(report.timepoints):
                        lines.append(f"{m},{f},{k},{tp},{format_number(block[a, t])}")
    paths["per_k"].write_text("\n".join(lines) + "\n")

    lines = ["method,timepoint,mean_mae,std_over_k,std_over_folds_and_k,best_mae"]
    for m, s in report.summary().items():
        for t, tp in enumerate(report.timepoints):
            joint = format_number(s["std_joint"][t]) if "std_joint" in s else ""
            lines.append(
                f"{m},{tp},{format_number(s['mean'][t])},{format_number(s['std'][t])},{joint},"
                f"{format_number(s['best'][t])}"
            )
    for name, vals in report.extra.items():
        for t, tp in enumerate(report.timepoints):
            lines.append(f"{name},{tp},{format_number(vals[t])},,,")
    paths["summary"].write_text("\n".join(lines) + "\n")

    lines = ["fold,subject"] + [f"{f},{sid}" for f, ids in enumerate(report.folds) for sid in ids]
    lines.append(f"# seed={report.seed}")
    paths["folds"].write_text("\n".join(lines) + "\n")
    return paths


# ---------------------------------------------------------------------------
# protocols


def select_all_baseline(train: Sequence, test: Sequence) -> np.ndarray:
    """MAE per follow-up of predicting every testing subject by the global training mean."""
    S = np.zeros((len(test), len(train)))
    return k_sweep(S, train, test, [len(train)])[0]


def holdout_evaluate(
    dataset: LongitudinalDataset,
    cbt,
    model,
    k_range: Sequence[int] = K_RANGE,
    normalize: bool = False,
) -> EvalReport:
    """Score all four methods with a trained model on the dataset's own test split."""
    train, test = dataset.train, dataset.test
    if not test:
        raise ContractError("dataset has no testing subjects")
    sims = similarities([s.graphs[0] for s in train], [s.graphs[0] for s in test], cbt, model, normalize)
    per_k = {m: k_sweep(sims[m], train, test, k_range) for m in METHODS}
    return EvalReport(
        METHODS,
        dataset.timepoints[1:],
        tuple(k_range),
        per_k,
        folds=[[s.subject_id for s in test]],
        seed=model.config.seed if hasattr(model, "config") else 0,
        extra={"select-all": select_all_baseline(train, test)},
    )


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold index per subject; fold sizes differ by at most one."""
    if folds < 2:
        raise ContractError(f"cross-validation needs at least 2 folds, got {folds}")
    if n < folds:
        raise ContractError(f"{n} subjects cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[order] = np.arange(n) % folds
    return out


def cross_validate(
    dataset: LongitudinalDataset,
    cbt,
    config: ggan.TrainConfig,
    folds: int = 3,
    k_range: Sequence[int] = K_RANGE,
    normalize: bool = False,
) -> EvalReport:
    """Train on all but one fold of the training subjects, score on the held-out fold.

    The gGAN of fold ``f`` is trained with seed ``config.seed + f``; MAEs are
    pooled over every held-out subject.
    """
    subjects = dataset.train
    assign = fold_assignment(len(subjects), folds, config.seed)
    errors = {m: [] for m in METHODS}
    fold_per_k = {m: [] for m in METHODS}
    fold_ids = []
    for f in range(folds):
        inner = [s for s, a in zip(subjects, assign) if a != f]
        held = [s for s, a in zip(subjects, assign) if a == f]
        fold_ids.append([s.subject_id for s in held])
        if max(k_range) > len(inner):
            raise ContractError(f"k={max(k_range)} exceeds the {len(inner)} training subjects of fold {f}")
        logger.info("fold %d: %d training, %d held out", f, len(inner), len(held))
        model, _ = ggan.train([s.graphs[0] for s in inner], cbt, dataclasses.replace(config, seed=config.seed + f))
        sims = similarities([s.graphs[0] for s in inner], [s.graphs[0] for s in held], cbt, model, normalize)
        for m in METHODS:
            err = subject_errors(sims[m], inner, held, k_range)
            errors[m].append(err)
            fold_per_k[m].append(err.mean(axis=1))
    per_k = {m: np.concatenate(errors[m], axis=1).mean(axis=1) for m in METHODS}
    return EvalReport(
        METHODS,
        dataset.timepoints[1:],
        tuple(k_range),
        per_k,
        {m: np.array(fold_per_k[m]) for m in METHODS},
        fold_ids,
        config.seed,
    )
