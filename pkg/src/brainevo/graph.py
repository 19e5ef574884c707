"""Brain graphs, longitudinal datasets and their on-disk format.

A dataset directory holds ``manifest.txt`` plus one comma-separated matrix
file per subject and timepoint.  The manifest is plain ``key=value`` text:
dataset-level metadata lines carry a single pair, and each subject record is
one line of whitespace-separated pairs starting with ``subject=``::

    # brainevo dataset
    format=brainevo-dataset-1
    n_r=4
    timepoints=t0,t1,t2
    subject=s000 split=train t0=s000_t0.csv t1=s000_t1.csv t2=s000_t2.csv
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from brainevo.errors import ContractError, LoadError, ValidationError

MANIFEST = "manifest.txt"
FORMAT_TAG = "brainevo-dataset-1"
SPLITS = ("train", "test")


def validate_weights(weights: np.ndarray, what: str = "graph") -> None:
    """Raise :class:`ValidationError` unless ``weights`` is a valid brain graph."""
    if weights.ndim != 2 or weights.shape[0] != weights.shape[1] or weights.shape[0] < 1:
        raise ValidationError(f"{what}: connectivity must be a non-empty square matrix, got shape {weights.shape}")
    bad = ~np.isfinite(weights)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValidationError(f"{what}: non-finite weight at row {i}, col {j}")
    bad = (weights < 0.0) | (weights > 1.0)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValidationError(f"{what}: weight {weights[i, j]!r} at row {i}, col {j} outside [0, 1]")
    diag = np.flatnonzero(np.diagonal(weights))
    if diag.size:
        i = diag[0]
        raise ValidationError(f"{what}: non-zero diagonal {weights[i, i]!r} at row {i}, col {i}")
    bad = weights != weights.T
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValidationError(
            f"{what}: asymmetric weights at row {i}, col {j} ({weights[i, j]!r} vs {weights[j, i]!r})"
        )


@dataclass(frozen=True, eq=False)
class BrainGraph:
    """Symmetric connectivity matrix with weights in [0, 1] and zero diagonal."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        validate_weights(w)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_r(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, BrainGraph) and np.array_equal(self.weights, other.weights)

    __hash__ = None

    def __repr__(self) -> str:
        return f"BrainGraph(n_r={self.n_r})"


def vectorize(graph: BrainGraph) -> np.ndarray:
    """Strict upper triangle in row-major order, length n_r*(n_r-1)/2."""
    return graph.weights[np.triu_indices(graph.n_r, k=1)].copy()


def devectorize(vec: Sequence[float], n_r: int) -> BrainGraph:
    """Inverse of :func:`vectorize`."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n_r * (n_r - 1) // 2,):
        raise ContractError(f"vector of length {vec.size} does not match n_r={n_r}")
    w = np.zeros((n_r, n_r))
    iu = np.triu_indices(n_r, k=1)
    w[iu] = vec
    w.T[iu] = vec
    return BrainGraph(w)


@dataclass(frozen=True)
class SubjectTrajectory:
    """One subject's graphs at consecutive timepoints, starting at t0.

    ``label`` is an optional group tag (the synthetic generator stores the
    cluster here); it is never used by the prediction pipeline itself.
    """

    subject_id: str
    graphs: tuple
    split: str = "train"
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        if not self.graphs:
            raise ContractError(f"subject {self.subject_id}: at least the t0 graph is required")
        if self.split not in SPLITS:
            raise ContractError(f"subject {self.subject_id}: split must be one of {SPLITS}, got {self.split!r}")
        n_r = self.graphs[0].n_r
        for t, g in enumerate(self.graphs):
            if g.n_r != n_r:
                raise ValidationError(f"subject {self.subject_id}: t{t} has n_r={g.n_r}, expected {n_r}")


@dataclass
class LongitudinalDataset:
    """Subjects with graphs at timepoints t0..tT and a train/test split."""

    trajectories: list
    timepoints: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trajectories = list(self.trajectories)
        self.meta = {str(k): str(v) for k, v in self.meta.items()}
        ids = [s.subject_id for s in self.trajectories]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subject ids")
        n_t = max((len(s.graphs) for s in self.trajectories), default=0)
        if not self.timepoints:
            self.timepoints = tuple(f"t{t}" for t in range(n_t))
        self.timepoints = tuple(self.timepoints)
        if n_t > len(self.timepoints):
            raise ValidationError(f"a subject has {n_t} graphs but only {len(self.timepoints)} timepoints are declared")
        if self.trajectories:
            n_r = self.trajectories[0].graphs[0].n_r
            for s in self.trajectories:
                if s.graphs[0].n_r != n_r:
                    raise ValidationError(f"subject {s.subject_id}: n_r={s.graphs[0].n_r}, expected {n_r}")
                if s.split == "train" and len(s.graphs) != len(self.timepoints):
                    missing = self.timepoints[len(s.graphs)]
                    raise ValidationError(f"training subject {s.subject_id} is missing timepoint {missing}")

    @property
    def n_r(self) -> int:
        return self.trajectories[0].graphs[0].n_r

    @property
    def train(self) -> list:
        return [s for s in self.trajectories if s.split == "train"]

    @property
    def test(self) -> list:
        return [s for s in self.trajectories if s.split == "test"]

    @property
    def n(self) -> int:
        return len(self.train)

    @property
    def m(self) -> int:
        return len(self.test)

    @property
    def T(self) -> int:
        return len(self.timepoints) - 1

    @property
    def split(self) -> dict:
        return {s.subject_id: s.split for s in self.trajectories}

    def graphs_at(self, t: int, split: str = "train") -> list:
        return [s.graphs[t] for s in self.trajectories if s.split == split]

    def with_trajectories(self, trajectories: Iterable) -> "LongitudinalDataset":
        return LongitudinalDataset(list(trajectories), self.timepoints, dict(self.meta))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        return (
            self.timepoints == other.timepoints
            and self.meta == other.meta
            and len(self.trajectories) == len(other.trajectories)
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
        )


# ---------------------------------------------------------------------------
# file formats


def format_number(x: float) -> str:
    """Shortest positional decimal that round-trips the float exactly."""
    x = float(x)
    if x == 0.0:
        return "0"
    return np.format_float_positional(x, unique=True, trim="-")


def write_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lines = [",".join(format_number(v) for v in row) for row in matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"matrix file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise LoadError(f"{path}:{lineno}: {exc}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise LoadError(f"{path}: matrix rows are empty or ragged")
    return np.array(rows, dtype=np.float64)


def write_kv(path, meta: dict, records: Sequence[dict] = (), header: str = "") -> None:
    """Write metadata pairs followed by one line per record."""
    lines = [f"# {header}"] if header else []
    for k, v in meta.items():
        lines.append(f"{k}={v}")
    for rec in records:
        lines.append(" ".join(f"{k}={v}" for k, v in rec.items()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path, record_key: str) -> tuple[dict, list]:
    """Parse a file written by :func:`write_kv`; records start with ``record_key=``."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"file not found: {path}")
    meta: dict = {}
    records: list = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith(record_key + "="):
            rec = {}
            for tok in line.split():
                if "=" not in tok:
                    raise LoadError(f"{path}:{lineno}: malformed field {tok!r}")
                k, v = tok.split("=", 1)
                rec[k] = v
            records.append(rec)
        else:
            if "=" not in line:
                raise LoadError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta, records


def save_dataset(dataset: LongitudinalDataset, root) -> None:
    """Write ``dataset`` under directory ``root``."""
    if not dataset.trajectories:
        raise ContractError("refusing to write a dataset with no subjects")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise LoadError(f"cannot create dataset directory {root}: {exc}") from None
    if not os.access(root, os.W_OK):
        raise LoadError(f"dataset directory is not writable: {root}")
    meta = {"format": FORMAT_TAG, "n_r": dataset.n_r, "timepoints": ",".join(dataset.timepoints)}
    meta.update(dataset.meta)
    records = []
    for s in dataset.trajectories:
        rec = {"subject": s.subject_id, "split": s.split}
        if s.label is not None:
            rec["label"] = s.label
        for tp, g in zip(dataset.timepoints, s.graphs):
            fname = f"{s.subject_id}_{tp}.csv"
            write_matrix(root / fname, g.weights)
            rec[tp] = fname
        records.append(rec)
    write_kv(root / MANIFEST, meta, records, header="brainevo dataset")


def load_dataset(root) -> LongitudinalDataset:
    """Read and validate a dataset directory written by :func:`save_dataset`."""
    root = Path(root)
    meta, records = read_kv(root / MANIFEST, "subject")
    if meta.pop("format", None) != FORMAT_TAG:
        raise LoadError(f"{root / MANIFEST}: not a {FORMAT_TAG} manifest")
    try:
        n_r = int(meta.pop("n_r"))
        timepoints = tuple(meta.pop("timepoints").split(","))
    except (KeyError, ValueError) as exc:
        raise LoadError(f"{root / MANIFEST}: missing or malformed header field {exc}") from None
    trajectories = []
    for rec in records:
        sid = rec["subject"]
        split = rec.get("split", "train")
        graphs = []
        for tp in timepoints:
            fname = rec.get(tp)
            if fname is None or not (root / fname).is_file():
                if split == "train" or tp == timepoints[0]:
                    where = f" ({root / fname})" if fname else ""
                    raise LoadError(f"subject {sid}: missing graph for timepoint {tp}{where}")
                break
            w = read_matrix(root / fname)
            if w.shape != (n_r, n_r):
                raise ValidationError(f"subject {sid}, timepoint {tp}: shape {w.shape}, expected ({n_r}, {n_r})")
            validate_weights(w, what=f"subject {sid}, timepoint {tp}")
            graphs.append(BrainGraph(w))
        trajectories.append(SubjectTrajectory(sid, tuple(graphs), split, rec.get("label")))
    if not trajectories:
        raise LoadError(f"{root / MANIFEST}: no subject records")
    return LongitudinalDataset(trajectories, timepoints, meta)
