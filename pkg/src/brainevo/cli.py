"""Command-line pipeline: gen-data, build-cbt, train, embed, predict, evaluate.

Every command reads an optional flat configuration file (one ``key = value``
per line, ``#`` starts a comment) and a few flags that override it.  Paths
default to locations under ``--out``, so running the commands in order on
defaults goes from synthetic data to an evaluation report::

    python -m brainevo gen-data  --out run
    python -m brainevo build-cbt --out run
    python -m brainevo train     --out run
    python -m brainevo predict   --out run --k 5
    python -m brainevo evaluate  --out run

Each command appends its effective configuration, seed and timings to
``<out>/run.log``.  Failures print one ``error command=... kind=...
message=...`` line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from brainevo import evaluation as ev
from brainevo import ggan, selection, synth
from brainevo.cbt import build_cbt, load_cbt, save_cbt
from brainevo.errors import BrainEvoError, ContractError, LoadError
from brainevo.graph import format_number, load_dataset, save_dataset, write_matrix

COMMANDS = ("gen-data", "build-cbt", "train", "embed", "predict", "evaluate")

TRAIN_KEYS = {f.name for f in fields(ggan.TrainConfig)} - {"seed"}
SYNTH_KEYS = {f.name for f in fields(synth.SynthConfig)} - {"seed"}


class ConfigError(ContractError):
    pass


@dataclass
class PipelineConfig:
    out: str = "run"
    dataset: str = ""  # defaults to <out>/dataset
    independent: str = ""  # CBT source population, defaults to <out>/independent
    cbt: str = ""  # defaults to <out>/cbt/cbt.csv
    model: str = ""  # defaults to <out>/model.txt
    seed: int = 0
    k: str = "2..10"
    predict_k: int = 5
    folds: int = 3
    protocol: str = "cv"  # "cv" retrains per fold; "holdout" scores the saved model on the test split
    normalize: bool = False
    n_independent: int = 23
    train: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def path(self, key: str) -> Path:
        value = getattr(self, key)
        if value:
            return Path(value)
        out = Path(self.out)
        return {
            "dataset": out / "dataset",
            "independent": out / "independent",
            "cbt": out / "cbt" / "cbt.csv",
            "model": out / "model.txt",
        }[key]

    def train_config(self) -> ggan.TrainConfig:
        return ggan.TrainConfig(seed=self.seed, **self.train)

    def synth_config(self) -> synth.SynthConfig:
        return synth.SynthConfig(seed=self.seed, **self.synth)

    def k_range(self) -> tuple:
        return parse_k(self.k)

    def echo(self) -> list:
        """Effective configuration as ``key = value`` lines, sorted."""
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("train", "synth")}
        flat.update({k: v for k, v in dataclasses.asdict(self.train_config()).items() if k != "seed"})
        flat.update({k: v for k, v in dataclasses.asdict(self.synth_config()).items() if k != "seed"})
        for key in ("dataset", "independent", "cbt", "model"):
            flat[key] = str(self.path(key))
        return [f"{k} = {v}" for k, v in sorted(flat.items())]


def parse_k(text: str) -> tuple:
    """``"2..10"``, ``"5"`` or ``"2,4,8"`` to a tuple of ints."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            values = tuple(range(lo, hi + 1))
        else:
            values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad k range {text!r}; expected e.g. 2..10, 5 or 2,4,8") from None
    if not values or min(values) < 1:
        raise ConfigError(f"k range {text!r} must be non-empty with k >= 1")
    return values


def _cast(key: str, raw: str, kind):
    if kind is bool or kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    cast = {"int": int, "float": float, "str": str}.get(getattr(kind, "__name__", kind), str)
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {cast.__name__}") from None


def _kinds() -> dict:
    kinds = {f.name: f.type for f in fields(PipelineConfig) if f.name not in ("train", "synth")}
    kinds.update({f.name: f.type for f in fields(ggan.TrainConfig) if f.name in TRAIN_KEYS})
    kinds.update({f.name: f.type for f in fields(synth.SynthConfig) if f.name in SYNTH_KEYS})
    return kinds


def apply(cfg: PipelineConfig, key: str, raw: str, where: str = "") -> None:
    key = {"lambda": "lam"}.get(key, key)
    kinds = _kinds()
    if key not in kinds:
        raise ConfigError(f"{where}unknown configuration key {key!r}")
    value = _cast(key, raw, kinds[key])
    if key in TRAIN_KEYS:
        cfg.train[key] = value
    elif key in SYNTH_KEYS:
        cfg.synth[key] = value
    else:
        setattr(cfg, key, value)


def read_config(path, cfg: Optional[PipelineConfig] = None) -> PipelineConfig:
    cfg = cfg or PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"config file not found: {path}")
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        apply(cfg, key, value, f"{path}:{n}: ")
    return cfg


# ---------------------------------------------------------------------------
# commands


class RunLog:
    def __init__(self, command: str, cfg: PipelineConfig):
        self.command = command
        self.cfg = cfg
        self.lines = [f"[{command}]"] + cfg.echo()
        self.t0 = time.perf_counter()
        self.last = self.t0

    def stage(self, name: str) -> None:
        now = time.perf_counter()
        self.lines.append(f"time.{name} = {now - self.last:.3f}s")
        self.last = now

    def close(self, status: str) -> None:
        self.lines.append(f"time.total = {time.perf_counter() - self.t0:.3f}s")
        self.lines.append(f"status = {status}")
        out = Path(self.cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "run.log", "a") as fh:
            fh.write("\n".join(self.lines) + "\n\n")


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise LoadError(f"{what} not found: {path}")
    return path


def cmd_gen_data(cfg: PipelineConfig, log: RunLog) -> None:
    sc = cfg.synth_config()
    pop = synth.generate(sc)
    save_dataset(pop.dataset, cfg.path("dataset"))
    save_dataset(synth.independent_population(sc, cfg.n_independent), cfg.path("independent"))
    log.lines.append(f"clamped = {pop.clamped}")
    log.stage("generate")


def cmd_build_cbt(cfg: PipelineConfig, log: RunLog) -> None:
    src = load_dataset(_need(cfg.path("independent"), "CBT source population"))
    graphs = [s.graphs[0] for s in src.trajectories]
    cbt = build_cbt(graphs, [s.subject_id for s in src.trajectories])
    save_cbt(cbt, cfg.path("cbt").parent)
    log.stage("build_cbt")


def _inputs(cfg: PipelineConfig):
    cbt = load_cbt(_need(cfg.path("cbt"), "CBT file"))
    ds = load_dataset(_need(cfg.path("dataset"), "dataset"))
    return ds, cbt


def cmd_train(cfg: PipelineConfig, log: RunLog) -> None:
    ds, cbt = _inputs(cfg)
    log.stage("load")
    model, trace = ggan.train([s.graphs[0] for s in ds.train], cbt, cfg.train_config())
    log.stage("train")
    path = cfg.path("model")
    path.parent.mkdir(parents=True, exist_ok=True)
    ggan.save_model(model, path)
    lines = ["epoch,loss_d,loss_n,loss_l1"]
    lines += [f"{r.epoch},{format_number(r.loss_d)},{format_number(r.loss_n)},{format_number(r.loss_l1)}" for r in trace]
    (path.parent / "loss_trace.csv").write_text("\n".join(lines) + "\n")
    log.lines.append(f"loss_l1.first = {trace[0].loss_l1:.6f}")
    log.lines.append(f"loss_l1.final = {trace[-1].loss_l1:.6f}")


def _rows(ids: Sequence[str], matrix: np.ndarray, prefix: str) -> str:
    header = ["subject"] + [f"{prefix}{j}" for j in range(matrix.shape[1])]
    lines = [",".join(header)]
    lines += [",".join([sid] + [format_number(v) for v in row]) for sid, row in zip(ids, matrix)]
    return "\n".join(lines) + "\n"


def _scores(cfg: PipelineConfig):
    ds, cbt = _inputs(cfg)
    model = ggan.load_model(_need(cfg.path("model"), "model file"))
    if not ds.test:
        raise ContractError(f"dataset {cfg.path('dataset')} has no testing subjects")
    art = selection.embed_and_score(
        model, [s.graphs[0] for s in ds.train], [s.graphs[0] for s in ds.test], cbt, cfg.normalize
    )
    return ds, art


def cmd_embed(cfg: PipelineConfig, log: RunLog) -> None:
    ds, art = _scores(cfg)
    log.stage("embed")
    out = Path(cfg.out) / "embeddings"
    out.mkdir(parents=True, exist_ok=True)
    tr = [s.subject_id for s in ds.train]
    ts = [s.subject_id for s in ds.test]
    (out / "train.csv").write_text(_rows(tr, art.z_train, "z"))
    (out / "test.csv").write_text(_rows(ts, art.z_test, "z"))
    (out / "cbt.csv").write_text(_rows(["cbt"], art.z_cbt[None, :], "z"))
    (out / "residual_train.csv").write_text(_rows(tr, art.r_train, "r"))
    (out / "residual_test.csv").write_text(_rows(ts, art.r_test, "r"))
    sim = [",".join(["subject"] + tr)]
    sim += [",".join([sid] + [format_number(v) for v in row]) for sid, row in zip(ts, art.S)]
    (out / "similarity.csv").write_text("\n".join(sim) + "\n")


def _predict_k(cfg: PipelineConfig, explicit_k: bool) -> int:
    if not explicit_k:
        return cfg.predict_k
    ks = cfg.k_range()
    if len(ks) != 1:
        raise ConfigError(f"predict needs a single k, got {cfg.k!r}")
    return ks[0]


def cmd_predict(cfg: PipelineConfig, log: RunLog, explicit_k: bool = False) -> None:
    k = _predict_k(cfg, explicit_k)
    ds, art = _scores(cfg)
    log.stage("embed")
    steps = list(range(1, ds.T + 1))
    chosen: list = []
    preds = selection.predict_all(art.S, ds.train, k, steps, chosen)
    log.stage("predict")
    out = Path(cfg.out) / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["test_id,neighbor_ids,scores"]
    for i, subj in enumerate(ds.test):
        for t, g in zip(steps, preds[i]):
            write_matrix(out / f"{subj.subject_id}_{ds.timepoints[t]}.csv", g.weights)
        ids = ";".join(ds.train[j].subject_id for j in chosen[i])
        scores = ";".join(format_number(art.S[i, j]) for j in chosen[i])
        lines.append(f"{subj.subject_id},{ids},{scores}")
    (out / "selection.csv").write_text("\n".join(lines) + "\n")
    log.lines.append(f"k = {k}")


def cmd_evaluate(cfg: PipelineConfig, log: RunLog) -> None:
    ds, cbt = _inputs(cfg)
    ks = cfg.k_range()
    if cfg.protocol == "cv":
        report = ev.cross_validate(ds, cbt, cfg.train_config(), cfg.folds, ks, cfg.normalize)
    elif cfg.protocol == "holdout":
        model = ggan.load_model(_need(cfg.path("model"), "model file"))
        report = ev.holdout_evaluate(ds, cbt, model, ks, cfg.normalize)
    else:
        raise ConfigError(f"protocol must be 'cv' or 'holdout', got {cfg.protocol!r}")
    log.stage("evaluate")
    ev.write_report(report, Path(cfg.out) / "report")


# ---------------------------------------------------------------------------
# entry point


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="brainevo", description="Brain-graph evolution forecasting pipeline.")
    p.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", help="flat 'key = value' configuration file")
    p.add_argument("--seed", help="random seed for data, training and folds")
    p.add_argument("--k", help="neighbour counts, e.g. 2..10 (predict takes a single value)")
    p.add_argument("--epochs", help="gGAN training epochs")
    p.add_argument("--lambda", dest="lam", help="weight of the L1 term in the normaliser loss")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any configuration key")
    return p


def _fail(command: str, kind: str, message: str) -> int:
    message = " ".join(str(message).split())
    print(f"error command={command} kind={kind} message={message}", file=sys.stderr)
    return 2 if kind in ("UsageError", "ConfigError") else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("?", "UsageError", exc)
    command = args.command
    if command not in COMMANDS:
        return _fail(command, "UsageError", f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    log = None
    try:
        cfg = read_config(args.config) if args.config else PipelineConfig()
        for key, value in (("seed", args.seed), ("k", args.k), ("epochs", args.epochs), ("lam", args.lam), ("out", args.out)):
            if value is not None:
                apply(cfg, key, value)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            apply(cfg, key.strip(), value.strip())
        # validate the numeric fields up front
        cfg.train_config()
        cfg.synth_config()
        cfg.k_range()
        log = RunLog(command, cfg)
        if command == "gen-data":
            cmd_gen_data(cfg, log)
        elif command == "build-cbt":
            cmd_build_cbt(cfg, log)
        elif command == "train":
            cmd_train(cfg, log)
        elif command == "embed":
            cmd_embed(cfg, log)
        elif command == "predict":
            cmd_predict(cfg, log, explicit_k=args.k is not None)
        else:
            cmd_evaluate(cfg, log)
    except (BrainEvoError, OSError, ValueError) as exc:
        if log is not None:
            log.lines.append(f"error = {type(exc).__name__}: {' '.join(str(exc).split())}")
            log.close("failed")
        return _fail(command, type(exc).__name__, exc)
    log.close("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
