"""Cross-validation driver, result files and reporting."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .align import GridSet, compute_db_matrices, load_or_prepare, prepare_grids
from .graphio import GraphDataset, load_tu_dataset
from .model import BasgcnConfig, BasgcnModel, fit, stack_grids

log = logging.getLogger(__name__)

CSV_COLUMNS = ("repeat", "fold", "accuracy", "epochs", "seconds")
PROTOTYPE_MODES = ("transductive", "inductive")
ADJACENCY_MODES = ("directed", "undirected")

# Published 10x10-fold accuracies (%) used as reference columns in reports.
PUBLISHED = {
    ("MUTAG", "directed"): (90.04, 0.82), ("MUTAG", "undirected"): (89.70, 0.85),
    ("PTC", "directed"): (60.50, 0.77), ("PTC", "undirected"): (61.42, 0.75),
    ("PTC_MR", "directed"): (60.50, 0.77), ("PTC_MR", "undirected"): (61.42, 0.75),
    ("PROTEINS", "directed"): (76.05, 0.57), ("PROTEINS", "undirected"): (76.50, 0.59),
    ("DD", "directed"): (81.20, 0.99), ("DD", "undirected"): (80.40, 0.95),
    ("IMDB-BINARY", "directed"): (74.00, 0.87), ("IMDB-BINARY", "undirected"): (73.86, 0.92),
    ("IMDB-MULTI", "directed"): (50.43, 0.77), ("IMDB-MULTI", "undirected"): (50.86, 0.85),
    ("REDDIT-BINARY", "directed"): (91.00, 0.25), ("REDDIT-BINARY", "undirected"): (90.60, 0.24),
    ("COLLAB", "directed"): (79.60, 0.83), ("COLLAB", "undirected"): (78.75, 0.79),
}


@dataclass
class ExperimentConfig:
    dataset: str = "MUTAG"
    data_dir: str | None = None
    model: BasgcnConfig = field(default_factory=BasgcnConfig)
    folds: int = 10
    repeats: int = 1
    prototypes: str = "transductive"
    mode: str = "directed"
    cache_dir: str | None = None
    out_dir: str | None = None
    threads: int = 1
    seed: int = 0
    timing: bool = False

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.prototypes not in PROTOTYPE_MODES:
            raise ValueError(f"prototypes must be one of {PROTOTYPE_MODES}")
        if self.mode not in ADJACENCY_MODES:
            raise ValueError(f"mode must be one of {ADJACENCY_MODES}")

    def resolved_data_dir(self) -> Path:
        root = self.data_dir or os.environ.get("BASGCN_DATA") or "data"
        root = Path(root)
        return root / self.dataset if (root / self.dataset).is_dir() else root

    def with_model(self, **kw) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, **kw))


_MODEL_KEYS = {f.name for f in fields(BasgcnConfig)}
_EXP_KEYS = {f.name for f in fields(ExperimentConfig)} - {"model"}

PRESETS = {
    "default": {},
    # pins the epochs and batch size used for the MUTAG accuracy check
    "accuracy": {"epochs": 100, "batch_size": 32},
    "smoke": {"M": 8, "L": 3, "T": 1, "H": 4, "cnn_spec": "C4-P2-C4-F8", "fc_fuse": 8,
              "epochs": 2, "batch_size": 8, "folds": 2},
}


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from flat key/value pairs; unknown keys are rejected."""
    cfg = base or ExperimentConfig()
    unknown = set(values) - _MODEL_KEYS - _EXP_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model_kw = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    exp_kw = {k: v for k, v in values.items() if k in _EXP_KEYS}
    return replace(cfg, model=replace(cfg.model, **model_kw), **exp_kw)


def load_config(spec: str | None) -> ExperimentConfig:
    """``spec`` is a preset name or a path to a YAML file of flat key/value pairs.

    A YAML file may name a base preset with ``preset: <name>``.
    """
    if spec is None:
        return ExperimentConfig()
    if spec in PRESETS:
        return config_from_mapping(PRESETS[spec])
    path = Path(spec)
    if not path.is_file():
        raise ValueError(f"config {spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    try:
        values = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ValueError(f"invalid config file {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ValueError(f"config file {path} must hold key/value pairs")
    base = load_config(values.pop("preset")) if "preset" in values else None
    return config_from_mapping(values, base)


# ---------------------------------------------------------------------------
# splitting and label hygiene


def stratified_kfold(labels: Sequence[int], k: int, seed: int) -> np.ndarray:
    """Fold id for every sample; each class is shuffled and dealt round-robin.

    The dealing position carries over between classes so fold sizes differ by
    at most one.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("need at least two folds")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    pos = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = (pos + np.arange(len(idx))) % k
        pos = (pos + len(idx)) % k
    return fold_of


def stratified_tenfold_split(dataset: GraphDataset, seed: int) -> np.ndarray:
    return stratified_kfold(dataset.class_indices(), 10, seed)


class LabelLeakError(RuntimeError):
    """A sealed (test-fold) class label was read."""


class GuardedLabels:
    """Class labels whose test-fold entries raise until explicitly unsealed."""

    def __init__(self, labels, sealed: Sequence[int] = ()):
        self._labels = np.asarray(labels)
        self._sealed = np.zeros(len(self._labels), dtype=bool)
        self._sealed[np.asarray(sealed, dtype=np.int64)] = True
        self.reads = np.zeros(len(self._labels), dtype=np.int64)

    def __len__(self):
        return len(self._labels)

    def __getitem__(self, idx):
        sel = np.arange(len(self._labels))[idx]
        if np.any(self._sealed[sel]):
            raise LabelLeakError("test-fold class label read before evaluation")
        np.add.at(self.reads, np.atleast_1d(sel), 1)
        return self._labels[idx]

    def unseal(self):
        self._sealed[:] = False


# ---------------------------------------------------------------------------
# running


@dataclass
class FoldResult:
    repeat: int
    fold: int
    accuracy: float
    epochs: int
    seconds: float
    losses: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")


@dataclass
class CVReport:
    config: ExperimentConfig
    folds: list

    def accuracies(self) -> np.ndarray:
        return np.array([f.accuracy for f in self.folds])

    def summary(self) -> dict:
        return summarize([(f.repeat, f.accuracy) for f in self.folds],
                         self.config.dataset, self.config.mode)


def summarize(rows, dataset: str = "", mode: str = "directed") -> dict:
    """Mean accuracy plus standard errors over folds and over repeat means."""
    acc = np.array([a for _, a in rows], dtype=np.float64)
    reps = sorted({r for r, _ in rows})
    rep_means = np.array([np.mean([a for r, a in rows if r == rr]) for rr in reps])
    se_folds = float(acc.std(ddof=1) / math.sqrt(len(acc))) if len(acc) > 1 else None
    se_repeats = float(rep_means.std(ddof=1) / math.sqrt(len(rep_means))) if len(rep_means) > 1 else None
    pub = PUBLISHED.get((dataset, mode))
    return {
        "dataset": dataset, "mode": mode, "n_folds": int(len(acc)), "n_repeats": len(reps),
        "mean_accuracy": float(acc.mean()), "se_folds": se_folds, "se_repeats": se_repeats,
        "repeat_means": [float(x) for x in rep_means],
        "published_accuracy": None if pub is None else pub[0] / 100.0,
        "published_se": None if pub is None else pub[1] / 100.0,
    }


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def load_dataset(config: ExperimentConfig) -> GraphDataset:
    directory = config.resolved_data_dir()
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    return load_tu_dataset(directory, config.dataset).check_classification()


def cache_path(config: ExperimentConfig, fingerprint_hint: str = "all") -> Path | None:
    if not config.cache_dir:
        return None
    m = config.model
    name = f"{config.dataset}-M{m.M}-L{m.L}-s{config.seed}-{fingerprint_hint}.grid"
    return Path(config.cache_dir) / name


def prepare(config: ExperimentConfig, dataset: GraphDataset | None = None,
            fit_indices=None, db_mats=None, tag: str = "all") -> tuple[GridSet, bool]:
    """Build (or load from cache) the aligned grids for ``config``."""
    dataset = dataset or load_dataset(config)
    return load_or_prepare(cache_path(config, tag), dataset, config.model.M, config.model.L,
                           config.seed, fit_indices, threads=config.threads, db_mats=db_mats)


def run_fold(config: ExperimentConfig, gridset: GridSet, labels: GuardedLabels, n_classes: int,
             train_idx, test_idx, repeat: int, fold: int) -> FoldResult:
    """Train on ``train_idx`` and score ``test_idx``; test labels are read last."""
    start = time.perf_counter()
    X, A = stack_grids(gridset.grids, directed=config.mode == "directed")
    cfg = config.model
    model = BasgcnModel(cfg, X.shape[2], n_classes, seed=_derive_seed(config.seed, repeat, fold, 1))
    res = fit(model, X[train_idx], A[train_idx], labels[train_idx], cfg.epochs, cfg.batch_size,
              seed=_derive_seed(config.seed, repeat, fold, 2))
    pred, _ = model.predict(X[test_idx], A[test_idx])
    labels.unseal()
    acc = float(np.mean(pred == labels[test_idx]))
    return FoldResult(repeat, fold, acc, cfg.epochs, time.perf_counter() - start, res.losses)


def _fold_task(args):
    config, gridset, y, n_classes, train_idx, test_idx, r, f = args
    return run_fold(config, gridset, GuardedLabels(y, sealed=test_idx), n_classes,
                    train_idx, test_idx, r, f)


def run_cross_validation(config: ExperimentConfig, dataset: GraphDataset | None = None,
                         progress=None) -> CVReport:
    dataset = dataset or load_dataset(config)
    y = dataset.class_indices()
    db_mats = compute_db_matrices(dataset, config.model.L, config.threads)
    shared = None
    if config.prototypes == "transductive":
        shared, _ = prepare(config, dataset, db_mats=db_mats)

    tasks = []
    for r in range(config.repeats):
        fold_of = stratified_kfold(y, config.folds, _derive_seed(config.seed, r))
        for f in range(config.folds):
            test_idx = np.flatnonzero(fold_of == f)
            train_idx = np.flatnonzero(fold_of != f)
            gridset = shared
            if gridset is None:
                gridset, _ = prepare(config, dataset, fit_indices=train_idx, db_mats=db_mats,
                                     tag=f"r{r}f{f}")
            tasks.append((config, gridset, y, len(dataset.class_alphabet), train_idx, test_idx, r, f))

    if config.threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_fold_task(task))
            if progress:
                progress(results[-1])
    report = CVReport(config, results)
    if config.out_dir:
        write_results(report, config.out_dir)
    return report


# ---------------------------------------------------------------------------
# result files


def write_results(report: CVReport, out_dir) -> Path:
    """results.csv (one row per repeat x fold), losses.csv and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "results.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for fr in report.folds:
            secs = f"{fr.seconds:.3f}" if report.config.timing else ""
            w.writerow([fr.repeat, fr.fold, repr(fr.accuracy), fr.epochs, secs])
    with (out / "losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repeat", "fold", "epoch", "loss"])
        for fr in report.folds:
            for e, loss in enumerate(fr.losses, start=1):
                w.writerow([fr.repeat, fr.fold, e, repr(loss)])
    cfg = asdict(report.config)
    summary = report.summary()
    summary["config"] = cfg
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


def read_results(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / "results.csv"
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(CSV_COLUMNS) - set(rows[0]):
        raise ValueError(f"{path} lacks columns {set(CSV_COLUMNS) - set(rows[0])}")
    return rows


def render_report(run_dirs: Sequence, csv_out=None) -> str:
    """Summarize one or more run directories as a text table (and optional CSV)."""
    records = []
    for d in run_dirs:
        d = Path(d)
        rows = read_results(d)
        meta = {}
        if (d / "summary.json").is_file():
            meta = json.loads((d / "summary.json").read_text())
        dataset = meta.get("dataset", "")
        mode = meta.get("mode", "directed")
        s = summarize([(int(r["repeat"]), float(r["accuracy"])) for r in rows], dataset, mode)
        s["run"] = d.name
        records.append(s)
    cols = ["run", "dataset", "mode", "n_folds", "mean_accuracy", "se_folds", "se_repeats",
            "published_accuracy", "published_se"]
    if csv_out:
        with Path(csv_out).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            w.writerows(records)

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    table = [cols] + [[fmt(r[c]) for c in cols] for r in records]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


SWEEP_M = tuple(range(16, 65, 8))


def sweep_m(config: ExperimentConfig, values=SWEEP_M, dataset=None, progress=None) -> list:
    """Cross-validate once per grid size; returns and optionally writes sweep.csv."""
    dataset = dataset or load_dataset(config)
    rows = []
    for M in values:
        sub = config.with_model(M=M)
        if config.out_dir:
            sub = replace(sub, out_dir=str(Path(config.out_dir) / f"M{M}"))
        s = run_cross_validation(sub, dataset).summary()
        rows.append({"M": M, "mean_accuracy": s["mean_accuracy"], "se_folds": s["se_folds"]})
        if progress:
            progress(rows[-1])
    if config.out_dir:
        with (Path(config.out_dir) / "sweep.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["M", "mean_accuracy", "se_folds"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows


def train_single(config: ExperimentConfig, fold: int = 0, checkpoint=None, dataset=None) -> FoldResult:
    """Train one model on the ``fold``-th split of repeat 0."""
    dataset = dataset or load_dataset(config)
    y = dataset.class_indices()
    fold_of = stratified_kfold(y, config.folds, _derive_seed(config.seed, 0))
    test_idx = np.flatnonzero(fold_of == fold)
    train_idx = np.flatnonzero(fold_of != fold)
    fit_idx = None if config.prototypes == "transductive" else train_idx
    gridset, _ = prepare(config, dataset, fit_indices=fit_idx,
                         tag="all" if fit_idx is None else f"r0f{fold}")
    X, A = stack_grids(gridset.grids, directed=config.mode == "directed")
    cfg = config.model
    model = BasgcnModel(cfg, X.shape[2], len(dataset.class_alphabet), seed=_derive_seed(config.seed, 0, fold, 1))
    start = time.perf_counter()
    res = fit(model, X[train_idx], A[train_idx], y[train_idx], cfg.epochs, cfg.batch_size,
              seed=_derive_seed(config.seed, 0, fold, 2))
    pred, _ = model.predict(X[test_idx], A[test_idx])
    if checkpoint:
        model.save(checkpoint)
    return FoldResult(0, fold, float(np.mean(pred == y[test_idx])), cfg.epochs,
                      time.perf_counter() - start, res.losses)
