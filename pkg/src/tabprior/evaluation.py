"""Few-shot evaluation protocol: shot ladder x seeds x encodings x methods."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import __version__
from .data import (
    ENCODINGS,
    DatasetTable,
    apply_standardizer,
    encode_table,
    fit_standardizer,
    load_dataset,
    sample_shots,
)
from .models import KINDS, TrainConfig, lambda_schedule, map_decay_schedule, predict, train
from .priors import PriorSpec, load_prior_file, prior_vector

log = logging.getLogger(__name__)

DEFAULT_SHOTS = (4, 8, 16, 32, 64, 128, 256, 512)
DEFAULT_SEEDS = tuple(range(20))
L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
DEFAULT_TOLERANCE = 0.03


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts."""
    a, b = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint32)
    return int((int(a) << 31) ^ int(b))


@dataclass
class CellResult:
    method: str
    encoding: str
    n: int
    seed: int
    auc: float | None
    lam: float = 0.0
    l2: float | None = None
    epochs: int = 0
    error: str | None = None


def _fit_and_score(table, spec, method, encoding, train_idx, test_idx, config, beta_sign):
    matrix = encode_table(table, encoding, spec.orderings)
    stats = fit_standardizer(matrix, train_idx)
    matrix = apply_standardizer(matrix, stats)
    bp = prior_vector(spec, matrix, beta_sign)
    tr = matrix.rows(train_idx)
    state = train(method, tr, table.target[train_idx], bp, config)
    scores = predict(state, matrix.rows(test_idx))
    return auc(scores, table.target[test_idx]), state


def _tune_l2(table, spec, encoding, n, seed, base_seed, test_idx, config, beta_sign):
    """Pick the ridge strength on a same-size validation task drawn from the test pool."""
    pool = table.subset(test_idx)
    split = sample_shots(pool, n, derive_seed(base_seed, seed, n, 2))
    v_train = test_idx[split.train_indices]
    v_test = test_idx[split.test_indices]
    best, best_auc = config.l2_fallback, -1.0
    for l2 in L2_GRID:
        cfg = TrainConfig(**{**config.to_json(), "l2_fallback": l2})
        try:
            a, _ = _fit_and_score(table, spec, "lr", encoding, v_train, v_test, cfg, beta_sign)
        except ValueError:
            continue
        if a > best_auc + 1e-12:
            best, best_auc = l2, a
    return best


@dataclass
class FittedCell:
    state: object
    split: object
    matrix: object
    auc: float
    l2: float | None


def fit_cell(
    table: DatasetTable,
    spec: PriorSpec,
    method: str,
    encoding: str,
    n: int,
    seed: int,
    base_seed: int = 0,
    config: TrainConfig | None = None,
    tune_lr: bool = False,
    beta_sign: int = -1,
) -> FittedCell:
    """sample_shots -> encode -> standardize on train -> fit -> AUC on the rest.

    The split depends on ``(base_seed, seed, n)`` only, so every method sees
    the same rows for a given seed.
    """
    if method not in KINDS:
        raise ValueError(f"unknown method {method!r}")
    config = config or TrainConfig()
    split = sample_shots(table, n, derive_seed(base_seed, seed, n))
    l2 = None
    if method == "lr" and tune_lr:
        l2 = _tune_l2(
            table, spec, encoding, n, seed, base_seed, split.test_indices, config, beta_sign
        )
    cfg = TrainConfig(
        **{
            **config.to_json(),
            "lam": lambda_schedule(n, method),
            "seed": derive_seed(base_seed, seed, n, 1),
            **({"l2_fallback": l2} if l2 is not None else {}),
            **({"map_decay": map_decay_schedule(n)} if config.map_decay is None else {}),
        }
    )
    matrix = encode_table(table, encoding, spec.orderings)
    matrix = apply_standardizer(matrix, fit_standardizer(matrix, split.train_indices))
    bp = prior_vector(spec, matrix, beta_sign)
    state = train(method, matrix.rows(split.train_indices), table.target[split.train_indices], bp, cfg)
    scores = predict(state, matrix.rows(split.test_indices))
    a = auc(scores, table.target[split.test_indices])
    return FittedCell(state, split, matrix, a, cfg.l2_fallback if method == "lr" else None)


def run_cell(
    table: DatasetTable,
    spec: PriorSpec,
    method: str,
    encoding: str,
    n: int,
    seed: int,
    base_seed: int = 0,
    config: TrainConfig | None = None,
    tune_lr: bool = False,
    beta_sign: int = -1,
) -> CellResult:
    """One (method, encoding, n, seed) evaluation; see ``fit_cell``."""
    fc = fit_cell(table, spec, method, encoding, n, seed, base_seed, config, tune_lr, beta_sign)
    return CellResult(
        method, encoding, n, seed, fc.auc, fc.state.fit_info["lam"], fc.l2, fc.state.fit_info["epochs"]
    )


@dataclass
class ExperimentGrid:
    dataset_id: str
    dataset: str
    schema: str
    priors: str | None = None
    methods: Sequence[str] = ("lr",)
    encodings: Sequence[str] = ("raw",)
    shots: Sequence[int] = DEFAULT_SHOTS
    seeds: Sequence[int] = DEFAULT_SEEDS
    base_seed: int = 0
    tune_lr: bool = False
    pairs: Sequence[Sequence[str]] | None = None
    train: Mapping = field(default_factory=dict)

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.encodings = tuple(self.encodings)
        self.shots = tuple(int(s) for s in self.shots)
        self.seeds = tuple(int(s) for s in self.seeds)
        for m in self.methods:
            if m not in KINDS:
                raise ValueError(f"unknown method {m!r}; expected one of {KINDS}")
        for e in self.encodings:
            if e not in ENCODINGS:
                raise ValueError(f"unknown encoding {e!r}; expected one of {ENCODINGS}")
        if list(self.shots) != sorted(self.shots) or len(set(self.shots)) != len(self.shots):
            raise ValueError("shots must be strictly ascending")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.pairs is not None:
            self.pairs = tuple((m, e) for m, e in self.pairs)

    def cells(self) -> list[tuple[str, str]]:
        if self.pairs is not None:
            return list(self.pairs)
        return [(m, e) for m in self.methods for e in self.encodings]

    def to_json(self) -> dict:
        out = asdict(self)
        out["pairs"] = None if self.pairs is None else [list(p) for p in self.pairs]
        out["train"] = dict(self.train)
        return out

    @classmethod
    def from_json(cls, obj: Mapping, base_dir: str | Path | None = None) -> "ExperimentGrid":
        obj = dict(obj)
        if isinstance(obj.get("seeds"), int):
            obj["seeds"] = list(range(obj["seeds"]))
        if base_dir is not None:
            for key in ("dataset", "schema", "priors"):
                if obj.get(key) and not Path(obj[key]).is_absolute():
                    obj[key] = str(Path(base_dir) / obj[key])
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def load_grid(path: str | Path) -> ExperimentGrid:
    with open(path, encoding="utf-8") as fh:
        return ExperimentGrid.from_json(json.load(fh), Path(path).parent)


@dataclass
class CellSummary:
    method: str
    encoding: str
    shots: int
    seeds: list[int]
    aucs: list[float]
    failures: list[dict] = field(default_factory=list)

    @property
    def key(self) -> str:
        return f"{self.method}_{self.encoding}"

    @property
    def auc_mean(self) -> float | None:
        return float(np.mean(self.aucs)) if self.aucs else None

    @property
    def auc_std(self) -> float | None:
        return float(np.std(self.aucs)) if self.aucs else None

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "encoding": self.encoding,
            "shots": self.shots,
            "auc_mean": self.auc_mean,
            "auc_std": self.auc_std,
            "seeds": self.seeds,
            "aucs": self.aucs,
            "failures": self.failures,
        }


@dataclass
class EvalReport:
    dataset_id: str
    cells: list[CellSummary]
    metadata: dict = field(default_factory=dict)

    def cell(self, method: str, encoding: str, shots: int) -> CellSummary:
        for c in self.cells:
            if (c.method, c.encoding, c.shots) == (method, encoding, shots):
                return c
        raise KeyError((method, encoding, shots))

    def payload(self) -> dict:
        """Deterministic content (no timestamps)."""
        return {
            "dataset_id": self.dataset_id,
            "config_hash": self.metadata.get("config_hash"),
            "cells": [c.to_json() for c in self.cells],
        }

    def to_json(self) -> dict:
        return {**self.payload(), "metadata": self.metadata}

    @classmethod
    def from_json(cls, obj: Mapping) -> "EvalReport":
        cells = [
            CellSummary(
                c["method"], c["encoding"], int(c["shots"]), list(c["seeds"]),
                list(c["aucs"]), list(c.get("failures", [])),
            )
            for c in obj["cells"]
        ]
        return cls(obj["dataset_id"], cells, dict(obj.get("metadata", {})))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "encoding", "shots", "seed", "auc"])
            for c in self.cells:
                for s, a in zip(c.seeds, c.aucs):
                    w.writerow([c.method, c.encoding, c.shots, s, repr(a)])


def load_report(path: str | Path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_json(json.load(fh))


_WORKER: dict = {}


def _init_worker(table, spec):
    _WORKER["table"], _WORKER["spec"] = table, spec


def _run_job(job) -> CellResult:
    method, encoding, n, seed, base_seed, cfg, tune = job
    try:
        return run_cell(
            _WORKER["table"], _WORKER["spec"], method, encoding, n, seed, base_seed,
            TrainConfig.from_json(cfg), tune,
        )
    except Exception as exc:  # recorded per cell, not fatal for the grid
        return CellResult(method, encoding, n, seed, None, error=f"{type(exc).__name__}: {exc}")


def run_grid(
    grid: ExperimentGrid,
    threads: int = 1,
    table: DatasetTable | None = None,
    spec: PriorSpec | None = None,
) -> EvalReport:
    """Execute every (cell, shots, seed) job and aggregate per cell."""
    started = time.time()
    if table is None:
        table = load_dataset(grid.dataset, grid.schema)
    if spec is None:
        spec = load_prior_file(grid.priors, table.schema) if grid.priors else PriorSpec()
    too_big = [n for n in grid.shots if n >= len(table)]
    if too_big:
        raise ValueError(f"shots {too_big} leave no test rows in {len(table)} rows")
    cfg = TrainConfig.from_json(dict(grid.train)).to_json()
    jobs = [
        (m, e, n, s, grid.base_seed, cfg, grid.tune_lr)
        for (m, e) in grid.cells()
        for n in grid.shots
        for s in grid.seeds
    ]
    if threads > 1:
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(table, spec)) as ex:
            results = list(ex.map(_run_job, jobs, chunksize=1))
    else:
        _init_worker(table, spec)
        results = [_run_job(j) for j in jobs]

    cells = []
    for (m, e) in grid.cells():
        for n in grid.shots:
            rs = [r for r in results if (r.method, r.encoding, r.n) == (m, e, n)]
            ok = [r for r in rs if r.error is None]
            bad = [{"seed": r.seed, "error": r.error} for r in rs if r.error is not None]
            for b in bad:
                log.warning("cell %s/%s n=%d seed=%d failed: %s", m, e, n, b["seed"], b["error"])
            cells.append(CellSummary(m, e, n, [r.seed for r in ok], [r.auc for r in ok], bad))
    meta = {
        "config_hash": grid.config_hash(),
        "grid": grid.to_json(),
        "tool_version": __version__,
        "started": started,
        "finished": time.time(),
    }
    return EvalReport(grid.dataset_id, cells, meta)


# --- reference comparison -----------------------------------------------------


class MissingReferenceError(KeyError):
    pass


@dataclass
class CellComparison:
    key: str
    shots: int
    mean: float | None
    reference: float
    diff: float
    passed: bool


def load_reference(path: str | Path | None = None) -> dict:
    """Transcribed reference tables; defaults to the bundled copy."""
    if path is None:
        text = resources.files("tabprior").joinpath("resources/reference_tables.json").read_text()
        return json.loads(text)
    with open(path, encoding="utf-8") as fh:
        ref = json.load(fh)
    if not isinstance(ref, Mapping) or not all(isinstance(v, Mapping) for v in ref.values()):
        raise ValueError(f"{path}: reference must map dataset -> method_encoding -> shots")
    return ref


def compare_report(
    report: EvalReport, reference: Mapping, tolerance: float = DEFAULT_TOLERANCE
) -> list[CellComparison]:
    """Per-cell |mean - reference| against ``tolerance`` (absolute AUC)."""
    table = reference.get(report.dataset_id)
    missing = []
    out = []
    for c in report.cells:
        ref = None
        if isinstance(table, Mapping):
            ref = table.get(c.key, {}).get(str(c.shots))
        if ref is None:
            missing.append(f"{report.dataset_id}/{c.key}/{c.shots}")
            continue
        mean = c.auc_mean
        diff = math.inf if mean is None else abs(mean - float(ref["mean"]))
        out.append(CellComparison(c.key, c.shots, mean, float(ref["mean"]), diff, diff <= tolerance))
    if missing:
        raise MissingReferenceError(f"no reference value for cells: {', '.join(missing)}")
    return out
