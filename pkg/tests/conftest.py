from __future__ import annotations

import functools
from pathlib import Path

import numpy as np
import pytest

from tabprior import evaluation, models
from tabprior.analyze import decomposition_residual
from tabprior.data import (
    CATEGORICAL,
    CONTINUOUS,
    ColumnSchema,
    DatasetTable,
    EncodedColumn,
    EncodedMatrix,
    load_dataset,
)

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"

# Every model fitted anywhere in the suite is checked here: the per-column
# activations plus alpha must reproduce the logit on the training rows.
FIT_LOG: list[float] = []
DECOMPOSITION_TOL = 1e-9
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

_original_train = models.train


@functools.wraps(_original_train)
def _checked_train(kind, matrix, y, beta_p, config=None):
    state = _original_train(kind, matrix, y, beta_p, config)
    resid = decomposition_residual(state, matrix)
    FIT_LOG.append(resid)
    assert resid <= DECOMPOSITION_TOL, f"decomposition residual {resid:.3g} after {kind} fit"
    return state


@pytest.fixture(autouse=True, scope="session")
def _decomposition_hook():
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(models, "train", _checked_train)
        mp.setattr(evaluation, "train", _checked_train)
        yield


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    if 10 in ACCEPTANCE and FIT_LOG:
        # the hook saw every fit in the session, including later test files
        passed, detail = ACCEPTANCE[10]
        worst = max(FIT_LOG)
        ACCEPTANCE[10] = (
            passed and worst <= DECOMPOSITION_TOL,
            f"{detail.split(';')[0]}; {len(FIT_LOG)} suite fits worst {worst:.1e}",
        )
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        )


# --- shared data ----------------------------------------------------------------


def dataset_paths(name: str) -> tuple[Path, Path, Path]:
    d = DATA / name
    return d / f"{name}.csv", d / "schema.json", d / "priors.json"


@pytest.fixture(scope="session")
def diabetes():
    csv, schema, _ = dataset_paths("diabetes")
    return load_dataset(csv, schema)


@pytest.fixture(scope="session")
def cleveland():
    csv, schema, _ = dataset_paths("cleveland")
    return load_dataset(csv, schema)


def make_table(n: int = 40, seed: int = 0) -> DatasetTable:
    """Small mixed table: two continuous columns, one 3-level categorical."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    b = rng.normal(size=n)
    c = rng.choice(np.array(["lo", "mid", "hi"], dtype=object), size=n)
    logit = 1.5 * a - 0.5 * b + np.where(c == "hi", 1.0, np.where(c == "lo", -1.0, 0.0))
    y = (rng.uniform(size=n) < 1 / (1 + np.exp(-logit))).astype(np.int64)
    y[0], y[1] = 0, 1
    schema = (
        ColumnSchema("a", CONTINUOUS),
        ColumnSchema("b", CONTINUOUS),
        ColumnSchema("c", CATEGORICAL, ("lo", "mid", "hi")),
    )
    return DatasetTable(schema, {"a": a, "b": b, "c": c}, y, "y")


@pytest.fixture
def toy_table():
    return make_table()


def random_matrix(rows: int, cols: int, rng) -> EncodedMatrix:
    values = rng.normal(size=(rows, cols))
    columns = tuple(EncodedColumn(f"x{j}", f"x{j}", CONTINUOUS) for j in range(cols))
    return EncodedMatrix(values, columns)


def random_labels(rows: int, rng) -> np.ndarray:
    y = rng.integers(0, 2, size=rows)
    y[0], y[-1] = 0, 1
    return y
