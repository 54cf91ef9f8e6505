"""Per-column activation curves, category marginals and monotonicity flags.

Every fitted model here is additive in its columns: the logit is
``alpha + sum_i a_i(x_i)`` with ``a_i = beta_i * z_i(x_i)`` (or ``beta_i * x_i``
for the linear models), so each column can be plotted on its own.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import CONTINUOUS, ONEHOT, ORDINAL, DatasetTable, EncodedMatrix
from .models import ModelState, column_activations, logits

GRID_POINTS = 101
DEAD_BAND = 1e-6

INCREASING = "monotone_increasing"
DECREASING = "monotone_decreasing"
NON_MONOTONE = "non_monotone"


@dataclass(frozen=True)
class ActivationCurve:
    column: str
    x: np.ndarray  # standardized scale, ascending
    labels: tuple[str, ...]
    activation: np.ndarray


@dataclass(frozen=True)
class CategoryMarginal:
    column: str
    categories: tuple[str, ...]
    means: tuple[float | None, ...]
    counts: tuple[int, ...]


@dataclass(frozen=True)
class MonotonicityFlag:
    column: str
    status: str
    flat: bool = False
    extremum_kind: str | None = None  # "minimum" | "maximum"
    extremum_index: int | None = None
    extremum_x: float | None = None
    extremum_label: str | None = None

    @property
    def is_monotone(self) -> bool:
        return self.status != NON_MONOTONE

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _column_index(state: ModelState, column: str) -> int:
    for j, c in enumerate(state.columns):
        if c.name == column:
            return j
    raise KeyError(f"model has no column {column!r}")


def _scale(state: ModelState, j: int) -> tuple[float, float]:
    if state.stats is None:
        return 0.0, 1.0
    return float(state.stats.mean[j]), float(state.stats.std[j])


def _activate(state: ModelState, j: int, x: np.ndarray) -> np.ndarray:
    if state.kind == "monotonic":
        return state.beta[j] * np.asarray(state.maps[j].z(x), dtype=np.float64)
    return state.beta[j] * x


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def activation_curve(
    state: ModelState,
    column: str,
    matrix: EncodedMatrix | None = None,
    grid: Sequence[float] | None = None,
) -> ActivationCurve:
    """Activation of one encoded column over its grid.

    Ordinal columns use their standardized category values; one-hot
    indicators use {0, 1}; continuous columns use ``grid`` if given, else
    101 evenly spaced points across the range observed in ``matrix``.
    """
    j = _column_index(state, column)
    col = state.columns[j]
    mean, std = _scale(state, j)
    if col.kind == ORDINAL:
        x = (np.arange(len(col.categories)) - mean) / std
        labels = tuple(col.categories)
    elif col.kind == ONEHOT:
        x = (np.array([0.0, 1.0]) - mean) / std
        labels = (f"not {col.categories[0]}", col.categories[0])
    else:
        if grid is not None:
            x = np.asarray(grid, dtype=np.float64)
        elif matrix is not None:
            vals = matrix.values[:, matrix.index_of(column)]
            x = np.linspace(vals.min(), vals.max(), GRID_POINTS)
        else:
            raise ValueError(f"continuous column {column!r} needs a matrix or an explicit grid")
        labels = tuple(_fmt(v * std + mean) for v in x)
    order = np.argsort(x, kind="stable")
    x = x[order]
    labels = tuple(labels[i] for i in order)
    act = _activate(state, j, x)
    if not np.all(np.isfinite(act)):
        raise ValueError(f"non-finite activation for column {column!r}")
    return ActivationCurve(column, x, labels, act)


def activation_curves(state: ModelState, matrix: EncodedMatrix) -> list[ActivationCurve]:
    return [activation_curve(state, c.name, matrix) for c in state.columns]


def category_marginal(table: DatasetTable, column: str) -> CategoryMarginal:
    """Mean target and row count per category, over every row of ``table``."""
    spec = table.column(column)
    if spec.kind == CONTINUOUS:
        raise ValueError(f"{column!r} is continuous; marginals need a categorical column")
    values = table.columns[column]
    means, counts = [], []
    for cat in spec.categories:
        mask = values == cat
        k = int(mask.sum())
        counts.append(k)
        means.append(float(table.target[mask].mean()) if k else None)
    return CategoryMarginal(column, tuple(spec.categories), tuple(means), tuple(counts))


def classify_curve(curve: ActivationCurve, dead_band: float = DEAD_BAND) -> MonotonicityFlag:
    a = curve.activation
    d = np.diff(a)
    signs = np.where(d > dead_band, 1, np.where(d < -dead_band, -1, 0))
    nz = signs[signs != 0]
    if nz.size == 0:
        return MonotonicityFlag(curve.column, INCREASING, flat=True)
    if np.all(nz > 0):
        return MonotonicityFlag(curve.column, INCREASING)
    if np.all(nz < 0):
        return MonotonicityFlag(curve.column, DECREASING)
    kind = "minimum" if nz[0] < 0 else "maximum"
    idx = int(np.argmin(a) if kind == "minimum" else np.argmax(a))
    if idx in (0, len(a) - 1):
        # several wiggles: fall back to the first turning point
        first = int(np.nonzero(signs)[0][np.nonzero(np.diff(nz))[0][0] + 1])
        idx = first
    return MonotonicityFlag(
        curve.column, NON_MONOTONE, False, kind, idx, float(curve.x[idx]), curve.labels[idx]
    )


def monotonicity_flags(
    state: ModelState, matrix: EncodedMatrix, dead_band: float = DEAD_BAND
) -> dict[str, MonotonicityFlag]:
    """Classify every column's activation curve by the sign pattern of its steps."""
    return {c.column: classify_curve(c, dead_band) for c in activation_curves(state, matrix)}


def decomposition_residual(state: ModelState, matrix: EncodedMatrix) -> float:
    """max |alpha + sum of row activations - logit| over the rows of ``matrix``."""
    total = column_activations(state, matrix).sum(axis=1) + state.alpha
    return float(np.max(np.abs(total - logits(state, matrix)))) if len(total) else 0.0


# --- export -------------------------------------------------------------------


def write_curves_csv(curves: Iterable[ActivationCurve], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "label", "x_standardized", "activation"])
        for c in curves:
            for x, lab, a in zip(c.x, c.labels, c.activation):
                w.writerow([c.column, lab, repr(float(x)), repr(float(a))])


def write_marginals_csv(marginals: Iterable[CategoryMarginal], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "category", "mean", "count"])
        for m in marginals:
            for cat, mean, k in zip(m.categories, m.means, m.counts):
                w.writerow([m.column, cat, "" if mean is None else repr(mean), k])


def render_svg(
    curve: ActivationCurve, path: str | Path, marginal: CategoryMarginal | None = None
) -> None:
    """Line plot of one curve; the marginal (if any) goes on a second axis."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("SVG output needs matplotlib (pip install 'artifact[plot]')") from exc

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(curve.x, curve.activation, marker="o" if len(curve.x) <= 20 else None)
    ax.set_xlabel(f"{curve.column} (standardized)")
    ax.set_ylabel("activation")
    if len(curve.x) <= 20:
        ax.set_xticks(curve.x)
        ax.set_xticklabels(curve.labels, rotation=30, ha="right", fontsize=7)
    if marginal is not None:
        by_cat = dict(zip(marginal.categories, marginal.means))
        pts = [(x, by_cat[lab]) for x, lab in zip(curve.x, curve.labels) if by_cat.get(lab) is not None]
        if pts:
            ax2 = ax.twinx()
            ax2.plot([p[0] for p in pts], [p[1] for p in pts], "s--", color="tab:orange")
            ax2.set_ylabel("mean outcome")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
