"""LLM-derived priors: correlation signs, category orderings and the prompts
used to elicit them.

Prior file layout::

    {"provenance": "...",
     "columns": {"Glucose": {"correlation": 1},
                 "ChestPainType": {"ordering": ["TA", "ATA", "NAP", "ASY"],
                                   "correlation": -1,          # optional
                                   "raw_response": "..."}}}    # optional

Orderings list the most influential category first. With ordinal encoding
position 0 becomes integer 0, so an ordering-only entry implies a negative
sign on the encoded column (``ORDERING_SIGN``); give ``correlation`` on the
entry to override it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import CONTINUOUS, ORDINAL, ColumnSchema, EncodedMatrix

ORDERING_SIGN = -1
VALID_SIGNS = (-1, 0, 1)


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class PriorEntry:
    correlation: int | None = None
    ordering: tuple[str, ...] | None = None
    raw_response: str | None = None

    def to_json(self) -> dict:
        out: dict = {}
        if self.ordering is not None:
            out["ordering"] = list(self.ordering)
        if self.correlation is not None:
            out["correlation"] = self.correlation
        if self.raw_response is not None:
            out["raw_response"] = self.raw_response
        return out


@dataclass(frozen=True)
class PriorSpec:
    entries: Mapping[str, PriorEntry] = field(default_factory=dict)
    provenance: str = ""

    def correlation(self, column: str) -> int:
        entry = self.entries.get(column)
        if entry is None or entry.correlation is None:
            return 0
        return entry.correlation

    def ordering(self, column: str) -> tuple[str, ...] | None:
        entry = self.entries.get(column)
        return None if entry is None else entry.ordering

    @property
    def orderings(self) -> dict[str, tuple[str, ...]]:
        return {k: e.ordering for k, e in self.entries.items() if e.ordering is not None}

    def to_json(self) -> dict:
        return {
            "provenance": self.provenance,
            "columns": {k: e.to_json() for k, e in self.entries.items()},
        }


def _check_sign(value, column: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value not in VALID_SIGNS:
        raise PriorError(f"{column}: correlation must be one of -1, 0, 1 (got {value!r})")
    return int(value)


def validate_prior(spec: PriorSpec, schema: Sequence[ColumnSchema]) -> PriorSpec:
    """Check ``spec`` against ``schema``; returns it unchanged when valid."""
    by_name = {c.name: c for c in schema}
    for name, entry in spec.entries.items():
        col = by_name.get(name)
        if col is None:
            raise PriorError(f"prior names unknown column {name!r}")
        if entry.correlation is not None:
            _check_sign(entry.correlation, name)
        if entry.ordering is not None:
            if col.kind == CONTINUOUS:
                raise PriorError(f"{name}: orderings only apply to categorical columns")
            if len(entry.ordering) != len(set(entry.ordering)) or set(entry.ordering) != set(
                col.categories
            ):
                raise PriorError(
                    f"{name}: ordering {list(entry.ordering)} is not a permutation of "
                    f"{list(col.categories)}"
                )
    return spec


def parse_prior(obj: Mapping, schema: Sequence[ColumnSchema]) -> PriorSpec:
    if not isinstance(obj, Mapping):
        raise PriorError("prior file must hold a JSON object")
    cols = obj.get("columns", {})
    if not isinstance(cols, Mapping):
        raise PriorError("'columns' must be an object")
    entries = {}
    for name, raw in cols.items():
        if not isinstance(raw, Mapping):
            raise PriorError(f"{name}: entry must be an object")
        unknown = set(raw) - {"correlation", "ordering", "raw_response"}
        if unknown:
            raise PriorError(f"{name}: unknown keys {sorted(unknown)}")
        corr = raw.get("correlation")
        ordering = raw.get("ordering")
        entries[name] = PriorEntry(
            correlation=None if corr is None else _check_sign(corr, name),
            ordering=None if ordering is None else tuple(str(c) for c in ordering),
            raw_response=raw.get("raw_response"),
        )
    return validate_prior(PriorSpec(entries, str(obj.get("provenance", ""))), schema)


def load_prior_file(path: str | Path, schema: Sequence[ColumnSchema]) -> PriorSpec:
    """Read and validate a prior file. An empty file means "no priors"."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return PriorSpec()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PriorError(f"{path}: invalid JSON ({exc})") from exc
    return parse_prior(obj, schema)


def prior_vector(
    spec: PriorSpec, matrix: EncodedMatrix, ordering_sign: int = ORDERING_SIGN
) -> np.ndarray:
    """Target weight vector, one entry per encoded column.

    Ordinal columns only pick up a sign when they were encoded with the
    prior's own ordering; one-hot indicators always get 0.
    """
    out = np.zeros(len(matrix.columns), dtype=np.float64)
    for j, ec in enumerate(matrix.columns):
        entry = spec.entries.get(ec.source)
        if entry is None:
            continue
        if ec.kind == CONTINUOUS:
            out[j] = entry.correlation or 0
        elif ec.kind == ORDINAL:
            if entry.ordering is not None and tuple(entry.ordering) != tuple(ec.categories):
                continue
            if entry.correlation is not None:
                out[j] = entry.correlation
            elif entry.ordering is not None:
                out[j] = ordering_sign
    return out


# --- prompts ------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetMeta:
    goal: str
    label_description: str
    domains: tuple[str, ...]
    column_descriptions: Mapping[str, str]
    target_description: str
    category_names: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    help_request: str = ""

    @classmethod
    def from_json(cls, obj: Mapping) -> "DatasetMeta":
        try:
            domains = obj["domains"]
            if isinstance(domains, str):
                domains = [domains]
            return cls(
                goal=obj["goal"],
                label_description=obj["label_description"],
                domains=tuple(domains),
                column_descriptions=dict(obj["column_descriptions"]),
                target_description=obj["target_description"],
                category_names={k: dict(v) for k, v in obj.get("category_names", {}).items()},
                help_request=obj.get("help_request", ""),
            )
        except KeyError as exc:
            raise PriorError(f"dataset meta is missing field {exc}") from None


def load_meta(path: str | Path) -> DatasetMeta:
    with open(path, encoding="utf-8") as fh:
        return DatasetMeta.from_json(json.load(fh))


def _domains(meta: DatasetMeta) -> str:
    d = list(meta.domains)
    if len(d) <= 1:
        return "".join(d)
    return ", ".join(d[:-1]) + " and " + d[-1]


def _preamble(meta: DatasetMeta, with_help: bool) -> str:
    if not meta.goal.strip():
        warnings.warn("dataset goal is empty; the prompt will have an empty slot", stacklevel=3)
    text = f"I'm creating a system to {meta.goal}."
    if with_help and meta.help_request:
        text += f" {meta.help_request}"
    return (
        f"{text} There are many factors that determine if {meta.label_description}, "
        "but I am interested in averaging over the unknown factors. Keep your answers short. "
        f"Based on your domain knowledge of {_domains(meta)}, "
    )


def _description(meta: DatasetMeta, column: str) -> str:
    desc = meta.column_descriptions.get(column)
    if not desc:
        raise PriorError(f"no description for column {column!r} in dataset meta")
    return desc


def generate_correlation_prompt(meta: DatasetMeta, column: str) -> str:
    desc = _description(meta, column)
    return (
        _preamble(meta, with_help=False)
        + f"does {desc} positively or negatively correlate with the probability of "
        f"{meta.target_description}?"
    )


def generate_ordering_prompt(
    meta: DatasetMeta, column: str, categories: Sequence[str]
) -> str:
    """Ranking prompt; ``categories`` are schema labels, listed in schema order."""
    desc = _description(meta, column)
    if not categories:
        raise PriorError(f"column {column!r} has no categories to rank")
    names = meta.category_names.get(column)
    if not names:
        raise PriorError(f"no category display names for column {column!r}")
    missing = [c for c in categories if c not in names]
    if missing:
        raise PriorError(f"{column}: missing display names for {missing}")
    listing = ", ".join(names[c] for c in categories)
    return (
        _preamble(meta, with_help=True)
        + f"rank the following {desc} by how likely they are to influence "
        f"{meta.target_description}:\n{listing}"
    )


def prompts_for_schema(meta: DatasetMeta, schema: Sequence[ColumnSchema]) -> dict[str, str]:
    """One prompt per schema column that ``meta`` describes."""
    out = {}
    for col in schema:
        if col.name not in meta.column_descriptions:
            continue
        if col.is_categorical:
            out[col.name] = generate_ordering_prompt(meta, col.name, col.categories)
        else:
            out[col.name] = generate_correlation_prompt(meta, col.name)
    return out
