"""Delimited-text ingestion, preprocessing recipes, and the nested hierarchy index.

Tables are immutable: every operation returns a new ObservationTable. Numeric
columns are float arrays with NaN marking missing cells; categorical and
identifier columns are object arrays with None marking missing cells.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInputError,
    ImputationError,
    NestingViolationError,
    SchemaError,
)

log = logging.getLogger(__name__)

NUMERIC = "numeric"
CATEGORICAL = "categorical"
IDENTIFIER = "identifier"

_KINDS = (NUMERIC, CATEGORICAL, IDENTIFIER)


@dataclass(frozen=True)
class Column:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SchemaError(f"unknown column kind {self.kind!r}")

    def missing_mask(self) -> np.ndarray:
        if self.kind == NUMERIC:
            return np.isnan(self.values)
        return np.array([v is None for v in self.values], dtype=bool)


@dataclass(frozen=True)
class TableSchema:
    """Column roles declared in the [data] section of a model config."""

    kinds: dict[str, str]
    patient_key: str
    team_key: str
    facility_key: str
    responses: tuple[str, ...] = ()
    missing_marker: str = "NA"
    delimiter: str = ","

    @property
    def hierarchy_keys(self) -> tuple[str, str, str]:
        return (self.patient_key, self.team_key, self.facility_key)


class ObservationTable:
    """Long-format table: one row per subject-period, typed columns."""

    def __init__(self, columns: dict[str, Column], response_columns=(),
                 applied_trims=None, applied_bins=None):
        lengths = {len(c.values) for c in columns.values()}
        if len(lengths) > 1:
            raise SchemaError("columns have unequal lengths")
        self.columns = dict(columns)
        self.n_rows = lengths.pop() if lengths else 0
        self.response_columns = tuple(response_columns)
        # Applied-rule records make preprocess idempotent; see preprocess().
        self.applied_trims = dict(applied_trims or {})
        self.applied_bins = dict(applied_bins or {})
        for name in self.response_columns:
            if name not in self.columns:
                raise SchemaError(f"response column {name!r} not in table")

    def column(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}") from None

    def numeric(self, name: str) -> np.ndarray:
        col = self.column(name)
        if col.kind != NUMERIC:
            raise SchemaError(f"column {name!r} is {col.kind}, expected numeric")
        return col.values

    def labels(self, name: str) -> np.ndarray:
        col = self.column(name)
        if col.kind == NUMERIC:
            raise SchemaError(f"column {name!r} is numeric, expected labels")
        return col.values

    def select(self, mask: np.ndarray) -> "ObservationTable":
        cols = {n: Column(c.kind, c.values[mask]) for n, c in self.columns.items()}
        return ObservationTable(cols, self.response_columns,
                                self.applied_trims, self.applied_bins)

    def replace_column(self, name: str, column: Column) -> "ObservationTable":
        cols = dict(self.columns)
        cols[name] = column
        return ObservationTable(cols, self.response_columns,
                                self.applied_trims, self.applied_bins)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.columns):
            col = self.columns[name]
            h.update(name.encode())
            h.update(col.kind.encode())
            if col.kind == NUMERIC:
                h.update(np.ascontiguousarray(col.values, dtype=np.float64).tobytes())
            else:
                for v in col.values:
                    h.update(b"\x00" if v is None else v.encode())
                    h.update(b"\x1f")
        return h.hexdigest()

    def __repr__(self):
        return f"ObservationTable({self.n_rows} rows, {len(self.columns)} columns)"


@dataclass(frozen=True)
class HierarchyIndex:
    """Strictly nested patient -> team -> facility membership maps."""

    patient_team: dict[str, str]
    team_facility: dict[str, str]
    keys: tuple[str, str, str]

    @property
    def n_patients(self) -> int:
        return len(self.patient_team)

    @property
    def n_teams(self) -> int:
        return len(self.team_facility)

    @property
    def n_facilities(self) -> int:
        return len(set(self.team_facility.values()))

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (self.n_patients, self.n_teams, self.n_facilities)


@dataclass(frozen=True)
class PreprocessRules:
    """Imputation, percentile trimming, and binning recipes, per column."""

    imputation: dict[str, str] = field(default_factory=dict)
    trim: dict[str, tuple[float, float]] = field(default_factory=dict)
    bins: dict[str, tuple[tuple[float, ...], tuple[str, ...]]] = field(default_factory=dict)

    def __post_init__(self):
        for col, method in self.imputation.items():
            if method not in ("mode", "drop-row"):
                raise SchemaError(f"imputation for {col!r}: unknown method {method!r}")
        for col, (lo, hi) in self.trim.items():
            if not (0 <= lo < hi <= 100):
                raise SchemaError(f"trim for {col!r}: need 0 <= lo < hi <= 100, got ({lo}, {hi})")
        for col, (thresholds, labels) in self.bins.items():
            if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
                raise SchemaError(f"bins for {col!r}: thresholds must be strictly increasing")
            if len(labels) != len(thresholds) + 1:
                raise SchemaError(
                    f"bins for {col!r}: {len(thresholds)} thresholds need "
                    f"{len(thresholds) + 1} labels, got {len(labels)}")


def ingest_table(text: str, schema: TableSchema) -> ObservationTable:
    """Parse delimited content into a typed table.

    The first row is the header. Numeric cells equal to the missing marker
    (or unparseable) become NaN; label cells become None. Rows missing any
    of the three hierarchy identifiers are dropped with a logged count.
    """
    reader = csv.reader(io.StringIO(text), delimiter=schema.delimiter)
    rows = list(reader)
    if not rows:
        raise EmptyInputError("no header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise SchemaError(f"duplicated header name(s): {', '.join(dupes)}")
    data_rows = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    if not data_rows:
        raise EmptyInputError("no data rows")

    positions = {}
    for name in schema.kinds:
        if name not in header:
            raise SchemaError(f"declared column {name!r} missing from header")
        positions[name] = header.index(name)

    n = len(data_rows)
    columns: dict[str, Column] = {}
    for name, kind in schema.kinds.items():
        pos = positions[name]
        raw = [r[pos].strip() if pos < len(r) else "" for r in data_rows]
        if kind == NUMERIC:
            values = np.empty(n, dtype=np.float64)
            n_bad = 0
            for i, cell in enumerate(raw):
                if cell == "" or cell == schema.missing_marker:
                    values[i] = np.nan
                    n_bad += 1
                else:
                    try:
                        values[i] = float(cell)
                    except ValueError:
                        values[i] = np.nan
                        n_bad += 1
            if n_bad:
                log.info("column %s: %d missing/unparseable numeric cells", name, n_bad)
        else:
            values = np.array(
                [None if (c == "" or c == schema.missing_marker) else c for c in raw],
                dtype=object)
        columns[name] = Column(kind, values)

    table = ObservationTable(columns, schema.responses)

    # Hierarchy membership is never imputed; incomplete rows are unusable.
    keep = np.ones(table.n_rows, dtype=bool)
    for key in schema.hierarchy_keys:
        keep &= ~table.column(key).missing_mask()
    n_dropped = int((~keep).sum())
    if n_dropped:
        log.warning("dropping %d row(s) lacking a hierarchy identifier", n_dropped)
        table = table.select(keep)
        if table.n_rows == 0:
            raise EmptyInputError("all rows lacked a hierarchy identifier")
    return table


def _column_mode(col: Column):
    mask = col.missing_mask()
    present = col.values[~mask]
    if present.size == 0:
        return None
    values, counts = np.unique(present, return_counts=True)
    # Deterministic tie-break: np.unique sorts, argmax takes the first max.
    return values[np.argmax(counts)]


def preprocess(table: ObservationTable, rules: PreprocessRules) -> ObservationTable:
    """Apply imputation, percentile trimming, then binning.

    Idempotent for a fixed rule set: imputation and binning leave nothing
    further to do on a second pass, and applied trim/bin rules are recorded
    on the table so re-applying the identical rule is a no-op (re-cutting
    percentiles on already-trimmed data would keep shaving rows).
    """
    for col in list(rules.imputation) + list(rules.trim) + list(rules.bins):
        table.column(col)  # raises SchemaError on unknown columns

    for name, method in rules.imputation.items():
        col = table.column(name)
        mask = col.missing_mask()
        if not mask.any():
            continue
        if method == "drop-row":
            table = table.select(~mask)
        else:
            mode = _column_mode(col)
            if mode is None:
                raise ImputationError(f"column {name!r}: mode undefined (all values missing)")
            values = col.values.copy()
            values[mask] = mode
            table = table.replace_column(name, Column(col.kind, values))

    for name, (lo, hi) in rules.trim.items():
        if table.applied_trims.get(name) == (lo, hi):
            continue
        values = table.numeric(name)
        finite = values[~np.isnan(values)]
        if finite.size == 0:
            raise ImputationError(f"column {name!r}: cannot trim an all-missing column")
        cut_lo, cut_hi = np.percentile(finite, [lo, hi])  # linear interpolation
        keep = np.isnan(values) | ((values >= cut_lo) & (values <= cut_hi))
        n_out = int((~keep).sum())
        if n_out:
            log.info("column %s: trimming %d row(s) outside percentiles (%g, %g)",
                     name, n_out, lo, hi)
        table = table.select(keep)
        table.applied_trims[name] = (lo, hi)

    for name, (thresholds, labels) in rules.bins.items():
        rule = (tuple(thresholds), tuple(labels))
        if table.applied_bins.get(name) == rule:
            continue
        values = table.numeric(name)
        out = np.empty(len(values), dtype=object)
        idx = np.searchsorted(np.asarray(thresholds), values, side="right")
        for i, v in enumerate(values):
            out[i] = None if np.isnan(v) else labels[idx[i]]
        table = table.replace_column(name, Column(CATEGORICAL, out))
        table.applied_bins[name] = rule

    return table


def build_hierarchy(table: ObservationTable, keys: tuple[str, str, str]) -> HierarchyIndex:
    """Build patient->team and team->facility maps, rejecting nesting violations."""
    patient_key, team_key, facility_key = keys
    for key in keys:
        col = table.column(key)
        if col.kind != IDENTIFIER:
            raise SchemaError(f"hierarchy key {key!r} is {col.kind}, expected identifier")
        if col.missing_mask().any():
            raise SchemaError(f"hierarchy key {key!r} has missing values")

    patients = table.labels(patient_key)
    teams = table.labels(team_key)
    facilities = table.labels(facility_key)

    patient_team: dict[str, str] = {}
    team_facility: dict[str, str] = {}
    for p, t, f in zip(patients, teams, facilities):
        seen_t = patient_team.get(p)
        if seen_t is not None and seen_t != t:
            raise NestingViolationError(
                f"patient {p!r} appears under teams {seen_t!r} and {t!r}")
        patient_team[p] = t
        seen_f = team_facility.get(t)
        if seen_f is not None and seen_f != f:
            raise NestingViolationError(
                f"team {t!r} appears under facilities {seen_f!r} and {f!r}")
        team_facility[t] = f

    return HierarchyIndex(patient_team, team_facility, tuple(keys))
