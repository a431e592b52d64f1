"""Stacked multivariate form and the fixed/random design matrices.

A table with n rows and P responses becomes n*P stacked rows (subject-major,
response-minor). The fixed design realizes per-response intercepts, main
effects, transforms, products, and equality-constraint merging; the random
design is a block-sparse incidence-and-covariate matrix whose column spans
map one-to-one onto the covariance blocks.

Column ordering convention: blocks in declaration order; within a block,
group-major, then term, then response. Group ids are sorted lexically.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .covariance import IwPrior
from .errors import DesignError, CollinearityWarning, PredictionError
from .families import Family
from .modelspec import (
    ExpandedBlock,
    FixedTermSpec,
    ModelSpec,
    Slot,
    categorical_levels,
    parse_term_expression,
)
from .tabular import CATEGORICAL, NUMERIC, HierarchyIndex, ObservationTable, build_hierarchy


@dataclass(eq=False)
class StackedData:
    """One row per (subject, response); dummies select exactly one response."""

    y: np.ndarray  # raw response values, length n*P
    response_index: np.ndarray  # int, length n*P
    subject_index: np.ndarray  # int row index into the source table
    responses: tuple[str, ...]
    table: ObservationTable

    @property
    def p(self) -> int:
        return len(self.responses)

    @property
    def n_subjects(self) -> int:
        return self.table.n_rows

    @property
    def n_stacked(self) -> int:
        return self.y.shape[0]

    def dummies(self) -> np.ndarray:
        out = np.zeros((self.n_stacked, self.p))
        out[np.arange(self.n_stacked), self.response_index] = 1.0
        return out


def stack_multivariate(table: ObservationTable, responses) -> StackedData:
    """Stack the table into multivariate form; no intercept or error attached here."""
    responses = tuple(responses)
    if len(responses) == 0:
        raise DesignError("empty response list: P must be at least 1")
    p = len(responses)
    n = table.n_rows
    cols = [table.numeric(r) for r in responses]
    y = np.empty(n * p)
    for j, col in enumerate(cols):
        y[j::p] = col
    subject_index = np.repeat(np.arange(n), p)
    response_index = np.tile(np.arange(p), n)
    return StackedData(y, response_index, subject_index, responses, table)


@dataclass(eq=False)
class DesignInfo:
    """Everything needed to rebuild designs for new data exactly as fitted."""

    categories: dict[str, tuple[tuple[str, ...], str]] = field(default_factory=dict)
    standardized: dict[str, tuple[float, float]] = field(default_factory=dict)
    response_scales: dict[str, float] = field(default_factory=dict)
    hierarchy_keys: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "categories": {c: [list(levels), ref] for c, (levels, ref) in self.categories.items()},
            "standardized": {c: list(v) for c, v in self.standardized.items()},
            "response_scales": dict(self.response_scales),
            "hierarchy_keys": list(self.hierarchy_keys),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DesignInfo":
        return cls(
            categories={c: (tuple(levels), ref) for c, (levels, ref) in d["categories"].items()},
            standardized={c: (float(m), float(s)) for c, (m, s) in d["standardized"].items()},
            response_scales={k: float(v) for k, v in d["response_scales"].items()},
            hierarchy_keys=tuple(d["hierarchy_keys"]),
        )


def prepare_design_info(spec: ModelSpec, table: ObservationTable,
                        keys: tuple[str, str, str] | None = None) -> DesignInfo:
    """Freeze category levels, standardization parameters, and response scales."""
    info = DesignInfo(hierarchy_keys=tuple(keys) if keys else ())
    refs = dict(spec.references)

    def record_categorical(col: str):
        if col not in info.categories:
            levels = tuple(categorical_levels(table, col))
            info.categories[col] = (levels, refs.get(col, levels[-1]))

    for term in spec.fixed_terms:
        for factor in term.factors:
            if table.column(factor.column).kind == CATEGORICAL:
                record_categorical(factor.column)
        if term.kind == "main" and table.column(term.columns[0]).kind == CATEGORICAL:
            record_categorical(term.columns[0])

    slope_terms: dict[str, tuple[str, str | None]] = {}
    for block in spec.blocks:
        for slot in block.slots:
            term = slot.term
            if term == "intercept":
                continue
            if "=" in term:  # categorical level slot
                record_categorical(term.split("=", 1)[0])
            else:
                label, column, transform = parse_term_expression(term)
                slope_terms[label] = (column, transform)
    if spec.standardize_slopes:
        for label in sorted(slope_terms):
            column, transform = slope_terms[label]
            values = _apply_transform(table.numeric(column), transform, label)
            finite = values[~np.isnan(values)]
            sd = float(np.std(finite, ddof=1)) if finite.size > 1 else 0.0
            if sd <= 0:
                raise DesignError(f"cannot standardize constant covariate {label!r}")
            info.standardized[label] = (float(np.mean(finite)), sd)

    family = spec.family.behavior()
    for resp in spec.responses:
        scale = 1.0
        if spec.response_scaling == "unit-variance":
            work = family.transform(table.numeric(resp))
            scale = float(np.std(work, ddof=1))
            if not np.isfinite(scale) or scale <= 0:
                raise DesignError(f"response {resp!r} has zero variance; cannot scale")
        info.response_scales[resp] = scale
    return info


def _apply_transform(values: np.ndarray, transform: str | None, label: str) -> np.ndarray:
    if transform is None:
        return values
    if transform == "square":
        return values ** 2
    if transform == "sqrt":
        if np.any(values < 0):
            raise DesignError(f"term {label!r}: negative value under sqrt")
        return np.sqrt(values)
    if np.any(values <= 0):
        raise DesignError(f"term {label!r}: non-positive value under log")
    return np.log(values)


def _check_missing(values: np.ndarray, table: ObservationTable, col: str,
                   info: DesignInfo, what: str) -> np.ndarray:
    bad = np.flatnonzero(np.isnan(values))
    if bad.size:
        row = int(bad[0])
        subject = row
        if info.hierarchy_keys:
            subject = table.labels(info.hierarchy_keys[0])[row]
        raise DesignError(
            f"{what}: covariate {col!r} is missing for subject {subject!r} (row {row})")
    return values


def _evaluate_term(label: str, column: str, transform: str | None,
                   table: ObservationTable, info: DesignInfo, what: str) -> np.ndarray:
    values = _check_missing(table.numeric(column), table, column, info, what)
    values = _apply_transform(values, transform, label)
    if label in info.standardized:
        mean, sd = info.standardized[label]
        values = (values - mean) / sd
    return values


def _numeric_values(table: ObservationTable, col: str, info: DesignInfo) -> np.ndarray:
    values = table.numeric(col)
    if col in info.standardized:
        mean, sd = info.standardized[col]
        values = (values - mean) / sd
    return values


def _indicator(table: ObservationTable, col: str, level: str, info: DesignInfo) -> np.ndarray:
    values = table.labels(col)
    if col in info.categories:
        known = set(info.categories[col][0])
        unknown = {v for v in values if v is not None and v not in known}
        if unknown:
            raise PredictionError(
                f"column {col!r} has unknown category level {sorted(unknown)[0]!r}")
    return np.array([1.0 if v == level else 0.0 for v in values])


def _factor_values(table, factor, info: DesignInfo, what: str) -> np.ndarray:
    if factor.level is not None:
        return _indicator(table, factor.column, factor.level, info)
    col = table.column(factor.column)
    if col.kind == CATEGORICAL:
        levels, ref = info.categories.get(
            factor.column, (tuple(categorical_levels(table, factor.column)), None))
        if ref is None:
            ref = levels[-1]
        non_ref = [lev for lev in levels if lev != ref]
        return _indicator(table, factor.column, non_ref[0], info)
    values = _numeric_values(table, factor.column, info)
    return _check_missing(values, table, factor.column, info, what)


def _term_subject_values(term: FixedTermSpec, table, info: DesignInfo) -> np.ndarray:
    what = f"fixed term {term.label!r}"
    if term.kind in ("main", "transform"):
        return _evaluate_term(term.label, term.columns[0], term.transform, table, info, what)
    # interaction / cross-level product
    a = _factor_values(table, term.factors[0], info, what)
    b = _factor_values(table, term.factors[1], info, what)
    return a * b


@dataclass(eq=False)
class FixedDesign:
    matrix: np.ndarray  # (n*P, q)
    slots: tuple[Slot, ...]

    @property
    def labels(self) -> list[str]:
        return [s.name for s in self.slots]

    @property
    def q(self) -> int:
        return self.matrix.shape[1]


def build_fixed_design(spec: ModelSpec, stacked: StackedData,
                       info: DesignInfo | None = None, *, validate: bool = True) -> FixedDesign:
    """Build X: per-response intercepts, declared terms, constraint-merged columns."""
    table = stacked.table
    if info is None:
        info = prepare_design_info(spec, table)
    responses = spec.responses
    shared_label = "+".join(responses)
    subject_index = stacked.subject_index
    response_index = stacked.response_index

    columns: list[np.ndarray] = []
    slots: list[Slot] = []

    def emit(term_label: str, subject_values: np.ndarray, shared: bool):
        stretched = subject_values[subject_index]
        if shared:
            columns.append(stretched)
            slots.append(Slot(term_label, shared_label))
        else:
            for p, resp in enumerate(responses):
                columns.append(np.where(response_index == p, stretched, 0.0))
                slots.append(Slot(term_label, resp))

    if spec.intercepts:
        ones = np.ones(table.n_rows)
        emit("intercept", ones, shared=False)
    for term in spec.fixed_terms:
        col0 = term.columns[0]
        if term.kind == "main" and table.column(col0).kind == CATEGORICAL:
            levels, ref = info.categories.get(
                col0, (tuple(categorical_levels(table, col0)), None))
            if ref is None:
                ref = levels[-1]
            for level in levels:
                if level != ref:
                    emit(f"{col0}={level}", _indicator(table, col0, level, info), term.shared)
        else:
            emit(term.label, _term_subject_values(term, table, info), term.shared)

    # Equality constraints: merge the constrained slots into one shared column.
    if spec.constraints:
        name_to_idx = {s.name: i for i, s in enumerate(slots)}
        parent = list(range(len(slots)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in spec.constraints:
            ia, ib = name_to_idx.get(a), name_to_idx.get(b)
            if ia is None or ib is None:
                missing = a if ia is None else b
                raise DesignError(f"constraint references missing coefficient slot {missing!r}")
            ra, rb = find(ia), find(ib)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

        merged_cols: list[np.ndarray] = []
        merged_slots: list[Slot] = []
        members: dict[int, list[int]] = {}
        for i in range(len(slots)):
            members.setdefault(find(i), []).append(i)
        for root in sorted(members):
            group = members[root]
            if len(group) == 1:
                merged_cols.append(columns[group[0]])
                merged_slots.append(slots[group[0]])
            else:
                merged_cols.append(np.sum([columns[i] for i in group], axis=0))
                terms = []
                resps = []
                for i in group:
                    if slots[i].term not in terms:
                        terms.append(slots[i].term)
                    for r in slots[i].response.split("+"):
                        if r not in resps:
                            resps.append(r)
                merged_slots.append(Slot("=".join(terms), "+".join(resps)))
        columns, slots = merged_cols, merged_slots

    matrix = np.column_stack(columns) if columns else np.empty((stacked.n_stacked, 0))

    if validate:
        zero = [slots[j].name for j in range(matrix.shape[1]) if not np.any(matrix[:, j])]
        if zero:
            raise DesignError(f"all-zero fixed design column(s): {', '.join(zero)}")
        seen: dict[bytes, str] = {}
        for j in range(matrix.shape[1]):
            key = matrix[:, j].tobytes()
            if key in seen:
                warnings.warn(
                    f"fixed design column {slots[j].name!r} exactly duplicates "
                    f"{seen[key]!r}", CollinearityWarning, stacklevel=2)
            else:
                seen[key] = slots[j].name
    return FixedDesign(matrix, tuple(slots))


@dataclass(eq=False)
class BlockLayout:
    """Column span and group/slot meaning of one covariance block inside W."""

    spec: ExpandedBlock
    groups: tuple[str, ...]
    col_start: int
    col_stop: int

    @property
    def label(self) -> str:
        return self.spec.label

    @property
    def d(self) -> int:
        return self.spec.dim

    @property
    def g(self) -> int:
        return len(self.groups)

    @property
    def prior(self) -> IwPrior:
        return IwPrior(self.spec.limit, self.spec.belief)

    def column_meaning(self) -> list[tuple[str, str, str]]:
        """(group, term, response) of each column in the span, in order."""
        return [(g, s.term, s.response) for g in self.groups for s in self.spec.slots]


@dataclass(eq=False)
class RandomDesign:
    matrix: sparse.csr_matrix  # (n*P, m)
    layouts: tuple[BlockLayout, ...]

    @property
    def m(self) -> int:
        return self.matrix.shape[1]


def _block_term_values(slot: Slot, table, info: DesignInfo, label: str) -> np.ndarray:
    if slot.term == "intercept":
        return np.ones(table.n_rows)
    if "=" in slot.term:
        col, level = slot.term.split("=", 1)
        return _indicator(table, col, level, info)
    term_label, column, transform = parse_term_expression(slot.term)
    return _evaluate_term(term_label, column, transform, table, info,
                          f"random block {label!r}")


def _group_ids(level: str, table, hierarchy: HierarchyIndex) -> np.ndarray:
    key = hierarchy.keys[1] if level == "team" else hierarchy.keys[2]
    return table.labels(key)


def build_random_design(spec: ModelSpec, stacked: StackedData, hierarchy: HierarchyIndex,
                        info: DesignInfo | None = None) -> RandomDesign:
    """Build W: block-sparse incidence-and-covariate columns for all G-side blocks."""
    table = stacked.table
    if info is None:
        info = prepare_design_info(spec, table, hierarchy.keys)
    responses = spec.responses
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    layouts: list[BlockLayout] = []
    col_start = 0
    for block in spec.blocks:
        if block.level == "team":
            groups = tuple(sorted(hierarchy.team_facility))
        else:
            groups = tuple(sorted(set(hierarchy.team_facility.values())))
        group_pos = {g: i for i, g in enumerate(groups)}
        ids = _group_ids(block.level, table, hierarchy)
        try:
            subject_group = np.array([group_pos[g] for g in ids], dtype=np.int64)
        except KeyError as exc:
            raise DesignError(
                f"random block {block.label!r}: group {exc.args[0]!r} not in hierarchy")
        d = block.dim
        for j, slot in enumerate(block.slots):
            term_vals = _block_term_values(slot, table, info, block.label)
            p = responses.index(slot.response)
            where = np.flatnonzero(stacked.response_index == p)
            subj = stacked.subject_index[where]
            rows.append(where)
            cols.append(col_start + subject_group[subj] * d + j)
            vals.append(term_vals[subj])
        layouts.append(BlockLayout(block, groups, col_start, col_start + len(groups) * d))
        col_start += len(groups) * d

    m = col_start
    if rows:
        coo = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(stacked.n_stacked, m))
        matrix = coo.tocsr()
        matrix.eliminate_zeros()
    else:
        matrix = sparse.csr_matrix((stacked.n_stacked, 0))
    return RandomDesign(matrix, tuple(layouts))


def prediction_stack(table: ObservationTable, responses) -> StackedData:
    """Stacked index structure for scoring data that may lack response columns."""
    responses = tuple(responses)
    if all(r in table.columns for r in responses):
        return stack_multivariate(table, responses)
    n, p = table.n_rows, len(responses)
    return StackedData(
        y=np.full(n * p, np.nan),
        response_index=np.tile(np.arange(p), n),
        subject_index=np.repeat(np.arange(n), p),
        responses=responses,
        table=table,
    )


def align_random_design(spec: ModelSpec, stacked: StackedData, layouts, info: DesignInfo):
    """W for new data, columns aligned to the fitted layouts.

    Subjects in groups unseen at fit time get zero rows in W; their row
    indices are returned per (block label, group id) so prediction can draw
    fresh effects from the current covariance instead.
    """
    table = stacked.table
    responses = spec.responses
    if len(info.hierarchy_keys) != 3:
        raise DesignError("design info lacks hierarchy keys; cannot align groups")
    key_by_level = {"team": info.hierarchy_keys[1], "facility": info.hierarchy_keys[2]}
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    new_groups: dict[str, dict[str, np.ndarray]] = {}
    total = 0
    for layout in layouts:
        block = layout.spec
        group_pos = {g: i for i, g in enumerate(layout.groups)}
        ids = table.labels(key_by_level[block.level])
        known = np.array([g in group_pos for g in ids], dtype=bool)
        if not known.all():
            unseen: dict[str, list[int]] = {}
            for row_i in np.flatnonzero(~known):
                unseen.setdefault(ids[row_i], []).append(row_i)
            new_groups[layout.label] = {g: np.asarray(r) for g, r in unseen.items()}
        subject_group = np.array([group_pos.get(g, -1) for g in ids], dtype=np.int64)
        d = layout.d
        for j, slot in enumerate(block.slots):
            term_vals = _block_term_values(slot, table, info, block.label)
            p = responses.index(slot.response)
            where = np.flatnonzero(stacked.response_index == p)
            subj = stacked.subject_index[where]
            ok = known[subj]
            rows.append(where[ok])
            cols.append(layout.col_start + subject_group[subj[ok]] * d + j)
            vals.append(term_vals[subj[ok]])
        total = max(total, layout.col_stop)
    if rows:
        coo = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(stacked.n_stacked, total))
        matrix = coo.tocsr()
        matrix.eliminate_zeros()
    else:
        matrix = sparse.csr_matrix((stacked.n_stacked, total))
    return matrix, new_groups


def block_term_matrix(block: ExpandedBlock, table: ObservationTable,
                      info: DesignInfo) -> np.ndarray:
    """Per-subject value of each parametric slot of a block, (n, d)."""
    return np.column_stack([
        _block_term_values(slot, table, info, block.label) for slot in block.slots])


@dataclass(eq=False)
class ModelInputs:
    """Immutable bundle the sampler consumes: designs, working response, metadata."""

    spec: ModelSpec
    table: ObservationTable
    hierarchy: HierarchyIndex
    stacked: StackedData
    fixed: FixedDesign
    random: RandomDesign
    info: DesignInfo
    y_work: np.ndarray
    family: Family
    data_hash: str

    @property
    def n_subjects(self) -> int:
        return self.stacked.n_subjects

    @property
    def p(self) -> int:
        return self.stacked.p

    @property
    def residual_prior(self) -> IwPrior:
        return IwPrior(self.spec.residual_block.limit, self.spec.residual_block.belief)


def working_response(spec: ModelSpec, stacked: StackedData, info: DesignInfo) -> np.ndarray:
    """Family transform plus per-response unit-variance scaling."""
    family = spec.family.behavior()
    y = family.transform(stacked.y)
    scales = np.array([info.response_scales[r] for r in spec.responses])
    return y / scales[stacked.response_index]


def build_model_inputs(spec: ModelSpec, table: ObservationTable,
                       keys: tuple[str, str, str]) -> ModelInputs:
    """Full design pipeline: hierarchy, stacking, X, W, working response."""
    hierarchy = build_hierarchy(table, keys)
    stacked = stack_multivariate(table, spec.responses)
    info = prepare_design_info(spec, table, keys)
    fixed = build_fixed_design(spec, stacked, info)
    random = build_random_design(spec, stacked, hierarchy, info)
    y_work = working_response(spec, stacked, info)
    return ModelInputs(
        spec=spec,
        table=table,
        hierarchy=hierarchy,
        stacked=stacked,
        fixed=fixed,
        random=random,
        info=info,
        y_work=y_work,
        family=spec.family.behavior(),
        data_hash=table.content_hash(),
    )
