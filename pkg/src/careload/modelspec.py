"""Declarative model configuration: parsing and validation into a checked ModelSpec.

The config is a sectioned key-value file (configparser syntax) with one
section per concern: [data], [preprocess], [responses], [fixed],
[random.<level>], [priors], [mcmc], [design]. The full grammar is documented
in docs/config-format.md.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from . import tabular
from .errors import ConfigError, SchemaError
from .families import Family, family_from_name
from .tabular import CATEGORICAL, IDENTIFIER, NUMERIC, ObservationTable, PreprocessRules, TableSchema

LEVELS = ("residual", "team", "facility")
SHAPES = ("unstructured", "diagonal", "scalar")

_TRANSFORM_KEYS = {"square": "square", "sqrt": "sqrt", "log": "log"}


@dataclass(frozen=True)
class FamilySpec:
    family: str
    link: str
    dispersion: bool

    def behavior(self) -> Family:
        return family_from_name(self.family, self.link)


@dataclass(frozen=True)
class Factor:
    """One multiplicand of a product term: a numeric column or a level indicator."""

    column: str
    level: str | None = None

    @property
    def label(self) -> str:
        return self.column if self.level is None else f"{self.column}:{self.level}"


@dataclass(frozen=True)
class FixedTermSpec:
    kind: str  # main | transform | interaction | cross
    label: str
    columns: tuple[str, ...]
    shared: bool = False
    transform: str | None = None
    factors: tuple[Factor, ...] = ()


@dataclass(frozen=True)
class Slot:
    """A coefficient slot: a (term, response) pair. Residual slots have term ''."""

    term: str
    response: str

    @property
    def name(self) -> str:
        return self.response if self.term == "" else f"{self.term}@{self.response}"


@dataclass(frozen=True, eq=False)
class ExpandedBlock:
    """A concrete Parametric-by-Structured covariance block after expansion."""

    label: str
    level: str
    shape: str
    slots: tuple[Slot, ...]
    limit: np.ndarray  # IW limit covariance V, (d, d)
    belief: float  # IW degree of belief

    @property
    def dim(self) -> int:
        return len(self.slots)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "level": self.level,
            "shape": self.shape,
            "slots": [[s.term, s.response] for s in self.slots],
            "limit": np.asarray(self.limit).tolist(),
            "belief": self.belief,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpandedBlock":
        return cls(
            label=d["label"],
            level=d["level"],
            shape=d["shape"],
            slots=tuple(Slot(t, r) for t, r in d["slots"]),
            limit=np.asarray(d["limit"], dtype=np.float64),
            belief=float(d["belief"]),
        )


@dataclass(frozen=True)
class PriorSpec:
    location_mean: float = 0.0
    location_variance: float = 1e10

    def __post_init__(self):
        if self.location_variance <= 0:
            raise ConfigError("location prior variance must be > 0")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    responses: tuple[str, ...]
    family: FamilySpec
    fixed_terms: tuple[FixedTermSpec, ...]
    blocks: tuple[ExpandedBlock, ...]  # G-side, in declaration order
    residual_block: ExpandedBlock
    constraints: tuple[tuple[str, str], ...]  # pairs of slot names forced equal
    priors: PriorSpec = field(default_factory=PriorSpec)
    response_scaling: str = "none"  # none | unit-variance
    standardize_slopes: bool = True
    intercepts: bool = True
    references: tuple[tuple[str, str], ...] = ()  # declared (column, reference level)

    @property
    def p(self) -> int:
        return len(self.responses)

    def to_dict(self) -> dict:
        return {
            "responses": list(self.responses),
            "family": [self.family.family, self.family.link, self.family.dispersion],
            "fixed_terms": [
                {
                    "kind": t.kind,
                    "label": t.label,
                    "columns": list(t.columns),
                    "shared": t.shared,
                    "transform": t.transform,
                    "factors": [[f.column, f.level] for f in t.factors],
                }
                for t in self.fixed_terms
            ],
            "blocks": [b.to_dict() for b in self.blocks],
            "residual_block": self.residual_block.to_dict(),
            "constraints": [list(c) for c in self.constraints],
            "priors": [self.priors.location_mean, self.priors.location_variance],
            "response_scaling": self.response_scaling,
            "standardize_slopes": self.standardize_slopes,
            "intercepts": self.intercepts,
            "references": [list(r) for r in self.references],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            responses=tuple(d["responses"]),
            family=FamilySpec(*d["family"]),
            fixed_terms=tuple(
                FixedTermSpec(
                    kind=t["kind"],
                    label=t["label"],
                    columns=tuple(t["columns"]),
                    shared=t["shared"],
                    transform=t["transform"],
                    factors=tuple(Factor(c, lev) for c, lev in t["factors"]),
                )
                for t in d["fixed_terms"]
            ),
            blocks=tuple(ExpandedBlock.from_dict(b) for b in d["blocks"]),
            residual_block=ExpandedBlock.from_dict(d["residual_block"]),
            constraints=tuple((a, b) for a, b in d["constraints"]),
            priors=PriorSpec(*d["priors"]),
            response_scaling=d["response_scaling"],
            standardize_slopes=d["standardize_slopes"],
            intercepts=d["intercepts"],
            references=tuple((c, r) for c, r in d.get("references", [])),
        )


def _read_config(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # column names are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config grammar error: {exc}") from None
    return parser


def _split_list(value: str) -> list[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


def _parse_bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("yes", "true", "on", "1"):
        return True
    if v in ("no", "false", "off", "0"):
        return False
    raise ConfigError(f"{key}: expected yes/no, got {value!r}")


def parse_table_schema(text: str) -> TableSchema:
    """Read the [data] section: column roles, hierarchy keys, file conventions."""
    cfg = _read_config(text)
    if not cfg.has_section("data"):
        raise ConfigError("config has no [data] section")
    sec = cfg["data"]
    kinds: dict[str, str] = {}
    try:
        patient, team, facility = sec["patient"], sec["team"], sec["facility"]
    except KeyError as exc:
        raise ConfigError(f"[data] section missing key {exc.args[0]!r}") from None
    for key in (patient, team, facility):
        kinds[key.strip()] = IDENTIFIER
    for name in _split_list(sec.get("identifier", "")):
        kinds[name] = IDENTIFIER
    for name in _split_list(sec.get("numeric", "")):
        kinds[name] = NUMERIC
    for name in _split_list(sec.get("categorical", "")):
        if name in kinds:
            raise ConfigError(f"[data]: column {name!r} declared with two kinds")
        kinds[name] = CATEGORICAL
    delimiter = sec.get("delimiter", ",")
    if delimiter.lower() == "tab":
        delimiter = "\t"
    responses = tuple(_split_list(cfg.get("responses", "names", fallback="")))
    for name in responses:
        if kinds.get(name, NUMERIC) != NUMERIC:
            raise ConfigError(f"response column {name!r} must be numeric")
        kinds[name] = NUMERIC
    return TableSchema(
        kinds=kinds,
        patient_key=patient.strip(),
        team_key=team.strip(),
        facility_key=facility.strip(),
        responses=responses,
        missing_marker=sec.get("missing", "NA"),
        delimiter=delimiter,
    )


def parse_preprocess_rules(text: str) -> PreprocessRules:
    """Read the [preprocess] section into imputation/trim/bin rules."""
    cfg = _read_config(text)
    imputation: dict[str, str] = {}
    trim: dict[str, tuple[float, float]] = {}
    bins: dict[str, tuple[tuple[float, ...], tuple[str, ...]]] = {}
    if cfg.has_section("preprocess"):
        for key, value in cfg["preprocess"].items():
            if "." not in key:
                raise ConfigError(f"[preprocess] key {key!r}: expected <action>.<column>")
            action, col = key.split(".", 1)
            if action == "impute":
                imputation[col] = value.strip()
            elif action == "trim":
                parts = _split_list(value)
                if len(parts) != 2:
                    raise ConfigError(f"trim.{col}: expected 'lo, hi', got {value!r}")
                trim[col] = (float(parts[0]), float(parts[1]))
            elif action == "bin":
                if "->" not in value:
                    raise ConfigError(f"bin.{col}: expected 'thresholds -> labels'")
                lhs, rhs = value.split("->", 1)
                thresholds = tuple(float(v) for v in _split_list(lhs))
                labels = tuple(_split_list(rhs))
                bins[col] = (thresholds, labels)
            else:
                raise ConfigError(f"[preprocess] unknown action {action!r} in key {key!r}")
    try:
        return PreprocessRules(imputation=imputation, trim=trim, bins=bins)
    except SchemaError as exc:
        raise ConfigError(str(exc)) from None


def parse_mcmc_section(text: str) -> dict:
    """Read the [mcmc] section into keyword overrides for McmcOptions."""
    cfg = _read_config(text)
    out: dict = {}
    if not cfg.has_section("mcmc"):
        return out
    sec = cfg["mcmc"]
    for key in ("iterations", "burnin", "thin", "chains", "seed", "adapt_window"):
        if key in sec:
            out[key] = int(sec[key])
    if "store_effects" in sec:
        out["store_effects"] = _parse_bool(sec["store_effects"], "mcmc.store_effects")
    return out


def _parse_limit(value: str, label: str) -> np.ndarray | float:
    if ";" in value:
        rows = [[float(v) for v in _split_list(row)] for row in value.split(";")]
        mat = np.asarray(rows, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ConfigError(f"prior limit for block {label!r} is not square")
        return mat
    parts = _split_list(value)
    if len(parts) != 1:
        raise ConfigError(f"prior limit for block {label!r}: expected scalar or matrix")
    return float(parts[0])


def _check_spd(mat: np.ndarray, what: str) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    if not np.allclose(mat, mat.T):
        raise ConfigError(f"{what} is not symmetric")
    if np.linalg.eigvalsh(mat).min() <= 0:
        raise ConfigError(f"{what} is not positive definite")


def _parse_factor(token: str, table: ObservationTable, where: str) -> Factor:
    token = token.strip()
    if ":" in token:
        col, level = token.split(":", 1)
        col, level = col.strip(), level.strip()
        column = table.column(col) if col in table.columns else None
        if column is None:
            raise ConfigError(f"{where}: unknown column {col!r}")
        if column.kind != CATEGORICAL:
            raise ConfigError(f"{where}: {col!r} is not categorical, cannot index level")
        levels = {v for v in column.values if v is not None}
        if level not in levels:
            raise ConfigError(f"{where}: column {col!r} has no level {level!r}")
        return Factor(col, level)
    if token not in table.columns:
        raise ConfigError(f"{where}: unknown column {token!r}")
    kind = table.column(token).kind
    if kind == IDENTIFIER:
        raise ConfigError(f"{where}: {token!r} is an identifier, not a covariate")
    if kind == CATEGORICAL:
        levels = sorted({v for v in table.column(token).values if v is not None})
        if len(levels) != 2:
            raise ConfigError(
                f"{where}: categorical {token!r} has {len(levels)} levels; product "
                "factors need a numeric column, a 2-level categorical, or col:level")
    return Factor(token, None)


def categorical_levels(table: ObservationTable, column: str) -> list[str]:
    values = table.column(column).values
    return sorted({v for v in values if v is not None})


def parse_term_expression(token: str) -> tuple[str, str, str | None]:
    """Split a term token into (label, column, transform).

    Recognized forms: a bare column name, col^2, sqrt(col), log(col).
    """
    token = token.strip()
    if token.endswith("^2"):
        col = token[:-2].strip()
        return f"{col}^2", col, "square"
    for fn in ("sqrt", "log"):
        if token.startswith(fn + "(") and token.endswith(")"):
            col = token[len(fn) + 1:-1].strip()
            return f"{fn}({col})", col, fn
    return token, token, None


def enumerate_fixed_slots(
    responses: tuple[str, ...],
    terms: tuple[FixedTermSpec, ...],
    table: ObservationTable,
    intercepts: bool,
    references: dict[str, str] | None = None,
) -> list[Slot]:
    """Coefficient slots in design order, before equality-constraint merging."""
    references = references or {}
    slots: list[Slot] = []
    shared_label = "+".join(responses)

    def add(term_label: str, shared: bool):
        if shared:
            slots.append(Slot(term_label, shared_label))
        else:
            slots.extend(Slot(term_label, r) for r in responses)

    if intercepts:
        slots.extend(Slot("intercept", r) for r in responses)
    for term in terms:
        if term.kind == "main":
            col = term.columns[0]
            if table.column(col).kind == CATEGORICAL:
                levels = categorical_levels(table, col)
                ref = references.get(col, levels[-1])
                for level in levels:
                    if level != ref:
                        add(f"{col}={level}", term.shared)
            else:
                add(term.label, term.shared)
        else:
            add(term.label, term.shared)
    return slots


def _expand_block_slots(
    terms: tuple[str, ...], responses: tuple[str, ...], mode: str,
    table: ObservationTable,
) -> list[tuple[str, list[Slot]]]:
    """Expand a declared block into per-parametric-slot lists.

    Returns one (suffix, slots) entry for the joint mode, or one per response
    when responses are kept independent. Slot order is term-major.
    """
    term_labels: list[str] = []
    for term in terms:
        if term == "intercept":
            term_labels.append("intercept")
            continue
        label, column, transform = parse_term_expression(term)
        col = table.column(column)
        if transform is not None:
            if col.kind != NUMERIC:
                raise ConfigError(f"random term {term!r}: column {column!r} is not numeric")
            term_labels.append(label)
        elif col.kind == CATEGORICAL:
            # Full-rank level coding: one variance slot per level.
            term_labels.extend(f"{term}={lev}" for lev in categorical_levels(table, term))
        elif col.kind == NUMERIC:
            term_labels.append(term)
        else:
            raise ConfigError(f"random term {term!r} is an identifier column")
    if mode == "joint":
        return [("", [Slot(t, r) for t in term_labels for r in responses])]
    return [(f"@{r}", [Slot(t, r) for t in term_labels]) for r in responses]


def parse_model_config(text: str, table: ObservationTable) -> ModelSpec:
    """Parse and validate a model configuration against an ingested table.

    Every referenced column must exist with a compatible kind; priors must be
    proper; constraints must reference existing coefficient slots.
    """
    cfg = _read_config(text)

    if not cfg.has_section("responses"):
        raise ConfigError("config has no [responses] section")
    rsec = cfg["responses"]
    responses = tuple(_split_list(rsec.get("names", "")))
    if len(responses) < 1:
        raise ConfigError("[responses] names: at least one response is required")
    family_name = rsec.get("family", "gaussian").strip()
    link = rsec.get("link", None)
    family = family_from_name(family_name, link.strip() if link else None)
    fam_spec = FamilySpec(family.name, family.link, family.dispersion)
    scaling = rsec.get("scale", "none").strip()
    if scaling not in ("none", "unit-variance"):
        raise ConfigError(f"[responses] scale: expected none or unit-variance, got {scaling!r}")

    for name in responses:
        if name not in table.columns:
            raise ConfigError(f"response column {name!r} not found in table")
        if table.column(name).kind != NUMERIC:
            raise ConfigError(f"response column {name!r} is not numeric")
        family.validate_response(name, table.numeric(name))

    # --- fixed terms -------------------------------------------------------
    fixed_terms: list[FixedTermSpec] = []
    references: dict[str, str] = {}
    constraints: list[tuple[str, str]] = []
    intercepts = True
    fsec = cfg["fixed"] if cfg.has_section("fixed") else {}

    def _main_terms(value: str, shared: bool):
        for col in _split_list(value):
            if col not in table.columns:
                raise ConfigError(f"[fixed]: unknown column {col!r}")
            kind = table.column(col).kind
            if kind == IDENTIFIER:
                raise ConfigError(f"[fixed]: {col!r} is an identifier, not a covariate")
            fixed_terms.append(FixedTermSpec("main", col, (col,), shared=shared))

    for key, value in fsec.items():
        if key == "intercepts":
            intercepts = _parse_bool(value, "fixed.intercepts")
        elif key == "main":
            _main_terms(value, shared=False)
        elif key == "shared":
            _main_terms(value, shared=True)
        elif key in _TRANSFORM_KEYS:
            for col in _split_list(value):
                if col not in table.columns:
                    raise ConfigError(f"[fixed] {key}: unknown column {col!r}")
                if table.column(col).kind != NUMERIC:
                    raise ConfigError(f"[fixed] {key}: column {col!r} is not numeric")
                label = f"{col}^2" if key == "square" else f"{key}({col})"
                fixed_terms.append(
                    FixedTermSpec("transform", label, (col,), transform=_TRANSFORM_KEYS[key]))
        elif key in ("interact", "cross"):
            kind = "interaction" if key == "interact" else "cross"
            for product in _split_list(value):
                parts = product.split("*")
                if len(parts) != 2:
                    raise ConfigError(f"[fixed] {key}: expected 'a*b', got {product!r}")
                fa = _parse_factor(parts[0], table, f"[fixed] {key}")
                fb = _parse_factor(parts[1], table, f"[fixed] {key}")
                if fa == fb:
                    raise ConfigError(f"[fixed] {key}: factors must differ in {product!r}")
                label = f"{fa.label}*{fb.label}"
                fixed_terms.append(
                    FixedTermSpec(kind, label, (fa.column, fb.column), factors=(fa, fb)))
        elif key == "reference":
            for item in _split_list(value):
                if ":" not in item:
                    raise ConfigError(f"[fixed] reference: expected col:level, got {item!r}")
                col, level = (s.strip() for s in item.split(":", 1))
                if col not in table.columns or table.column(col).kind != CATEGORICAL:
                    raise ConfigError(f"[fixed] reference: {col!r} is not a categorical column")
                if level not in categorical_levels(table, col):
                    raise ConfigError(f"[fixed] reference: {col!r} has no level {level!r}")
                references[col] = level
        elif key == "constraints":
            for item in value.split(";"):
                item = item.strip()
                if not item:
                    continue
                if "==" not in item:
                    raise ConfigError(f"[fixed] constraints: expected 'slot == slot', got {item!r}")
                a, b = (s.strip() for s in item.split("==", 1))
                constraints.append((a, b))
        else:
            raise ConfigError(f"[fixed]: unknown key {key!r}")

    slot_names = {
        s.name for s in enumerate_fixed_slots(
            responses, tuple(fixed_terms), table, intercepts, references)
    }
    for a, b in constraints:
        for ref in (a, b):
            if ref not in slot_names:
                raise ConfigError(f"constraint references missing coefficient slot {ref!r}")

    # --- design options ----------------------------------------------------
    standardize = True
    if cfg.has_section("design"):
        dsec = cfg["design"]
        if "standardize_slope_covariates" in dsec:
            standardize = _parse_bool(dsec["standardize_slope_covariates"],
                                      "design.standardize_slope_covariates")
        if "reference" in dsec:
            raise ConfigError("reference levels belong in [fixed] reference")

    # --- random blocks -----------------------------------------------------
    declared: list[tuple[str, str, tuple[str, ...], str, str]] = []
    level_counts: dict[str, int] = {}
    for section in cfg.sections():
        if not section.startswith("random."):
            continue
        rest = section[len("random."):]
        parts = rest.split(".")
        level = parts[0]
        if level not in LEVELS:
            raise ConfigError(f"[{section}]: unknown level {level!r}; use residual/team/facility")
        sec = cfg[section]
        shape = sec.get("shape", "unstructured").strip()
        if shape not in SHAPES:
            raise ConfigError(f"[{section}] shape: expected one of {SHAPES}, got {shape!r}")
        mode = sec.get("responses", "joint").strip()
        if mode not in ("joint", "separate"):
            raise ConfigError(f"[{section}] responses: expected joint or separate")
        if level == "residual":
            terms: tuple[str, ...] = ()
            if "terms" in sec:
                raise ConfigError("[random.residual] takes no terms; it spans the responses")
        else:
            terms = tuple(_split_list(sec.get("terms", "intercept")))
            if not terms:
                raise ConfigError(f"[{section}] terms: at least one term required")
            for term in terms:
                if term == "intercept":
                    continue
                _, column, transform = parse_term_expression(term)
                if column not in table.columns:
                    raise ConfigError(f"[{section}]: unknown column {column!r}")
                kind = table.column(column).kind
                if kind == IDENTIFIER:
                    raise ConfigError(f"[{section}]: {column!r} is an identifier column")
                if transform is not None and kind != NUMERIC:
                    raise ConfigError(f"[{section}]: {term!r} needs a numeric column")
        level_counts[level] = level_counts.get(level, 0) + 1
        ordinal = level_counts[level]
        label = level if ordinal == 1 else f"{level}{ordinal}"
        declared.append((label, level, terms, shape, mode))

    if not any(level == "residual" for _, level, _, _, _ in declared):
        declared.append(("residual", "residual", (), "unstructured", "joint"))

    # --- priors ------------------------------------------------------------
    location_mean, location_variance = 0.0, 1e10
    block_limits: dict[str, np.ndarray | float] = {}
    block_beliefs: dict[str, float] = {}
    if cfg.has_section("priors"):
        for key, value in cfg["priors"].items():
            if key == "location.mean":
                location_mean = float(value)
            elif key == "location.variance":
                location_variance = float(value)
                if location_variance <= 0:
                    raise ConfigError("priors: location.variance must be > 0")
            elif key.startswith("block.") and key.endswith(".limit"):
                label = key[len("block."):-len(".limit")]
                block_limits[label] = _parse_limit(value, label)
            elif key.startswith("block.") and key.endswith(".belief"):
                label = key[len("block."):-len(".belief")]
                block_beliefs[label] = float(value)
            else:
                raise ConfigError(f"[priors]: unknown key {key!r}")
    known_labels = {label for label, *_ in declared}
    for label in list(block_limits) + list(block_beliefs):
        if label not in known_labels:
            raise ConfigError(f"[priors]: no random block named {label!r}")

    # Equal-split default: total variance shared across the hierarchy levels
    # that carry a block (residual counts as one level).
    n_levels = len({level for _, level, _, _, _ in declared})
    default_limit = 1.0 / n_levels

    blocks: list[ExpandedBlock] = []
    residual_block: ExpandedBlock | None = None
    for label, level, terms, shape, mode in declared:
        if level == "residual":
            pieces = [("", [Slot("", r) for r in responses])]
        else:
            pieces = _expand_block_slots(terms, responses, mode, table)
        for suffix, slots in pieces:
            d = len(slots)
            limit = block_limits.get(label, default_limit)
            if np.isscalar(limit):
                v_mat = float(limit) * np.eye(d)
            else:
                v_mat = np.asarray(limit, dtype=np.float64)
                if v_mat.shape != (d, d):
                    raise ConfigError(
                        f"prior limit for block {label!r} has shape {v_mat.shape}, "
                        f"expected ({d}, {d})")
            _check_spd(v_mat, f"prior limit covariance for block {label!r}")
            belief = block_beliefs.get(label, float(d))
            if belief <= d - 1:
                raise ConfigError(
                    f"block {label!r}: degree of belief {belief:g} makes the IW prior "
                    f"improper (need > dim - 1 = {d - 1})")
            block = ExpandedBlock(label + suffix, level, shape, tuple(slots), v_mat, belief)
            if level == "residual":
                if residual_block is not None:
                    raise ConfigError("only one residual block is supported")
                residual_block = block
            else:
                blocks.append(block)

    assert residual_block is not None

    return ModelSpec(
        responses=responses,
        family=fam_spec,
        fixed_terms=tuple(fixed_terms),
        blocks=tuple(blocks),
        residual_block=residual_block,
        constraints=tuple(constraints),
        priors=PriorSpec(location_mean, location_variance),
        response_scaling=scaling,
        standardize_slopes=standardize,
        intercepts=intercepts,
        references=tuple(sorted(references.items())),
    )
