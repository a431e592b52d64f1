"""Synthetic 3-level multivariate datasets from known parameters.

The generator reuses the design builders, so slot ordering and group layout
match a subsequent fit exactly; the TruthRecord serializes losslessly next
to the generated table. Covariates are standard normal, hierarchy ids are
zero-padded strings, and the random-number call order is fixed: covariates,
then block effects in declaration order, then residuals, then the family's
emission.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .design import StackedData, build_fixed_design, build_random_design
from .errors import ConfigError
from .families import family_from_name
from .modelspec import ExpandedBlock, FamilySpec, FixedTermSpec, ModelSpec, PriorSpec, Slot
from .tabular import CATEGORICAL, IDENTIFIER, NUMERIC, Column, HierarchyIndex, ObservationTable, build_hierarchy

HIER_COLUMNS = ("patient", "team", "facility")


@dataclass(eq=False)
class TruthBlock:
    level: str  # team | facility
    terms: tuple[str, ...]
    parametric: np.ndarray  # true covariance over (term x response) slots
    shape: str = "unstructured"

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "terms": list(self.terms),
            "parametric": np.asarray(self.parametric).tolist(),
            "shape": self.shape,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TruthBlock":
        return cls(d["level"], tuple(d["terms"]),
                   np.asarray(d["parametric"], dtype=np.float64), d["shape"])


@dataclass(eq=False)
class TruthRecord:
    """Known generating parameters for a 3-level multivariate dataset.

    fixed maps a term label to {response -> coefficient}; the key "shared"
    declares one coefficient common to all responses. Every covariate named
    in fixed must appear in covariates.
    """

    responses: tuple[str, ...]
    family: str
    n_facilities: int
    teams_per_facility: int
    patients_per_team: int
    covariates: tuple[str, ...]
    fixed: dict[str, dict[str, float]]
    blocks: list[TruthBlock]
    residual: np.ndarray
    seed: int = 0
    categoricals: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def sizes(self) -> tuple[int, int, int]:
        n_teams = self.n_facilities * self.teams_per_facility
        return (n_teams * self.patients_per_team, n_teams, self.n_facilities)

    def to_json(self) -> str:
        return json.dumps({
            "responses": list(self.responses),
            "family": self.family,
            "n_facilities": self.n_facilities,
            "teams_per_facility": self.teams_per_facility,
            "patients_per_team": self.patients_per_team,
            "covariates": list(self.covariates),
            "fixed": self.fixed,
            "blocks": [b.to_dict() for b in self.blocks],
            "residual": np.asarray(self.residual).tolist(),
            "seed": self.seed,
            "categoricals": {k: list(v) for k, v in self.categoricals.items()},
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TruthRecord":
        d = json.loads(text)
        return cls(
            responses=tuple(d["responses"]),
            family=d["family"],
            n_facilities=d["n_facilities"],
            teams_per_facility=d["teams_per_facility"],
            patients_per_team=d["patients_per_team"],
            covariates=tuple(d["covariates"]),
            fixed={k: dict(v) for k, v in d["fixed"].items()},
            blocks=[TruthBlock.from_dict(b) for b in d["blocks"]],
            residual=np.asarray(d["residual"], dtype=np.float64),
            seed=d["seed"],
            categoricals={k: tuple(v) for k, v in d.get("categoricals", {}).items()},
        )


def truth_spec(truth: TruthRecord) -> ModelSpec:
    """The ModelSpec matching the generating process (the model that fits it)."""
    responses = truth.responses
    p = len(responses)
    terms: list[FixedTermSpec] = []
    for label, coefs in truth.fixed.items():
        if label == "intercept":
            continue
        if label not in truth.covariates:
            raise ConfigError(f"truth fixed term {label!r} is not a declared covariate")
        terms.append(FixedTermSpec("main", label, (label,), shared="shared" in coefs))
    blocks: list[ExpandedBlock] = []
    counts: dict[str, int] = {}
    for tb in truth.blocks:
        counts[tb.level] = counts.get(tb.level, 0) + 1
        label = tb.level if counts[tb.level] == 1 else f"{tb.level}{counts[tb.level]}"
        slots = tuple(Slot(t, r) for t in tb.terms for r in responses)
        d = len(slots)
        if np.asarray(tb.parametric).shape != (d, d):
            raise ConfigError(
                f"truth block {label!r}: parametric shape {np.asarray(tb.parametric).shape} "
                f"does not match {d} slots")
        blocks.append(ExpandedBlock(label, tb.level, tb.shape, slots,
                                    np.eye(d) / 3.0, float(d)))
    residual = ExpandedBlock(
        "residual", "residual", "unstructured",
        tuple(Slot("", r) for r in responses), np.eye(p) / 3.0, float(p))
    return ModelSpec(
        responses=responses,
        family=FamilySpec(*_family_triple(truth.family)),
        fixed_terms=tuple(terms),
        blocks=tuple(blocks),
        residual_block=residual,
        constraints=(),
        priors=PriorSpec(),
        response_scaling="none",
        standardize_slopes=False,
        intercepts="intercept" in truth.fixed,
    )


def _family_triple(name: str):
    fam = family_from_name(name)
    return fam.name, fam.link, fam.dispersion


def truth_config(truth: TruthRecord, iterations: int = 2000, burnin: int = 500,
                 thin: int = 2, chains: int = 1, seed: int = 1) -> str:
    """Config text for fitting the generating model to its own output."""
    lines = [
        "[data]",
        "patient = patient",
        "team = team",
        "facility = facility",
    ]
    numeric = list(truth.covariates)
    if numeric:
        lines.append(f"numeric = {', '.join(numeric)}")
    if truth.categoricals:
        lines.append(f"categorical = {', '.join(truth.categoricals)}")
    lines += [
        "",
        "[responses]",
        f"names = {', '.join(truth.responses)}",
        f"family = {truth.family}",
        "scale = none",
        "",
        "[design]",
        "standardize_slope_covariates = no",
        "",
        "[fixed]",
    ]
    main = [t for t, c in truth.fixed.items() if t != "intercept" and "shared" not in c]
    shared = [t for t, c in truth.fixed.items() if t != "intercept" and "shared" in c]
    lines.append(f"intercepts = {'yes' if 'intercept' in truth.fixed else 'no'}")
    if main:
        lines.append(f"main = {', '.join(main)}")
    if shared:
        lines.append(f"shared = {', '.join(shared)}")
    counts: dict[str, int] = {}
    for tb in truth.blocks:
        counts[tb.level] = counts.get(tb.level, 0) + 1
        suffix = "" if counts[tb.level] == 1 else f".{counts[tb.level]}"
        lines += [
            "",
            f"[random.{tb.level}{suffix}]",
            f"terms = {', '.join(tb.terms)}",
            f"shape = {tb.shape}",
        ]
    lines += [
        "",
        "[random.residual]",
        "shape = unstructured",
        "",
        "[mcmc]",
        f"iterations = {iterations}",
        f"burnin = {burnin}",
        f"thin = {thin}",
        f"chains = {chains}",
        f"seed = {seed}",
        "",
    ]
    return "\n".join(lines)


def _id_columns(truth: TruthRecord) -> dict[str, Column]:
    n_teams = truth.n_facilities * truth.teams_per_facility
    n = n_teams * truth.patients_per_team
    facility = np.empty(n, dtype=object)
    team = np.empty(n, dtype=object)
    patient = np.empty(n, dtype=object)
    row = 0
    for f in range(truth.n_facilities):
        for t in range(truth.teams_per_facility):
            team_idx = f * truth.teams_per_facility + t
            for _ in range(truth.patients_per_team):
                facility[row] = f"F{f + 1:04d}"
                team[row] = f"T{team_idx + 1:05d}"
                patient[row] = f"P{row + 1:07d}"
                row += 1
    return {
        "patient": Column(IDENTIFIER, patient),
        "team": Column(IDENTIFIER, team),
        "facility": Column(IDENTIFIER, facility),
    }


def generate_dataset(truth: TruthRecord, include_effects: bool = False):
    """Draw facility, team, and residual effects from the declared blocks and
    emit responses through the family. Returns (table, hierarchy), plus the
    realized effects when include_effects is set."""
    for tb in truth.blocks:
        np.linalg.cholesky(np.asarray(tb.parametric, dtype=np.float64))
    np.linalg.cholesky(np.asarray(truth.residual, dtype=np.float64))
    if min(truth.n_facilities, truth.teams_per_facility, truth.patients_per_team) < 1:
        raise ConfigError("all hierarchy sizes must be at least 1")

    rng = np.random.default_rng(truth.seed)
    columns = _id_columns(truth)
    n = len(columns["patient"].values)
    for cov in truth.covariates:
        columns[cov] = Column(NUMERIC, rng.standard_normal(n))
    for cat, levels in truth.categoricals.items():
        draws = rng.integers(0, len(levels), size=n)
        columns[cat] = Column(CATEGORICAL, np.array([levels[i] for i in draws], dtype=object))

    p = len(truth.responses)
    spec = truth_spec(truth)
    # Placeholder responses so the design builders can run; filled below.
    for resp in truth.responses:
        columns[resp] = Column(NUMERIC, np.zeros(n))
    table = ObservationTable(columns, truth.responses)
    hierarchy = build_hierarchy(table, HIER_COLUMNS)
    stacked = StackedData(
        y=np.zeros(n * p),
        response_index=np.tile(np.arange(p), n),
        subject_index=np.repeat(np.arange(n), p),
        responses=truth.responses,
        table=table,
    )
    fixed = build_fixed_design(spec, stacked, validate=False)
    random = build_random_design(spec, stacked, hierarchy)

    shared_label = "+".join(truth.responses)
    gamma = np.zeros(fixed.q)
    for j, slot in enumerate(fixed.slots):
        coefs = truth.fixed.get(slot.term, {})
        if slot.response == shared_label and p > 1:
            gamma[j] = coefs.get("shared", 0.0)
        else:
            gamma[j] = coefs.get(slot.response, coefs.get("shared", 0.0))

    eps = np.zeros(random.m)
    effects: dict[str, np.ndarray] = {}
    for layout, tb in zip(random.layouts, truth.blocks):
        chol = np.linalg.cholesky(np.asarray(tb.parametric, dtype=np.float64))
        phi = rng.standard_normal((layout.g, layout.d)) @ chol.T
        eps[layout.col_start:layout.col_stop] = phi.reshape(-1)
        effects[layout.label] = phi
    resid = rng.standard_normal((n, p)) @ np.linalg.cholesky(
        np.asarray(truth.residual, dtype=np.float64)).T
    effects["residual"] = resid

    eta = fixed.matrix @ gamma + random.matrix @ eps + resid.reshape(-1)
    family = family_from_name(truth.family)
    y = family.simulate(eta, rng)

    for j, resp in enumerate(truth.responses):
        table = table.replace_column(resp, Column(NUMERIC, y[j::p].copy()))
    effects["eta"] = eta
    effects["gamma"] = gamma
    if include_effects:
        return table, hierarchy, effects
    return table, hierarchy
