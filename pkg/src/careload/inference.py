"""Posterior post-processing: ICC shares, effect summaries, predictive
portfolios with credible intervals, NIS/RSUR utilization indices, and DIC
model ladders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diagnostics
from .design import align_random_design, block_term_matrix, build_fixed_design, prediction_stack
from .errors import ComparisonError, DomainError, PredictionError
from .mcmc import FitResult
from .tabular import ObservationTable

DIC_PREFERENCE = -10.0


@dataclass(eq=False)
class IccSummary:
    """Per-level variance shares: full proportion draws plus summaries."""

    levels: tuple[str, ...]
    proportions: dict[str, np.ndarray]
    mean: dict[str, float]
    hpd: dict[str, tuple[float, float]]


def icc(patient_var, team_var, facility_var, prob: float = 0.95) -> IccSummary:
    """Variance share of each hierarchy level, draw by draw.

    Proportions sum to one per draw; each level is summarized by its mean
    and HPD interval.
    """
    draws = {
        "patient": np.atleast_1d(np.asarray(patient_var, dtype=np.float64)),
        "team": np.atleast_1d(np.asarray(team_var, dtype=np.float64)),
        "facility": np.atleast_1d(np.asarray(facility_var, dtype=np.float64)),
    }
    length = {v.size for v in draws.values()}
    if len(length) != 1:
        raise DomainError("variance draw vectors must have equal length")
    for level, v in draws.items():
        if np.any(v <= 0):
            raise DomainError(f"non-positive {level} variance draw")
    total = draws["patient"] + draws["team"] + draws["facility"]
    proportions = {level: v / total for level, v in draws.items()}
    mean = {level: float(p.mean()) for level, p in proportions.items()}
    hpd = {}
    for level, p in proportions.items():
        if p.size >= 2:
            hpd[level] = diagnostics.hpd_interval(p, prob)
        else:
            hpd[level] = (float(p[0]), float(p[0]))
    return IccSummary(("patient", "team", "facility"), proportions, mean, hpd)


@dataclass(frozen=True)
class EffectEstimate:
    label: str
    mean: float
    sd: float
    lower: float
    upper: float
    significance: str
    scale: str


def summarize_effects(fit, scale: str = "linear", prob: float = 0.95) -> list[EffectEstimate]:
    """Effect table for the location coefficients.

    The ratio scale exponentiates draws before summarizing; its interval is
    the exponentiated linear-scale HPD (equivariant, so exclusion of 1 on
    the ratio scale matches exclusion of 0 on the linear scale exactly).
    """
    if scale not in ("linear", "ratio"):
        raise DomainError(f"unknown effect scale {scale!r}")
    draws = fit.gamma_draws() if isinstance(fit, FitResult) else np.asarray(fit[0])
    labels = fit.gamma_labels if isinstance(fit, FitResult) else list(fit[1])
    out = []
    for j, label in enumerate(labels):
        col = draws[:, j]
        base = diagnostics.summarize_draws(col, prob=prob, null=0.0)
        if scale == "ratio":
            ratio = np.exp(col)
            out.append(EffectEstimate(
                label=label,
                mean=float(ratio.mean()),
                sd=float(ratio.std(ddof=1)) if ratio.size > 1 else 0.0,
                lower=float(np.exp(base.hpd_lower)),
                upper=float(np.exp(base.hpd_upper)),
                significance=base.significance,
                scale="ratio",
            ))
        else:
            out.append(EffectEstimate(label, base.mean, base.sd, base.hpd_lower,
                                      base.hpd_upper, base.significance, "linear"))
    return out


@dataclass(eq=False)
class PredictionTable:
    """Per subject x response: response-scale point prediction and interval."""

    subjects: np.ndarray  # subject identifiers, length n
    responses: tuple[str, ...]
    point: np.ndarray  # (n, P)
    lower: np.ndarray
    upper: np.ndarray
    level: float
    include_random: bool

    @property
    def n_subjects(self) -> int:
        return self.point.shape[0]


def _block_matrices(fit: FitResult, label: str, d: int) -> np.ndarray:
    """Reconstruct each stored draw's parametric matrix for one block, (nd, d, d)."""
    tri = fit.block_draws(label)
    pairs = fit.chains[0].block_pairs[label]
    out = np.zeros((tri.shape[0], d, d))
    for col, (i, j) in enumerate(pairs):
        out[:, i, j] = tri[:, col]
        out[:, j, i] = tri[:, col]
    return out


def _residual_matrices(fit: FitResult) -> np.ndarray:
    p = len(fit.spec.responses)
    tri = fit.residual_draws()
    pairs = [(i, j) for i in range(p) for j in range(i, p)]
    out = np.zeros((tri.shape[0], p, p))
    for col, (i, j) in enumerate(pairs):
        out[:, i, j] = tri[:, col]
        out[:, j, i] = tri[:, col]
    return out


def predict_portfolio(fit: FitResult, table: ObservationTable,
                      include_random: bool = True, level: float = 0.95,
                      rng: np.random.Generator | None = None) -> PredictionTable:
    """Posterior predictive portfolio for new data.

    Per stored draw the latent location X gamma + W eps is computed (eps
    zeroed when include_random is false); points are means of the family's
    conditional-mean transform, intervals are the family transform of the
    pointwise latent quantiles. Subjects in unseen groups get fresh effects
    drawn from that draw's block covariance.
    """
    if not 0.0 < level < 1.0:
        raise DomainError(f"interval level must be in (0, 1), got {level}")
    if rng is None:
        rng = np.random.default_rng(0)
    spec = fit.spec
    info = fit.info
    family = spec.family.behavior()
    responses = spec.responses
    p = len(responses)
    stacked = prediction_stack(table, responses)
    n = stacked.n_subjects

    fixed = build_fixed_design(spec, stacked, info, validate=False)
    if [s.name for s in fixed.slots] != [s.name for s in fit.fixed_slots]:
        raise PredictionError("new data produces a different coefficient layout than the fit")
    gamma = fit.gamma_draws()
    nd = gamma.shape[0]
    latent = gamma @ fixed.matrix.T  # (nd, n*P)

    if include_random:
        eps = fit.eps_draws()
        if eps is None:
            raise PredictionError(
                "fit stored no random-effect draws; rerun with store_effects enabled "
                "or predict with include_random disabled")
        w_new, new_groups = align_random_design(spec, stacked, fit.layouts, info)
        latent += (w_new @ eps.T).T
        for layout in fit.layouts:
            unseen = new_groups.get(layout.label)
            if not unseen:
                continue
            term_vals = block_term_matrix(layout.spec, table, info)  # (n, d)
            covs = _block_matrices(fit, layout.label, layout.d)
            chols = np.linalg.cholesky(covs)  # (nd, d, d)
            resp_of_slot = np.array([responses.index(s.response) for s in layout.spec.slots])
            for group_id, group_rows in unseen.items():
                z = rng.standard_normal((nd, layout.d))
                effects = np.einsum("dij,dj->di", chols, z)  # (nd, d)
                for subj in group_rows:
                    stack_rows = subj * p + resp_of_slot
                    latent[:, stack_rows] += term_vals[subj] * effects

    scales = np.array([info.response_scales[r] for r in responses])
    resid = _residual_matrices(fit)
    point = np.empty((n, p))
    lower = np.empty((n, p))
    upper = np.empty((n, p))
    alpha = (1.0 - level) / 2.0
    for j in range(p):
        lat_j = latent[:, j::p] * scales[j]  # (nd, n)
        var_j = resid[:, j, j][:, None] * scales[j] ** 2
        point[:, j] = family.mean_response(lat_j, var_j).mean(axis=0)
        q_lo = np.quantile(lat_j, alpha, axis=0)
        q_hi = np.quantile(lat_j, 1.0 - alpha, axis=0)
        lower[:, j] = family.latent_to_response(q_lo)
        upper[:, j] = family.latent_to_response(q_hi)

    if info.hierarchy_keys and info.hierarchy_keys[0] in table.columns:
        subjects = table.labels(info.hierarchy_keys[0])
    else:
        subjects = np.array([str(i) for i in range(n)], dtype=object)
    return PredictionTable(subjects, responses, point, lower, upper, level, include_random)


@dataclass(frozen=True)
class IndexRow:
    group: str
    response: str
    n_subjects: int
    value: float


def nis(predictions: PredictionTable, groups) -> list[IndexRow]:
    """Normalized intensity score per group: the group's summed predicted
    workload over (group size x median predicted workload of all subjects)."""
    groups = np.asarray(groups, dtype=object)
    if predictions.n_subjects == 0:
        raise DomainError("no predictions to index")
    if groups.shape[0] != predictions.n_subjects:
        raise DomainError("group labels do not align with predictions")
    out = []
    for j, resp in enumerate(predictions.responses):
        values = predictions.point[:, j]
        median = float(np.median(values))
        if median == 0.0:
            raise DomainError(f"median predicted workload for {resp!r} is zero")
        for group in sorted(set(groups)):
            members = groups == group
            n_j = int(members.sum())
            out.append(IndexRow(group, resp, n_j,
                                float(values[members].sum() / (n_j * median))))
    return out


def rsur(pred_with: PredictionTable, pred_without: PredictionTable, groups) -> list[IndexRow]:
    """Risk-standardized utilization rate per group: predicted workload with
    random components over the same workload at the reference (zero-effect)
    setting. Values above one flag over-utilization."""
    if pred_with.n_subjects != pred_without.n_subjects:
        raise DomainError("prediction tables cover different subjects")
    if pred_with.responses != pred_without.responses:
        raise DomainError("prediction tables cover different responses")
    groups = np.asarray(groups, dtype=object)
    if groups.shape[0] != pred_with.n_subjects:
        raise DomainError("group labels do not align with predictions")
    out = []
    for j, resp in enumerate(pred_with.responses):
        for group in sorted(set(groups)):
            members = groups == group
            denom = float(pred_without.point[members, j].sum())
            if denom == 0.0:
                raise DomainError(f"zero reference workload for group {group!r}")
            numer = float(pred_with.point[members, j].sum())
            out.append(IndexRow(group, resp, int(members.sum()), numer / denom))
    return out


@dataclass(frozen=True)
class LadderEntry:
    label: str
    dic: float
    delta: float | None
    preferred: bool


@dataclass(eq=False)
class ModelLadder:
    entries: list[LadderEntry]

    def preferred_labels(self) -> list[str]:
        return [e.label for e in self.entries if e.preferred]


def compare_models(fits: list[tuple[str, FitResult]]) -> ModelLadder:
    """DIC ladder over fits of the same data; a step is preferred when it
    lowers DIC by more than 10."""
    if len(fits) < 2:
        raise ComparisonError("model comparison needs at least two fits")
    hashes = {fit.data_hash for _, fit in fits}
    if len(hashes) != 1:
        raise ComparisonError("fits were run on different data (content hashes differ)")
    entries: list[LadderEntry] = []
    previous: float | None = None
    for label, fit in fits:
        value = diagnostics.dic(fit.deviance_draws(), fit.dic_stats["d_at_mean"])
        delta = None if previous is None else value - previous
        preferred = delta is not None and delta < DIC_PREFERENCE
        entries.append(LadderEntry(label, float(value), delta, preferred))
        previous = value
    return ModelLadder(entries)
