"""Posterior and convergence diagnostics: deviance/DIC, HPD intervals,
potential scale reduction, effective sample size, and QQ data with
parametric-bootstrap envelopes.

All functions are pure over immutable draw arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DomainError, StatisticError
from .families import Family

LOG_2PI = math.log(2.0 * math.pi)


def gaussian_deviance(y: np.ndarray, mean: np.ndarray, r_param: np.ndarray) -> float:
    """-2 log N(y | mean, R) summed over subjects; R is block-diagonal with
    one (P x P) residual block per subject, rows ordered subject-major."""
    r_param = np.atleast_2d(np.asarray(r_param, dtype=np.float64))
    p = r_param.shape[0]
    y = np.asarray(y, dtype=np.float64)
    resid = (y - np.asarray(mean, dtype=np.float64)).reshape(-1, p)
    n = resid.shape[0]
    sign, logdet = np.linalg.slogdet(r_param)
    if sign <= 0:
        raise DomainError("residual covariance is not positive definite")
    r_inv = np.linalg.inv(r_param)
    quad = np.einsum("ij,jk,ik->i", resid, r_inv, resid)
    if not np.all(np.isfinite(quad)):
        row = int(np.flatnonzero(~np.isfinite(quad))[0])
        raise DomainError(f"non-finite density at subject row {row}")
    return float(n * p * LOG_2PI + n * logdet + quad.sum())


def pointwise_deviance(y: np.ndarray, eta: np.ndarray, family: Family) -> float:
    """-2 sum of log p_i(Y_i | eta_i) over stacked rows (non-gaussian path)."""
    ll = family.loglik(np.asarray(y, dtype=np.float64), np.asarray(eta, dtype=np.float64))
    if not np.all(np.isfinite(ll)):
        row = int(np.flatnonzero(~np.isfinite(ll))[0])
        raise DomainError(f"non-finite density at stacked row {row}")
    return float(-2.0 * ll.sum())


def deviance(family: Family, y: np.ndarray, *, mean=None, r_param=None, eta=None) -> float:
    """Model deviance: the gaussian branch conditions on (location, R), the
    non-gaussian branch on the latent predictor."""
    if family.is_gaussian:
        if mean is None or r_param is None:
            raise ValueError("gaussian deviance needs mean and r_param")
        return gaussian_deviance(y, mean, r_param)
    if eta is None:
        raise ValueError(f"{family.name} deviance needs the latent predictor")
    return pointwise_deviance(y, eta, family)


def dic(deviance_draws: np.ndarray, deviance_at_mean: float) -> float:
    """Deviance information criterion: 2 * mean(D) - D(posterior means)."""
    draws = np.asarray(deviance_draws, dtype=np.float64)
    if draws.size == 0:
        raise StatisticError("DIC needs at least one stored deviance draw")
    return float(2.0 * draws.mean() - deviance_at_mean)


def hpd_interval(draws, prob: float) -> tuple[float, float]:
    """Shortest contiguous window of the sorted draws holding ceil(prob * n)
    points; ties broken by the lowest starting index."""
    draws = np.sort(np.asarray(draws, dtype=np.float64))
    n = draws.size
    if n < 2:
        raise StatisticError("HPD interval needs at least two draws")
    if not 0.0 < prob < 1.0:
        raise StatisticError(f"HPD probability must be in (0, 1), got {prob}")
    k = int(math.ceil(prob * n))
    k = max(k, 1)
    if k >= n:
        return (float(draws[0]), float(draws[-1]))
    widths = draws[k - 1:] - draws[: n - k + 1]
    start = int(np.argmin(widths))  # argmin takes the first minimum
    return (float(draws[start]), float(draws[start + k - 1]))


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    sd: float
    hpd_lower: float
    hpd_upper: float
    prob: float
    significance: str  # "", "*" (95% HPD excludes null), "**" (99.9% does)


def summarize_draws(draws, prob: float = 0.95, null: float = 0.0) -> PosteriorSummary:
    """Mean, SD, HPD bounds, and the two-tier significance marker."""
    draws = np.asarray(draws, dtype=np.float64)
    lo, hi = hpd_interval(draws, prob)
    marker = ""
    lo95, hi95 = hpd_interval(draws, 0.95)
    if not lo95 <= null <= hi95:
        marker = "*"
        lo999, hi999 = hpd_interval(draws, 0.999)
        if not lo999 <= null <= hi999:
            marker = "**"
    return PosteriorSummary(
        mean=float(draws.mean()),
        sd=float(draws.std(ddof=1)) if draws.size > 1 else 0.0,
        hpd_lower=lo,
        hpd_upper=hi,
        prob=prob,
        significance=marker,
    )


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor over >= 2 equal-length chains."""
    arrays = [np.asarray(c, dtype=np.float64) for c in chains]
    if len(arrays) < 2:
        raise StatisticError("Gelman-Rubin needs at least two chains")
    n = arrays[0].size
    if n < 4:
        raise StatisticError("Gelman-Rubin needs chains of length >= 4")
    if any(a.size != n for a in arrays):
        raise StatisticError("Gelman-Rubin needs equal-length chains")
    within = float(np.mean([a.var(ddof=1) for a in arrays]))
    if within == 0.0:
        raise StatisticError("all chains are constant; scale reduction undefined")
    means = np.array([a.mean() for a in arrays])
    between = n * means.var(ddof=1)
    return float(np.sqrt(((n - 1) / n * within + between / n) / within))


def effective_sample_size(draws) -> float:
    """n / (1 + 2 sum of autocorrelations), truncated at the first
    non-positive paired sum (initial-positive-sequence rule)."""
    draws = np.asarray(draws, dtype=np.float64)
    n = draws.size
    if n < 10:
        raise StatisticError("effective sample size needs at least 10 draws")
    centered = draws - draws.mean()
    if np.all(centered == 0.0):
        raise StatisticError("effective sample size undefined for a constant sequence")
    # FFT autocovariance with 1/n normalization.
    size = 1 << (2 * n - 1).bit_length()
    fft = np.fft.rfft(centered, size)
    acov = np.fft.irfft(fft * np.conj(fft), size)[:n].real / n
    rho = acov / acov[0]
    total = 0.0
    k = 1
    while k + 1 < n:
        paired = rho[k] + rho[k + 1]
        if paired <= 0.0:
            break
        total += paired
        k += 2
    tau = 1.0 + 2.0 * total
    return float(n / tau)


@dataclass(eq=False)
class QQTable:
    """Plot-ready QQ data: fitted-family quantiles vs sample quantiles with a
    pointwise bootstrap envelope."""

    family: str
    params: dict
    theoretical: np.ndarray
    sample: np.ndarray
    envelope_lower: np.ndarray
    envelope_upper: np.ndarray

    @property
    def n_inside(self) -> int:
        inside = (self.sample >= self.envelope_lower) & (self.sample <= self.envelope_upper)
        return int(inside.sum())


_QQ_FAMILIES = ("lognormal", "gaussian", "gamma")


def _fit_qq_family(values: np.ndarray, family: str):
    if family == "lognormal":
        logs = np.log(values)
        mu, sigma = float(logs.mean()), float(logs.std(ddof=0))
        if sigma <= 0:
            raise DomainError("lognormal fit needs non-constant data")
        frozen = stats.lognorm(s=sigma, scale=math.exp(mu))
        return frozen, {"mu": mu, "sigma": sigma}
    if family == "gaussian":
        mean, sd = float(values.mean()), float(values.std(ddof=0))
        if sd <= 0:
            raise DomainError("gaussian fit needs non-constant data")
        return stats.norm(loc=mean, scale=sd), {"mean": mean, "sd": sd}
    if family == "gamma":
        shape, _, scale = stats.gamma.fit(values, floc=0.0)
        return stats.gamma(a=shape, scale=scale), {"shape": float(shape), "scale": float(scale)}
    raise DomainError(f"unsupported QQ family {family!r}; choose from {_QQ_FAMILIES}")


def qq_quantiles(values, family: str, n_boot: int = 200,
                 rng: np.random.Generator | None = None) -> QQTable:
    """Maximum-likelihood fit of the candidate family plus (theoretical,
    sample) quantile pairs and a pointwise 95% parametric-bootstrap envelope."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 20:
        raise StatisticError("QQ data needs at least 20 values")
    if family in ("lognormal", "gamma") and np.any(values <= 0):
        bad = float(values[values <= 0][0])
        raise DomainError(
            f"value {bad:g} violates the {family} support (positive values only)")
    if rng is None:
        rng = np.random.default_rng(0)
    frozen, params = _fit_qq_family(values, family)
    positions = (np.arange(1, n + 1) - 0.5) / n
    theoretical = frozen.ppf(positions)
    sample = np.sort(values)
    boot = np.sort(frozen.rvs(size=(n_boot, n), random_state=rng), axis=1)
    lower, upper = np.percentile(boot, [2.5, 97.5], axis=0)
    return QQTable(
        family=family,
        params=params,
        theoretical=theoretical,
        sample=sample,
        envelope_lower=lower,
        envelope_upper=upper,
    )
