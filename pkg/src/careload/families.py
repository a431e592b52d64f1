"""Response families: gaussian, gaussian on the log scale, and poisson with log link.

A family owns the response-side behavior: support validation, the design-time
transform onto the latent (working) scale, pointwise log-likelihood for
non-gaussian responses, the response-scale back-transforms used by prediction,
and forward simulation.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError


class Family:
    name = ""
    link = ""
    is_gaussian = True
    dispersion = True

    def validate_response(self, name: str, values: np.ndarray) -> None:
        if np.isnan(values).any():
            row = int(np.flatnonzero(np.isnan(values))[0])
            raise ConfigError(
                f"response column {name!r} has a missing value at row {row}; "
                "impute or drop before fitting")

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Raw response -> latent-scale working response."""
        return np.asarray(values, dtype=np.float64)

    def latent_to_response(self, latent):
        """Monotone map from latent scale to response scale (no variance correction)."""
        return latent

    def mean_response(self, latent, resid_var):
        """Conditional mean of the response given the linear predictor."""
        return latent

    def loglik(self, y, eta):
        raise NotImplementedError(f"{self.name} responses have no pointwise likelihood path")

    def initial_latent(self, y_work: np.ndarray) -> np.ndarray:
        return np.asarray(y_work, dtype=np.float64)

    def simulate(self, eta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Emit raw responses from the latent predictor (residual included in eta)."""
        raise NotImplementedError

    def __repr__(self):
        return f"<family {self.name}>"


class GaussianFamily(Family):
    name = "gaussian"
    link = "identity"

    def simulate(self, eta, rng):
        return np.asarray(eta, dtype=np.float64)


class LogGaussianFamily(Family):
    """Lognormal response fit as a gaussian on log(y) with identity link."""

    name = "gaussian-log"
    link = "identity"

    def validate_response(self, name, values):
        super().validate_response(name, values)
        bad = np.flatnonzero(values <= 0)
        if bad.size:
            raise ConfigError(
                f"response column {name!r} has a non-positive value "
                f"({values[bad[0]]:g} at row {int(bad[0])}); gaussian-log needs y > 0")

    def transform(self, values):
        return np.log(np.asarray(values, dtype=np.float64))

    def latent_to_response(self, latent):
        return np.exp(latent)

    def mean_response(self, latent, resid_var):
        return np.exp(latent + 0.5 * resid_var)

    def simulate(self, eta, rng):
        return np.exp(eta)


class PoissonLogFamily(Family):
    name = "poisson-log"
    link = "log"
    is_gaussian = False
    dispersion = False

    def validate_response(self, name, values):
        super().validate_response(name, values)
        frac = values != np.floor(values)
        bad = np.flatnonzero(frac | (values < 0))
        if bad.size:
            raise ConfigError(
                f"response column {name!r} has value {values[bad[0]]:g} at row "
                f"{int(bad[0])}; poisson-log needs non-negative integers")

    def latent_to_response(self, latent):
        return np.exp(latent)

    def mean_response(self, latent, resid_var):
        return np.exp(latent + 0.5 * resid_var)

    def loglik(self, y, eta):
        return y * eta - np.exp(eta) - gammaln(y + 1.0)

    def initial_latent(self, y_work):
        return np.log(np.asarray(y_work, dtype=np.float64) + 0.5)

    def simulate(self, eta, rng):
        return rng.poisson(np.exp(eta)).astype(np.float64)


_FAMILIES = {f.name: f for f in (GaussianFamily(), LogGaussianFamily(), PoissonLogFamily())}


def family_from_name(name: str, link: str | None = None) -> Family:
    try:
        fam = _FAMILIES[name]
    except KeyError:
        raise ConfigError(
            f"unknown family {name!r}; choose from {sorted(_FAMILIES)}") from None
    if link is not None and link != fam.link:
        raise ConfigError(f"family {name!r} supports link {fam.link!r}, not {link!r}")
    return fam
