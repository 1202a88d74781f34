"""Hyperprior elicitation from interpretable range and sd quantile targets.

The stationary field's correlation range and marginal standard deviation
are log-normal under independent Gaussian priors on the log-scale weights,
so median/upper-quantile targets invert in closed form. The non-stationary
extension links the covariate-slope prior variances to coefficients of
variation of the relative change in the nominal range and sd between sea
level and a reference elevation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

from scipy.special import ndtri

from .spde import SQRT_8, SQRT_4PI

PRIOR_SCHEMA_VERSION = 1


class ElicitationError(ValueError):
    """Raised when quantile targets or coherence inputs are infeasible."""


@dataclass(frozen=True)
class QuantileTargets:
    """Median and q-level quantile targets for range (km) and sd (response units)."""

    rho_median: float
    rho_q: float
    sigma_median: float
    sigma_q: float
    q_level: float = 0.9

    def __post_init__(self):
        if not 0.5 < self.q_level < 1.0:
            raise ElicitationError("q_level must lie in (0.5, 1)")
        if not 0.0 < self.rho_median < self.rho_q:
            raise ElicitationError("need rho_q > rho_median > 0")
        if not 0.0 < self.sigma_median < self.sigma_q:
            raise ElicitationError("need sigma_q > sigma_median > 0")


@dataclass(frozen=True)
class CoherenceInputs:
    """Reference elevation and coefficients of variation of the relative change."""

    h0: float
    c_rho: float
    c_sigma: float

    def __post_init__(self):
        if self.h0 <= 0:
            raise ElicitationError("reference elevation h0 must be positive")
        if not 0.0 < self.c_rho:
            raise ElicitationError("c_rho must be positive")
        if not self.c_sigma > self.c_rho:
            raise ElicitationError(
                "positive variance requires c_sigma > c_rho "
                f"(got c_sigma={self.c_sigma:g}, c_rho={self.c_rho:g})"
            )


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian hyperpriors for the dependence weights plus fixed/noise priors.

    The covariate-slope entries are None in stationary mode; their means are
    exactly zero by construction when present. beta_sd is the fixed-effect
    prior standard deviation; the noise precision prior is
    Gamma(noise_shape, noise_rate).
    """

    mu_tau: float
    var_tau: float
    mu_kappa: float
    var_kappa: float
    var_tau_h: float | None = None
    var_kappa_h: float | None = None
    mu_tau_h: float = 0.0
    mu_kappa_h: float = 0.0
    beta_sd: float = 100.0
    noise_shape: float = 2.0
    noise_rate: float = 0.02

    def __post_init__(self):
        for name in ("var_tau", "var_kappa"):
            if getattr(self, name) <= 0:
                raise ElicitationError(f"{name} must be positive")
        for name in ("var_tau_h", "var_kappa_h"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ElicitationError(f"{name} must be positive when present")

    @property
    def nonstationary(self) -> bool:
        return self.var_tau_h is not None and self.var_kappa_h is not None

    def to_dict(self) -> dict:
        doc = {"schema_version": PRIOR_SCHEMA_VERSION}
        doc.update(asdict(self))
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "GaussianPrior":
        fields = {
            k: v for k, v in doc.items() if k not in ("schema_version", "manifest")
        }
        return GaussianPrior(**fields)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "GaussianPrior":
        with open(path) as fh:
            return GaussianPrior.from_dict(json.load(fh))


def solve_stationary_prior(targets: QuantileTargets) -> tuple[float, float, float, float]:
    """Invert the log-normal quantile formulas for the stationary weights.

    Returns (mu_tau, var_tau, mu_kappa, var_kappa). The range targets fix
    the kappa prior alone; the sd targets then fix the tau prior, which
    requires the sd spread to exceed the part already explained by kappa.
    """
    z = float(ndtri(targets.q_level))
    mu_kappa = math.log(SQRT_8 / targets.rho_median)
    sd_kappa = math.log(targets.rho_q / targets.rho_median) / z
    var_kappa = sd_kappa**2

    mu_tau = -math.log(targets.sigma_median * SQRT_4PI) - mu_kappa
    total_sd = math.log(targets.sigma_q / targets.sigma_median) / z
    var_tau = total_sd**2 - var_kappa
    if var_tau <= 0:
        raise ElicitationError(
            "sd targets too tight relative to range targets: require "
            f"(log(sigma_q/sigma_median)/z)^2 > var_kappa, got {total_sd**2:.4g} "
            f"<= {var_kappa:.4g}"
        )
    return mu_tau, var_tau, mu_kappa, var_kappa


def solve_nonstationary_prior(
    targets: QuantileTargets, coherence: CoherenceInputs
) -> GaussianPrior:
    """Full prior from quantile targets and the coherence conditions.

    The intercept priors equal the stationary solution, the slope means are
    zero, and the slope variances follow from the coefficients of variation:
    var_kappa_h = log(c_rho^2 + 1) / h0^2 and
    var_tau_h = log((c_sigma^2 + 1) / (c_rho^2 + 1)) / h0^2.
    """
    mu_tau, var_tau, mu_kappa, var_kappa = solve_stationary_prior(targets)
    h0sq = coherence.h0**2
    var_kappa_h = math.log(coherence.c_rho**2 + 1.0) / h0sq
    var_tau_h = math.log(
        (coherence.c_sigma**2 + 1.0) / (coherence.c_rho**2 + 1.0)
    ) / h0sq
    return GaussianPrior(
        mu_tau=mu_tau,
        var_tau=var_tau,
        mu_kappa=mu_kappa,
        var_kappa=var_kappa,
        var_tau_h=var_tau_h,
        var_kappa_h=var_kappa_h,
    )


def stationary_prior(targets: QuantileTargets) -> GaussianPrior:
    """Prior for the stationary model (no covariate slopes)."""
    mu_tau, var_tau, mu_kappa, var_kappa = solve_stationary_prior(targets)
    return GaussianPrior(
        mu_tau=mu_tau, var_tau=var_tau, mu_kappa=mu_kappa, var_kappa=var_kappa
    )


def slope_variances_for_bases(
    coherence_list: list[CoherenceInputs],
) -> list[tuple[float, float]]:
    """Per-basis (var_tau_h, var_kappa_h) pairs for multiple covariate bases.

    Mechanical extension of the single-covariate rule; only the elevation
    case is validated against external references.
    """
    out = []
    for c in coherence_list:
        h0sq = c.h0**2
        out.append(
            (
                math.log((c.c_sigma**2 + 1.0) / (c.c_rho**2 + 1.0)) / h0sq,
                math.log(c.c_rho**2 + 1.0) / h0sq,
            )
        )
    return out


def nominal_prior_quantile(
    prior: GaussianPrior, h: float, p: float, which: str
) -> float:
    """Quantile of the log-normal nominal range or sd at covariate value h.

    which is 'rho' or 'sigma'. At h = 0 this reproduces the stationary
    quantiles (coherence condition 1); slope terms contribute h^2-scaled
    variance and h-scaled mean shifts (zero under condition 2).
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    var_tau_h = prior.var_tau_h or 0.0
    var_kappa_h = prior.var_kappa_h or 0.0
    if which == "rho":
        location = math.log(SQRT_8) - prior.mu_kappa - h * prior.mu_kappa_h
        scale2 = prior.var_kappa + h**2 * var_kappa_h
    elif which == "sigma":
        location = (
            -math.log(SQRT_4PI)
            - prior.mu_tau
            - prior.mu_kappa
            - h * (prior.mu_tau_h + prior.mu_kappa_h)
        )
        scale2 = prior.var_tau + prior.var_kappa + h**2 * (var_tau_h + var_kappa_h)
    else:
        raise ValueError("which must be 'rho' or 'sigma'")
    return math.exp(location + math.sqrt(scale2) * float(ndtri(p)))
