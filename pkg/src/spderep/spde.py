"""Dependence-structure parametrization and GMRF precision assembly.

The spatial field is defined through a Whittle-type SPDE whose local
variance and range parameters follow log-linear models in per-node basis
functions (the constant basis gives the stationary model; adding a
covariate such as elevation gives the non-stationary one). Discretizing
with linear finite elements turns the field into a GMRF whose sparse
precision matrix is assembled here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy import special

from .mesh import FemMatrices

SQRT_8 = math.sqrt(8.0)
SQRT_4PI = math.sqrt(4.0 * math.pi)

STATIONARY = "stationary"
NONSTATIONARY = "nonstationary"


@dataclass(frozen=True)
class CovariateField:
    """Per-node covariate values (elevation in km above sea level)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("covariate must be a finite 1-d array")


@dataclass(frozen=True)
class SpdeConfig:
    """Log-linear basis specification for the local SPDE parameters.

    The constant basis function is implicit: weight vectors have length
    1 + len(tau_basis) (respectively kappa_basis), with the first entry the
    intercept. Stationary mode has no extra basis functions.
    """

    mode: str
    node_count: int
    tau_basis: tuple[np.ndarray, ...] = ()
    kappa_basis: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if self.mode not in (STATIONARY, NONSTATIONARY):
            raise ValueError(f"unknown mode {self.mode!r}")
        tau_b = tuple(np.asarray(b, dtype=float) for b in self.tau_basis)
        kappa_b = tuple(np.asarray(b, dtype=float) for b in self.kappa_basis)
        object.__setattr__(self, "tau_basis", tau_b)
        object.__setattr__(self, "kappa_basis", kappa_b)
        if self.mode == STATIONARY and (tau_b or kappa_b):
            raise ValueError("stationary mode admits only the constant basis")
        if self.mode == NONSTATIONARY and not (tau_b and kappa_b):
            raise ValueError("non-stationary mode requires at least one basis vector")
        for b in tau_b + kappa_b:
            if b.shape != (self.node_count,) or not np.all(np.isfinite(b)):
                raise ValueError("basis vectors must be finite, length node_count")

    @property
    def n_tau(self) -> int:
        return 1 + len(self.tau_basis)

    @property
    def n_kappa(self) -> int:
        return 1 + len(self.kappa_basis)

    @property
    def n_theta(self) -> int:
        """Dependence-structure weights, excluding the noise parameter."""
        return self.n_tau + self.n_kappa

    @staticmethod
    def stationary(node_count: int) -> "SpdeConfig":
        return SpdeConfig(mode=STATIONARY, node_count=node_count)

    @staticmethod
    def elevation(covariate: CovariateField) -> "SpdeConfig":
        """Non-stationary model with the covariate in both tau and kappa."""
        v = covariate.values
        return SpdeConfig(
            mode=NONSTATIONARY,
            node_count=len(v),
            tau_basis=(v,),
            kappa_basis=(v,),
        )


@dataclass(frozen=True)
class HyperParams:
    """A point in hyperparameter space.

    theta_tau / theta_kappa: log-linear weights (intercept first).
    log_noise_precision: log of the observation noise precision.
    """

    theta_tau: np.ndarray
    theta_kappa: np.ndarray
    log_noise_precision: float = 0.0

    def __post_init__(self):
        tt = np.atleast_1d(np.asarray(self.theta_tau, dtype=float))
        tk = np.atleast_1d(np.asarray(self.theta_kappa, dtype=float))
        object.__setattr__(self, "theta_tau", tt)
        object.__setattr__(self, "theta_kappa", tk)
        if not (np.all(np.isfinite(tt)) and np.all(np.isfinite(tk))):
            raise ValueError("hyperparameters must be finite")
        if not np.isfinite(self.log_noise_precision):
            raise ValueError("log_noise_precision must be finite")

    @property
    def noise_precision(self) -> float:
        return math.exp(self.log_noise_precision)

    def theta_vector(self) -> np.ndarray:
        """Flat ordering (theta_tau, theta_kappa, log_noise_precision)."""
        return np.concatenate(
            [self.theta_tau, self.theta_kappa, [self.log_noise_precision]]
        )

    @staticmethod
    def from_vector(vec: np.ndarray, config: SpdeConfig) -> "HyperParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != config.n_theta + 1:
            raise ValueError(
                f"expected {config.n_theta + 1} hyperparameters, got {vec.size}"
            )
        nt = config.n_tau
        return HyperParams(
            theta_tau=vec[:nt],
            theta_kappa=vec[nt : nt + config.n_kappa],
            log_noise_precision=float(vec[-1]),
        )


def local_params(config: SpdeConfig, theta: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the log-linear models for tau and kappa at every node."""
    if theta.theta_tau.size != config.n_tau or theta.theta_kappa.size != config.n_kappa:
        raise ValueError(
            f"weight/basis dimension mismatch: got ({theta.theta_tau.size}, "
            f"{theta.theta_kappa.size}), expected ({config.n_tau}, {config.n_kappa})"
        )
    m = config.node_count
    log_tau = np.full(m, theta.theta_tau[0])
    for w, b in zip(theta.theta_tau[1:], config.tau_basis):
        log_tau += w * b
    log_kappa = np.full(m, theta.theta_kappa[0])
    for w, b in zip(theta.theta_kappa[1:], config.kappa_basis):
        log_kappa += w * b
    return np.exp(log_tau), np.exp(log_kappa)


def assemble_precision(
    fem: FemMatrices, tau: np.ndarray, kappa: np.ndarray
) -> sparse.csc_matrix:
    """Assemble the GMRF precision T (K^2 C K^2 + K^2 G + G K^2 + G C^-1 G) T.

    T and K are diagonal with the nodewise tau and kappa values, C is the
    lumped mass diagonal and G the stiffness matrix.
    """
    tau = np.asarray(tau, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    m = fem.C_diag.size
    if tau.shape != (m,) or kappa.shape != (m,):
        raise ValueError("tau and kappa must be per-node vectors")
    if np.any(tau <= 0) or np.any(kappa <= 0):
        raise ValueError("tau and kappa must be strictly positive")
    return fem.precision_template.assemble(tau, kappa)


def matern_covariance(d, kappa: float, sigma2: float, nu: float):
    """Matern covariance at distance d (scale kappa, variance sigma2).

    Vectorized in d; returns sigma2 exactly at d = 0.
    """
    if kappa <= 0 or sigma2 <= 0 or nu <= 0:
        raise ValueError("kappa, sigma2 and nu must be positive")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    x = kappa * d
    with np.errstate(invalid="ignore"):
        vals = (
            sigma2
            / (2.0 ** (nu - 1.0) * special.gamma(nu))
            * x**nu
            * special.kv(nu, x)
        )
    return np.where(x == 0.0, sigma2, vals)[()]


def matern_variance(kappa: float, tau: float, nu: float = 1.0, dim: int = 2) -> float:
    """Marginal variance of the SPDE solution for given smoothness and dimension."""
    alpha = nu + dim / 2.0
    return float(
        special.gamma(nu)
        / (
            special.gamma(alpha)
            * (4.0 * math.pi) ** (dim / 2.0)
            * kappa ** (2.0 * nu)
            * tau**2
        )
    )


def stationary_summary(theta: HyperParams) -> tuple[float, float]:
    """Marginal standard deviation and correlation range of the stationary field.

    sigma = 1 / (sqrt(4 pi) tau kappa), rho = sqrt(8) / kappa; requires the
    intercept-only parametrization.
    """
    if theta.theta_tau.size != 1 or theta.theta_kappa.size != 1:
        raise ValueError("stationary summary requires intercept-only weights")
    tau = math.exp(theta.theta_tau[0])
    kappa = math.exp(theta.theta_kappa[0])
    return 1.0 / (SQRT_4PI * tau * kappa), SQRT_8 / kappa


def nominal_summary(theta: HyperParams, h) -> tuple[np.ndarray, np.ndarray]:
    """Nominal sd and range at covariate value h under the log-linear model.

    Evaluates the stationary formulas with tau(h) and kappa(h); h may be a
    scalar or an array. With a single basis weight per parameter this is the
    elevation model; intercept-only weights reproduce the stationary summary
    for every h.
    """
    h = np.asarray(h, dtype=float)
    slope_tau = theta.theta_tau[1] if theta.theta_tau.size > 1 else 0.0
    slope_kappa = theta.theta_kappa[1] if theta.theta_kappa.size > 1 else 0.0
    log_tau = theta.theta_tau[0] + slope_tau * h
    log_kappa = theta.theta_kappa[0] + slope_kappa * h
    sigma = np.exp(-(log_tau + log_kappa)) / SQRT_4PI
    rho = SQRT_8 * np.exp(-log_kappa)
    return sigma[()], rho[()]
