"""Exact Gaussian-likelihood Bayesian inference for the replicate model.

The likelihood is Gaussian, so conditionals of the latent field given the
hyperparameters are exact; the only approximation in the whole chain is the
numerical integration over hyperparameter space. Integration uses a full
lattice in eigen-standardized coordinates around the posterior mode (default
for up to three hyperparameters) or a central-composite design (default for
the five-parameter non-stationary model).

The per-year latent blocks are conditionally independent given the fixed
effects, so the posterior precision has a block-arrow shape. All heavy
operations factor one m-dimensional block per distinct observed station set
and couple them through a small Schur complement on the fixed effects; a
generic single-matrix reference path (`joint_marginal_loglik`) is kept for
verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve, eigh, LinAlgError
from scipy.optimize import minimize
from scipy.special import gammaln
from scipy.stats import skewnorm

from .gmrf import (
    LOG_2PI,
    ConstraintSet,
    FactorizationError,
    condition_on_constraints,
    constrained_log_density,
    factorize,
    gaussian_log_density,
)
from .model import ReplicateModel
from .priors import GaussianPrior
from .spde import (
    HyperParams,
    NONSTATIONARY,
    STATIONARY,
    assemble_precision,
    local_params,
)

QUANTILE_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)

_PENALTY = 1e10


class InferenceError(RuntimeError):
    """Raised when optimization or integration fails."""


def theta_names(model: ReplicateModel) -> list[str]:
    if model.config.mode == STATIONARY:
        return ["theta_tau", "theta_kappa", "log_tau_eps"]
    return [
        "theta_tau_1",
        "theta_tau_h",
        "theta_kappa_1",
        "theta_kappa_h",
        "log_tau_eps",
    ]


def log_theta_prior(prior: GaussianPrior, mode: str, theta: HyperParams) -> float:
    """Log prior density of the hyperparameters in the given model mode.

    The noise precision prior is Gamma(shape, rate) on tau_eps; the density
    is expressed in log tau_eps, Jacobian included.
    """

    def norm_lpdf(x, mu, var):
        return -0.5 * (math.log(2.0 * math.pi * var) + (x - mu) ** 2 / var)

    lp = norm_lpdf(theta.theta_tau[0], prior.mu_tau, prior.var_tau)
    lp += norm_lpdf(theta.theta_kappa[0], prior.mu_kappa, prior.var_kappa)
    if mode == NONSTATIONARY:
        if not prior.nonstationary:
            raise ValueError("non-stationary model requires covariate-slope priors")
        lp += norm_lpdf(theta.theta_tau[1], prior.mu_tau_h, prior.var_tau_h)
        lp += norm_lpdf(theta.theta_kappa[1], prior.mu_kappa_h, prior.var_kappa_h)
    a, b = prior.noise_shape, prior.noise_rate
    log_tau = theta.log_noise_precision
    lp += a * math.log(b) - gammaln(a) + a * log_tau - b * math.exp(log_tau)
    return float(lp)


class _Block:
    """Factorization and solve products for one distinct station set."""

    __slots__ = ("A", "h", "n", "F", "b1", "bh", "T1", "T2", "tc", "thc", "X")

    def __init__(self, A, h, Q_x, tau_eps, c, hc, AtA=None):
        self.A = A.tocsr()
        self.h = h
        self.n = A.shape[0]
        if AtA is None:
            AtA = (self.A.T @ self.A).tocsc()
        self.F = factorize((Q_x + tau_eps * AtA).tocsc(), check_symmetric=False)
        ones = np.ones(self.n)
        self.b1 = tau_eps * (self.A.T @ ones)
        self.bh = tau_eps * (self.A.T @ h)
        sol = self.F.solve(np.column_stack([self.b1, self.bh, c, hc]))
        self.T1, self.T2, self.tc, self.thc = sol.T
        self.X = None  # lazily solved A^T columns for per-station variances

    def station_solve(self):
        if self.X is None:
            self.X = self.F.solve(self.A.T.toarray())
        return self.X


class LatentSystem:
    """All per-hyperparameter-point Gaussian algebra for one model and dataset.

    Construction factors the prior field precision and one posterior block
    per distinct station set, forms the fixed-effect Schur complement, the
    constraint solves, and the constrained posterior mean. May raise
    FactorizationError at extreme hyperparameters.
    """

    def __init__(self, model: ReplicateModel, theta: HyperParams):
        self.model = model
        self.theta = theta
        self.tau_eps = theta.noise_precision
        tau_field, kappa_field = local_params(model.spde, theta)
        self.Q_x = assemble_precision(model.fem, tau_field, kappa_field)
        self.F_x = factorize(self.Q_x, check_symmetric=False)

        c, hc = model.constraint_vectors()
        self.c, self.hc = c, hc
        r, m = model.r, model.m
        self.r, self.m = r, m
        self.nb = r + 1
        self.n_obs = model.n_obs
        tau = self.tau_eps

        blocks: dict[bytes, _Block] = {}
        for j in range(r):
            key = model.block_keys[j]
            if key not in blocks:
                blocks[key] = _Block(
                    model.year_proj[j],
                    model.year_h[j],
                    self.Q_x,
                    tau,
                    c,
                    hc,
                    AtA=model.block_gram[key],
                )
        self.year_block = [blocks[k] for k in model.block_keys]
        self.blocks = blocks

        beta_prec = 1.0 / model.prior.beta_sd**2
        Qbb = np.zeros((self.nb, self.nb))
        S = np.zeros((self.nb, self.nb))
        for j, blk in enumerate(self.year_block):
            hsum = float(blk.h.sum())
            Qbb[j, j] = beta_prec + tau * blk.n
            Qbb[j, r] = Qbb[r, j] = tau * hsum
            Qbb[r, r] += tau * float(blk.h @ blk.h)
            S[j, j] -= float(blk.b1 @ blk.T1)
            sjr = float(blk.b1 @ blk.T2)
            S[j, r] -= sjr
            S[r, j] -= sjr
            S[r, r] -= float(blk.bh @ blk.T2)
        Qbb[r, r] += beta_prec
        S += Qbb
        self.Qbb = Qbb
        try:
            self._S_cho = cho_factor(S)
        except LinAlgError as exc:
            raise FactorizationError(f"fixed-effect Schur complement: {exc}") from None
        self.S = S
        self.S_inv = cho_solve(self._S_cho, np.eye(self.nb))
        self.logdet_S = 2.0 * float(np.sum(np.log(np.diag(self._S_cho[0]))))

        self.logdet_prior = r * self.F_x.logdet + self.nb * math.log(beta_prec)
        self.logdet_post = (
            sum(blk.F.logdet for blk in self.year_block) + self.logdet_S
        )
        self.beta_prec = beta_prec

        # Prior-side constraint covariance A Q_prior^{-1} A^T (beta rows zero).
        sol = self.F_x.solve(np.column_stack([c, hc]))
        xc, xhc = sol.T
        W0 = np.zeros((self.nb, self.nb))
        for j in range(r):
            W0[j, j] = float(c @ xc)
            W0[j, r] = W0[r, j] = float(c @ xhc)
        W0[r, r] = r * float(hc @ xhc)
        self.W0 = W0
        sign0, self.logdet_W0 = np.linalg.slogdet(W0)
        if sign0 <= 0:
            raise FactorizationError("prior constraint covariance not PD")

        # Gram matrix of the constraint rows (for surface-measure densities).
        M = np.zeros((self.nb, self.nb))
        cc, chc, hchc = float(c @ c), float(c @ hc), float(hc @ hc)
        for j in range(r):
            M[j, j] = cc
            M[j, r] = M[r, j] = chc
        M[r, r] = r * hchc
        _, self.logdet_AAt = np.linalg.slogdet(M)

        self._build_posterior_mean()
        self._build_constraint_solves()
        self._apply_constraint_to_mean()
        self._obs_stats = None

    # -- block-arrow solves ------------------------------------------------

    def _solve(self, rhs_w, rhs_beta):
        """Solve the posterior block-arrow system for one right-hand side.

        rhs_w: list of per-year (m,) arrays or None; rhs_beta: (r+1,).
        """
        r = self.r
        u = []
        t = np.zeros(self.nb)
        for j, blk in enumerate(self.year_block):
            if rhs_w[j] is None:
                u.append(None)
                continue
            uj = blk.F.solve(rhs_w[j])
            u.append(uj)
            t[j] += float(blk.b1 @ uj)
            t[r] += float(blk.bh @ uj)
        beta = cho_solve(self._S_cho, np.asarray(rhs_beta, dtype=float) - t)
        w = np.empty((r, self.m))
        for j, blk in enumerate(self.year_block):
            base = u[j] if u[j] is not None else 0.0
            w[j] = base - blk.T1 * beta[j] - blk.T2 * beta[r]
        return w, beta

    def _build_posterior_mean(self):
        tau, r = self.tau_eps, self.r
        model = self.model
        rhs_w = []
        rhs_beta = np.zeros(self.nb)
        for j in range(r):
            yj = model.year_y[j]
            rhs_w.append(tau * (model.year_proj[j].T @ yj))
            rhs_beta[j] = tau * float(yj.sum())
            rhs_beta[r] += tau * float(model.year_h[j] @ yj)
        self.w_post, self.beta_post = self._solve(rhs_w, rhs_beta)

    def _build_constraint_solves(self):
        """Columns of V = Q_post^{-1} A_c^T and W = A_c V via the block pieces."""
        r, m, nb = self.r, self.m, self.nb
        Vw = np.zeros((nb, r, m))
        Vb = np.zeros((nb, nb))
        for col in range(nb):
            t = np.zeros(nb)
            if col < r:
                blk = self.year_block[col]
                t[col] = float(blk.b1 @ blk.tc)
                t[r] = float(blk.bh @ blk.tc)
            else:
                for j, blk in enumerate(self.year_block):
                    t[j] = float(blk.b1 @ blk.thc)
                    t[r] += float(blk.bh @ blk.thc)
            beta_col = -cho_solve(self._S_cho, t)
            for j, blk in enumerate(self.year_block):
                w = -blk.T1 * beta_col[j] - blk.T2 * beta_col[r]
                if col == j:
                    w = w + blk.tc
                elif col == r:
                    w = w + blk.thc
                Vw[col, j] = w
            Vb[col] = beta_col
        self.V_w, self.V_beta = Vw, Vb
        W = np.empty((nb, nb))
        for row in range(nb):
            for col in range(nb):
                if row < r:
                    W[row, col] = float(self.c @ Vw[col, row])
                else:
                    W[row, col] = sum(
                        float(self.hc @ Vw[col, j]) for j in range(r)
                    )
        self.W = 0.5 * (W + W.T)
        sign, self.logdet_W = np.linalg.slogdet(self.W)
        if sign <= 0:
            raise FactorizationError("posterior constraint covariance not PD")
        self.W_inv = np.linalg.inv(self.W)

    def constraint_values(self, w: np.ndarray) -> np.ndarray:
        """Evaluate the constraint rows A_c u for a field block w (r, m)."""
        vals = np.empty(self.nb)
        for j in range(self.r):
            vals[j] = float(self.c @ w[j])
        vals[self.r] = sum(float(self.hc @ w[j]) for j in range(self.r))
        return vals

    def _apply_constraint_to_mean(self):
        resid = self.constraint_values(self.w_post)
        gamma = self.W_inv @ resid
        self.w_star = self.w_post - np.tensordot(gamma, self.V_w, axes=1)
        self.beta_star = self.beta_post - gamma @ self.V_beta

    # -- densities and the marginal likelihood ------------------------------

    def _prior_quad(self, w, beta):
        quad = float(beta @ beta) * self.beta_prec
        for j in range(self.r):
            quad += float(w[j] @ (self.Q_x @ w[j]))
        return quad

    def _post_quad(self, w, beta):
        """(u - mu_post)^T Q_post (u - mu_post) via the block pieces."""
        dw = w - self.w_post
        db = beta - self.beta_post
        quad = float(db @ (self.Qbb @ db))
        for j, blk in enumerate(self.year_block):
            quad += float(dw[j] @ (blk.F.Q @ dw[j]))
            quad += 2.0 * float(dw[j] @ (blk.b1 * db[j] + blk.bh * db[self.r]))
        return quad

    def residual_sumsq(self, w, beta) -> float:
        return self.model.residual_sumsq(w, beta)

    def log_prior_constrained(self, w, beta) -> float:
        N, k = self.model.latent_dim, self.nb
        return (
            -0.5 * (N - k) * LOG_2PI
            + 0.5 * self.logdet_prior
            - 0.5 * self._prior_quad(w, beta)
            + 0.5 * self.logdet_W0
            - 0.5 * self.logdet_AAt
        )

    def log_likelihood(self, w, beta) -> float:
        n = self.n_obs
        return 0.5 * n * (math.log(self.tau_eps) - LOG_2PI) - 0.5 * (
            self.tau_eps * self.residual_sumsq(w, beta)
        )

    def log_posterior_constrained(self, w, beta) -> float:
        N, k = self.model.latent_dim, self.nb
        resid0 = -self.constraint_values(self.w_post)
        quad_w = float(resid0 @ (self.W_inv @ resid0))
        return (
            -0.5 * (N - k) * LOG_2PI
            + 0.5 * self.logdet_post
            - 0.5 * self._post_quad(w, beta)
            + 0.5 * self.logdet_W
            + 0.5 * quad_w
            - 0.5 * self.logdet_AAt
        )

    def marginal_loglik(self, at: np.ndarray | None = None) -> float:
        """log pi(y | theta) through the Gaussian identity at a point.

        The value is independent of the (constraint-satisfying) evaluation
        point; the constrained posterior mean is used by default.
        """
        if at is None:
            w, beta = self.w_star, self.beta_star
        else:
            w, beta = self.model.split_latent(at)
            gap = np.max(np.abs(self.constraint_values(w)))
            if gap > 1e-8:
                raise ValueError(f"evaluation point violates constraints by {gap:g}")
        return (
            self.log_prior_constrained(w, beta)
            + self.log_likelihood(w, beta)
            - self.log_posterior_constrained(w, beta)
        )

    # -- predictive second moments ------------------------------------------

    def _eta_stats_rows(self, j: int, A_rows, h_rows, X_cols):
        """Constrained mean and variance of eta at rows of one year.

        A_rows: (nt, m) sparse basis rows; h_rows: (nt,) covariate values;
        X_cols: (m, nt) solved columns F_bj^{-1} A_rows^T for this block.
        """
        blk = self.year_block[j]
        r = self.r
        mean = (
            A_rows @ self.w_star[j]
            + self.beta_star[j]
            + h_rows * self.beta_star[r]
        )
        g = np.asarray(A_rows.multiply(X_cols.T).sum(axis=1)).ravel()
        p1 = A_rows @ blk.T1 - 1.0
        p2 = A_rows @ blk.T2 - h_rows
        Ssub = self.S_inv[np.ix_([j, r], [j, r])]
        var = (
            g
            + Ssub[0, 0] * p1**2
            + 2.0 * Ssub[0, 1] * p1 * p2
            + Ssub[1, 1] * p2**2
        )
        rows_v = np.empty((A_rows.shape[0], self.nb))
        for col in range(self.nb):
            rows_v[:, col] = (
                A_rows @ self.V_w[col, j]
                + self.V_beta[col, j]
                + h_rows * self.V_beta[col, r]
            )
        var = var - np.einsum("ik,ik->i", rows_v @ self.W_inv, rows_v)
        return mean, np.maximum(var, 0.0)

    def observation_stats(self):
        """Per-year (mean, variance) of eta at the observed station-years."""
        if self._obs_stats is None:
            out = []
            for j, blk in enumerate(self.year_block):
                X = blk.station_solve()
                out.append(
                    self._eta_stats_rows(
                        j, self.model.year_proj[j], self.model.year_h[j], X
                    )
                )
            self._obs_stats = out
        return self._obs_stats

    def fit_summaries(self):
        """Residual sum of squares at the constrained mean and total eta variance."""
        resid_sq = self.residual_sumsq(self.w_star, self.beta_star)
        trace = sum(float(var.sum()) for _, var in self.observation_stats())
        return resid_sq, trace

    def target_stats(self, A_targets, h_targets):
        """Constrained eta mean/variance at arbitrary targets, per year.

        Returns arrays of shape (n_targets, r).
        """
        nt = A_targets.shape[0]
        means = np.empty((nt, self.r))
        variances = np.empty((nt, self.r))
        solved: dict[int, np.ndarray] = {}
        for j, blk in enumerate(self.year_block):
            key = id(blk)
            if key not in solved:
                solved[key] = blk.F.solve(A_targets.T.toarray())
            mean, var = self._eta_stats_rows(j, A_targets, h_targets, solved[key])
            means[:, j] = mean
            variances[:, j] = var
        return means, variances


def log_marginal_posterior(
    model: ReplicateModel,
    theta: HyperParams,
    at: np.ndarray | None = None,
    return_system: bool = False,
):
    """Unnormalized log posterior of the hyperparameters, log pi(theta | y).

    Returns -inf (with no system) when the factorization fails at extreme
    theta, so exploration can exclude the point.
    """
    try:
        system = LatentSystem(model, theta)
    except FactorizationError:
        return (-np.inf, None) if return_system else -np.inf
    lp = system.marginal_loglik(at=at) + log_theta_prior(
        model.prior, model.config.mode, theta
    )
    return (lp, system) if return_system else lp


def build_joint_system(model: ReplicateModel, theta: HyperParams):
    """Materialize the stacked prior precision, design matrix and data.

    Returns (Q_prior, D, y, constraints) over the latent ordering
    (w_1..w_r, beta_1..beta_r, beta_h); used by the reference path and by
    oracle tests against the block-structured solver.
    """
    tau_field, kappa_field = local_params(model.spde, theta)
    Q_x = assemble_precision(model.fem, tau_field, kappa_field)
    beta_prec = 1.0 / model.prior.beta_sd**2
    Q_prior = sparse.block_diag(
        [Q_x] * model.r + [sparse.identity(model.nb_dim()) * beta_prec],
        format="csc",
    )
    rows = []
    for j in range(model.r):
        A_j = model.year_proj[j]
        n_j = A_j.shape[0]
        lead = sparse.csr_matrix((n_j, j * model.m))
        trail = sparse.csr_matrix((n_j, (model.r - 1 - j) * model.m))
        beta_block = np.zeros((n_j, model.r + 1))
        beta_block[:, j] = 1.0
        beta_block[:, model.r] = model.year_h[j]
        rows.append(sparse.hstack([lead, A_j, trail, sparse.csr_matrix(beta_block)]))
    D = sparse.vstack(rows).tocsr()
    y = np.concatenate(model.year_y)
    return Q_prior, D, y, model.constraint_set()


def joint_marginal_loglik(
    Q_prior: sparse.spmatrix,
    D: sparse.spmatrix,
    y: np.ndarray,
    tau_eps: float,
    constraints: ConstraintSet | None = None,
    at: np.ndarray | None = None,
) -> float:
    """Reference marginal log-likelihood through one joint sparse system.

    Generic path used to verify the block-structured computation: the prior
    precision, design matrix and optional constraints enter as explicit
    matrices and everything is computed with single factorizations.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    Q_prior = sparse.csc_matrix(Q_prior)
    D = sparse.csr_matrix(D)
    F_pr = factorize(Q_prior)
    Q_post = (Q_prior + tau_eps * (D.T @ D)).tocsc()
    F_po = factorize(Q_post)
    mu_post = F_po.solve(tau_eps * (D.T @ y))
    zero = np.zeros(Q_prior.shape[0])
    if constraints is None or constraints.k == 0:
        u = mu_post if at is None else np.asarray(at, dtype=float)
        log_pr = gaussian_log_density(F_pr, u, zero)
        log_po = gaussian_log_density(F_po, u, mu_post)
    else:
        u = (
            condition_on_constraints(F_po, mu_post, constraints)
            if at is None
            else np.asarray(at, dtype=float)
        )
        log_pr = constrained_log_density(F_pr, u, zero, constraints)
        log_po = constrained_log_density(F_po, u, mu_post, constraints)
    resid = y - D @ u
    log_lik = 0.5 * n * (math.log(tau_eps) - LOG_2PI) - 0.5 * tau_eps * float(
        resid @ resid
    )
    return log_pr + log_lik - log_po


# -- hyperposterior exploration ---------------------------------------------


@dataclass
class GridPoint:
    """One integration point with its cached conditional summaries."""

    theta: np.ndarray
    log_post: float
    weight: float
    beta_mean: np.ndarray
    beta_cov: np.ndarray
    w_mean: np.ndarray
    tau_eps: float
    system: LatentSystem | None = None

    def ensure_system(self, model: ReplicateModel) -> LatentSystem:
        if self.system is None:
            self.system = LatentSystem(
                model, HyperParams.from_vector(self.theta, model.spde)
            )
        return self.system


@dataclass
class HyperPosterior:
    """Weighted hyperparameter grid with per-point Gaussian conditionals.

    For the composite-design strategy the asymmetric standardized frame
    (columns of `basis` scaled by `scale_pos`/`scale_neg` per direction and
    sign) is retained; hyperparameter marginals integrate the implied
    split-Gaussian instead of relying on the 27 design points alone.
    """

    points: list[GridPoint]
    mode_theta: np.ndarray
    mode_log_post: float
    hessian: np.ndarray
    strategy: str
    theta_names: list[str]
    n_excluded: int = 0
    notes: tuple[str, ...] = ()
    basis: np.ndarray | None = None
    scale_pos: np.ndarray | None = None
    scale_neg: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.points])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.points])

    @property
    def mode_point(self) -> GridPoint:
        return max(self.points, key=lambda p: p.log_post)

    def expected_noise_variance(self) -> float:
        """Posterior expectation of 1 / tau_eps over the grid."""
        return float(sum(p.weight / p.tau_eps for p in self.points))

    def drop_systems(self):
        for p in self.points:
            p.system = None

    def grid_dump(self) -> dict:
        return {
            "theta_names": list(self.theta_names),
            "mode": self.mode_theta.tolist(),
            "strategy": self.strategy,
            "points": self.thetas.tolist(),
            "log_posterior": [p.log_post for p in self.points],
            "weights": self.weights.tolist(),
            "n_excluded": self.n_excluded,
        }


def _beta_constrained_cov(system: LatentSystem) -> np.ndarray:
    Vb = system.V_beta  # (nb columns of V, beta part)
    corr = Vb.T @ system.W_inv @ Vb
    cov = system.S_inv - corr
    return 0.5 * (cov + cov.T)


def _make_point(theta, lp, system) -> GridPoint:
    return GridPoint(
        theta=np.asarray(theta, dtype=float),
        log_post=float(lp),
        weight=0.0,
        beta_mean=system.beta_star.copy(),
        beta_cov=_beta_constrained_cov(system),
        w_mean=system.w_star.copy(),
        tau_eps=system.tau_eps,
        system=system,
    )


def default_start(model: ReplicateModel) -> np.ndarray:
    """Prior-centred starting point for the mode search."""
    prior = model.prior
    log_tau_eps = math.log(prior.noise_shape / prior.noise_rate)
    if model.config.mode == STATIONARY:
        return np.array([prior.mu_tau, prior.mu_kappa, log_tau_eps])
    return np.array(
        [prior.mu_tau, prior.mu_tau_h, prior.mu_kappa, prior.mu_kappa_h, log_tau_eps]
    )


def explore_hyperposterior(
    model: ReplicateModel,
    strategy: str = "auto",
    x0: np.ndarray | None = None,
    drop: float = 5.0,
    step: float = 1.0,
    f0: float = 1.1,
    hess_step: float = 0.05,
    max_points: int = 1000,
    gtol: float = 1e-2,
    maxiter: int = 200,
) -> HyperPosterior:
    """Find the hyperposterior mode and build a weighted integration grid.

    strategy: 'grid' (lattice in eigen-standardized coordinates, points kept
    while the log-posterior drop stays below `drop`), 'ccd'
    (central-composite design), or 'auto' (grid up to 3 hyperparameters,
    ccd above).
    """
    config = model.spde
    dim = config.n_theta + 1
    if strategy == "auto":
        strategy = "grid" if dim <= 3 else "ccd"
    if strategy not in ("grid", "ccd"):
        raise ValueError(f"unknown strategy {strategy!r}")

    notes: list[str] = []
    lp_memo: dict[bytes, float] = {}

    def evaluate(vec):
        theta = HyperParams.from_vector(vec, config)
        lp, system = log_marginal_posterior(model, theta, return_system=True)
        lp_memo[np.asarray(vec, dtype=float).tobytes()] = lp
        return lp, system

    def nlp(vec):
        key = np.asarray(vec, dtype=float).tobytes()
        lp = lp_memo.get(key)
        if lp is None:
            lp = log_marginal_posterior(model, HyperParams.from_vector(vec, config))
            lp_memo[key] = lp
        return _PENALTY if not np.isfinite(lp) else -lp

    start = default_start(model) if x0 is None else np.asarray(x0, dtype=float)
    res = minimize(
        nlp,
        start,
        method="BFGS",
        options={"gtol": gtol, "maxiter": maxiter, "eps": 1e-5},
    )
    if not np.isfinite(res.fun) or res.fun >= _PENALTY:
        raise InferenceError(f"mode search failed: {res.message}\n{res}")
    if not res.success and np.max(np.abs(res.jac)) > 50.0 * gtol:
        raise InferenceError(
            f"mode search did not converge: {res.message} "
            f"(|grad|={np.max(np.abs(res.jac)):.3g})\n{res}"
        )
    mode = res.x

    # Curvature by central finite differences, adapted once if the posterior
    # is much narrower than the initial step.
    def hessian_at(delta):
        H = np.empty((dim, dim))
        f0_val = nlp(mode)
        for i in range(dim):
            ei = np.zeros(dim)
            ei[i] = delta
            H[i, i] = (nlp(mode + ei) + nlp(mode - ei) - 2 * f0_val) / delta**2
        for i in range(dim):
            for j in range(i + 1, dim):
                ei = np.zeros(dim)
                ej = np.zeros(dim)
                ei[i] = delta
                ej[j] = delta
                H[i, j] = H[j, i] = (
                    nlp(mode + ei + ej)
                    - nlp(mode + ei - ej)
                    - nlp(mode - ei + ej)
                    + nlp(mode - ei - ej)
                ) / (4 * delta**2)
        return H

    H = hessian_at(hess_step)
    lam, vec = eigh(0.5 * (H + H.T))
    if np.any(lam <= 0):
        notes.append("hessian clipped to positive definite")
        lam = np.maximum(lam, max(1e-8, 1e-8 * lam.max()))
    sd = 1.0 / np.sqrt(lam)
    if sd.min() < hess_step / 2:
        H = hessian_at(max(1e-4, 0.4 * sd.min()))
        lam, vec = eigh(0.5 * (H + H.T))
        if np.any(lam <= 0):
            notes.append("hessian clipped to positive definite (refined)")
            lam = np.maximum(lam, max(1e-8, 1e-8 * lam.max()))
    base = vec @ np.diag(1.0 / np.sqrt(lam))  # columns span one whitened unit

    nlp_mode = nlp(mode)
    scale_pos = np.ones(dim)
    scale_neg = np.ones(dim)
    if strategy == "ccd":
        # Correct each principal direction for posterior asymmetry: rescale
        # so that a 2-unit step produces the Gaussian log-density drop of 2.
        z0, target = 2.0, 2.0
        for i in range(dim):
            for sign, store in ((1.0, scale_pos), (-1.0, scale_neg)):
                f = 1.0
                for _ in range(3):
                    drop = nlp(mode + sign * f * z0 * base[:, i]) - nlp_mode
                    if not np.isfinite(drop) or drop >= _PENALTY / 2:
                        f *= 0.5
                        continue
                    if drop <= 0:
                        f *= 2.0
                        continue
                    f = float(np.clip(f * math.sqrt(target / drop), 0.2, 10.0))
                store[i] = f

    def theta_of(z):
        z = np.asarray(z, dtype=float)
        stretched = np.where(z > 0, scale_pos, scale_neg) * z
        return mode + base @ stretched

    lp_mode, system_mode = evaluate(mode)
    if system_mode is None:
        raise InferenceError("factorization failed at the posterior mode")

    points: list[GridPoint] = []
    raw_weights: list[float] = []
    n_excluded = 0

    if strategy == "grid":
        origin = (0,) * dim
        evaluated = {origin: (lp_mode, system_mode)}
        kept = {origin}
        frontier = [origin]
        while frontier:
            z = frontier.pop()
            for axis in range(dim):
                for direction in (-1, 1):
                    zn = list(z)
                    zn[axis] += direction
                    zn = tuple(zn)
                    if zn in evaluated:
                        continue
                    if len(evaluated) >= max_points:
                        notes.append(f"grid capped at {max_points} evaluations")
                        frontier.clear()
                        break
                    lp, system = evaluate(theta_of(step * np.array(zn)))
                    evaluated[zn] = (lp, system)
                    if not np.isfinite(lp):
                        n_excluded += 1
                        continue
                    if lp_mode - lp < drop:
                        kept.add(zn)
                        frontier.append(zn)
                else:
                    continue
                break
        for z in sorted(kept):
            lp, system = evaluated[z]
            points.append(_make_point(theta_of(step * np.array(z)), lp, system))
            raw_weights.append(math.exp(lp - lp_mode))
    else:
        radius = f0 * math.sqrt(dim)
        designs = [np.zeros(dim)]
        # Fractional factorial 2^(dim-1): last coordinate is the product of
        # the others; all design points are scaled onto the radius sphere.
        for bits in range(2 ** (dim - 1)):
            signs = np.array(
                [1.0 if bits & (1 << b) else -1.0 for b in range(dim - 1)]
            )
            z = np.append(signs, np.prod(signs)) * (radius / math.sqrt(dim))
            designs.append(z)
        for axis in range(dim):
            for direction in (-1.0, 1.0):
                z = np.zeros(dim)
                z[axis] = direction * radius
                designs.append(z)
        n_ring = len(designs) - 1
        delta_center = n_ring * math.exp(-0.5 * radius**2) * (f0**2 - 1.0)
        points.append(_make_point(mode, lp_mode, system_mode))
        raw_weights.append(delta_center)
        for z in designs[1:]:
            lp, system = evaluate(theta_of(z))
            if not np.isfinite(lp):
                n_excluded += 1
                continue
            points.append(_make_point(theta_of(z), lp, system))
            raw_weights.append(math.exp(lp - lp_mode))

    total = float(np.sum(raw_weights))
    for p, rw in zip(points, raw_weights):
        p.weight = rw / total

    return HyperPosterior(
        points=points,
        mode_theta=mode,
        mode_log_post=float(lp_mode),
        hessian=H,
        strategy=strategy,
        theta_names=theta_names(model),
        n_excluded=n_excluded,
        notes=tuple(notes),
        basis=base,
        scale_pos=scale_pos,
        scale_neg=scale_neg,
    )


# -- posterior marginals ------------------------------------------------------


@dataclass
class ParamSummary:
    """Posterior marginal summary for one scalar parameter."""

    name: str
    mean: float
    sd: float
    quantiles: dict[float, float]
    density: tuple[np.ndarray, np.ndarray] | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mean": self.mean,
            "sd": self.sd,
            "quantiles": {f"{q:g}": v for q, v in self.quantiles.items()},
        }

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        lo = round((1.0 - level) / 2.0, 6)
        return self.quantiles[lo], self.quantiles[round(1.0 - lo, 6)]


def _skewnorm_from_moments(mean, sd, skew):
    """Moment-matched skew-normal (a, loc, scale); Gaussian when skew ~ 0."""
    g = float(np.clip(skew, -0.9, 0.9))
    if abs(g) < 1e-12 or sd == 0:
        return 0.0, mean, sd
    b = math.sqrt(2.0 / math.pi)
    r = (2.0 * abs(g) / (4.0 - math.pi)) ** (1.0 / 3.0)
    delta = math.copysign(r / (b * math.sqrt(1.0 + r**2)), g)
    delta = max(min(delta, 0.999), -0.999)
    a = delta / math.sqrt(1.0 - delta**2)
    omega = sd / math.sqrt(1.0 - 2.0 * delta**2 / math.pi)
    xi = mean - omega * delta * b
    return a, xi, omega


def _split_normal_pdf(xs, sd_neg, sd_pos):
    """Two-piece Gaussian density, continuous at zero."""
    norm_const = math.sqrt(2.0 / math.pi) / (sd_neg + sd_pos)
    sd = np.where(xs < 0, sd_neg, sd_pos)
    return norm_const * np.exp(-0.5 * (xs / sd) ** 2)


def _split_gaussian_marginal(hp: HyperPosterior, comp: int, with_density=True):
    """Marginal of one theta component under the split-Gaussian approximation.

    In the asymmetric standardized frame the posterior is approximated by
    independent two-piece Gaussians per principal direction; the component
    marginal is their linear-combination law, computed by deterministic
    convolution on a fine grid.
    """
    load = hp.basis[comp]  # theta_comp = mode + sum_j load[j] * zeta_j
    dim = load.size
    halfwidth = 0.0
    for j in range(dim):
        halfwidth += abs(load[j]) * 8.0 * max(hp.scale_pos[j], hp.scale_neg[j])
    halfwidth = max(halfwidth, 1e-8)
    n = 2048
    xs = np.linspace(-halfwidth, halfwidth, n + 1)
    dx = xs[1] - xs[0]
    pdf = None
    for j in range(dim):
        c = load[j]
        if abs(c) * max(hp.scale_pos[j], hp.scale_neg[j]) < 1e-12 * halfwidth:
            continue
        if c >= 0:
            sd_neg, sd_pos = c * hp.scale_neg[j], c * hp.scale_pos[j]
        else:
            sd_neg, sd_pos = -c * hp.scale_pos[j], -c * hp.scale_neg[j]
        comp_pdf = _split_normal_pdf(xs, sd_neg, sd_pos)
        if pdf is None:
            pdf = comp_pdf
        else:
            pdf = np.convolve(pdf, comp_pdf, mode="same") * dx
    if pdf is None:
        pdf = np.zeros_like(xs)
        pdf[n // 2] = 1.0 / dx
    total = pdf.sum() * dx
    pdf /= total
    grid = hp.mode_theta[comp] + xs
    cdf = np.cumsum(pdf) * dx
    mean = float(np.sum(grid * pdf) * dx)
    sd = math.sqrt(max(float(np.sum((grid - mean) ** 2 * pdf) * dx), 0.0))
    quantiles = {
        q: float(np.interp(q, cdf, grid)) for q in QUANTILE_LEVELS
    }
    density = (grid, pdf) if with_density else None
    return mean, sd, quantiles, density


def _weighted_scalar_summary(name, values, weights, with_density=True):
    values = np.asarray(values, dtype=float)
    mean = float(weights @ values)
    var = float(weights @ (values - mean) ** 2)
    sd = math.sqrt(max(var, 0.0))
    if sd == 0.0:
        quantiles = {q: mean for q in QUANTILE_LEVELS}
        return ParamSummary(name, mean, sd, quantiles)
    skew = float(weights @ ((values - mean) / sd) ** 3)
    a, loc, scl = _skewnorm_from_moments(mean, sd, skew)
    quantiles = {
        q: float(skewnorm.ppf(q, a, loc=loc, scale=scl)) for q in QUANTILE_LEVELS
    }
    density = None
    if with_density:
        xs = np.linspace(mean - 4 * sd, mean + 4 * sd, 161)
        density = (xs, skewnorm.pdf(xs, a, loc=loc, scale=scl))
    return ParamSummary(name, mean, sd, quantiles, density)


def _mixture_gaussian_summary(name, means, sds, weights, with_density=True):
    """Summary of a finite Gaussian mixture (exact mean/var, CDF quantiles)."""
    means = np.asarray(means, dtype=float)
    sds = np.asarray(sds, dtype=float)
    mean = float(weights @ means)
    var = float(weights @ (sds**2 + means**2)) - mean**2
    sd = math.sqrt(max(var, 0.0))

    def cdf(x):
        z = (x - means) / np.where(sds > 0, sds, 1e-300)
        from scipy.special import ndtr

        return float(weights @ ndtr(z))

    quantiles = {}
    lo = float(np.min(means - 10 * np.maximum(sds, 1e-12)))
    hi = float(np.max(means + 10 * np.maximum(sds, 1e-12)))
    from scipy.optimize import brentq

    for q in QUANTILE_LEVELS:
        quantiles[q] = (
            mean if sd == 0 else float(brentq(lambda x: cdf(x) - q, lo, hi))
        )
    density = None
    if with_density and sd > 0:
        xs = np.linspace(mean - 4 * sd, mean + 4 * sd, 161)
        pdf = np.zeros_like(xs)
        for mu, s, w in zip(means, sds, weights):
            if s > 0:
                pdf += w * np.exp(-0.5 * ((xs - mu) / s) ** 2) / (
                    s * math.sqrt(2 * math.pi)
                )
        density = (xs, pdf)
    return ParamSummary(name, mean, sd, quantiles, density)


def posterior_marginals(
    hp: HyperPosterior, model: ReplicateModel, with_density: bool = False
) -> dict[str, ParamSummary]:
    """Marginal summaries for the fixed effects, noise precision, and theta.

    Fixed-effect marginals are exact Gaussian mixtures over the grid; theta
    marginals use moment-matched (skew-adjusted) fits to the weighted grid;
    the noise precision is summarized by monotone transformation of its
    log-scale marginal.
    """
    weights = hp.weights
    r = model.r
    out: dict[str, ParamSummary] = {}

    beta_means = np.array([p.beta_mean for p in hp.points])  # (K, r+1)
    beta_sds = np.array(
        [np.sqrt(np.clip(np.diag(p.beta_cov), 0.0, None)) for p in hp.points]
    )
    for j, year in enumerate(model.obs.years):
        out[f"beta_{year}"] = _mixture_gaussian_summary(
            f"beta_{year}", beta_means[:, j], beta_sds[:, j], weights, with_density
        )
    out["beta_h"] = _mixture_gaussian_summary(
        "beta_h", beta_means[:, r], beta_sds[:, r], weights, with_density
    )

    # Pooled intercept: the average of the year intercepts.
    pool = np.zeros(r + 1)
    pool[:r] = 1.0 / r
    pooled_mean = beta_means[:, :r].mean(axis=1)
    pooled_sd = np.array(
        [math.sqrt(max(float(pool @ p.beta_cov @ pool), 0.0)) for p in hp.points]
    )
    out["beta_0"] = _mixture_gaussian_summary(
        "beta_0", pooled_mean, pooled_sd, weights, with_density
    )

    thetas = hp.thetas
    use_split = hp.strategy == "ccd" and hp.basis is not None

    def theta_summary(name, comp):
        if use_split:
            mean, sd, quantiles, density = _split_gaussian_marginal(
                hp, comp, with_density
            )
            return ParamSummary(name, mean, sd, quantiles, density)
        return _weighted_scalar_summary(name, thetas[:, comp], weights, with_density)

    for i, name in enumerate(hp.theta_names):
        if name == "log_tau_eps":
            continue
        out[name] = theta_summary(name, i)

    log_tau = theta_summary("log_tau_eps", len(hp.theta_names) - 1)
    tau_vals = np.exp(thetas[:, -1])
    tau_mean = float(weights @ tau_vals)
    tau_sd = math.sqrt(max(float(weights @ tau_vals**2) - tau_mean**2, 0.0))
    out["tau_eps"] = ParamSummary(
        "tau_eps",
        tau_mean,
        tau_sd,
        {q: math.exp(v) for q, v in log_tau.quantiles.items()},
    )
    return out


# -- prediction ---------------------------------------------------------------


@dataclass
class PredictionResult:
    """Mixture predictive moments of the linear predictor per target and year.

    eta_sd is the posterior sd of the linear predictor; y_sd additionally
    includes the posterior expectation of the observation noise variance.
    """

    eta_mean: np.ndarray
    eta_sd: np.ndarray
    y_sd: np.ndarray
    years: tuple[str, ...]


def predict(
    hp: HyperPosterior,
    model: ReplicateModel,
    targets: np.ndarray | str = "nodes",
) -> PredictionResult:
    """Predictive mean/sd of eta at targets ('nodes' or locations) per year."""
    if isinstance(targets, str):
        if targets != "nodes":
            raise ValueError("targets must be 'nodes' or an array of locations")
        A_t = sparse.identity(model.m, format="csr")
        h_t = model.covariate.values
    else:
        from .mesh import project

        proj = project(model.mesh, np.asarray(targets, dtype=float))
        if not proj.inside.all():
            raise ValueError(
                f"targets outside the mesh: indices {proj.outside_records()}"
            )
        A_t = proj.A
        h_t = proj.interpolate(model.covariate.values)

    nt = A_t.shape[0]
    mean_acc = np.zeros((nt, model.r))
    m2_acc = np.zeros((nt, model.r))
    for p in hp.points:
        system = p.ensure_system(model)
        means, variances = system.target_stats(A_t, h_t)
        mean_acc += p.weight * means
        m2_acc += p.weight * (variances + means**2)
    eta_var = np.maximum(m2_acc - mean_acc**2, 0.0)
    noise_var = hp.expected_noise_variance()
    return PredictionResult(
        eta_mean=mean_acc,
        eta_sd=np.sqrt(eta_var),
        y_sd=np.sqrt(eta_var + noise_var),
        years=model.obs.years,
    )
