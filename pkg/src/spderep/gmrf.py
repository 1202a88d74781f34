"""Sparse SPD factorization, Gaussian sampling, and linear-constraint tools.

The factorization wraps SuperLU in symmetric mode with diagonal pivoting
disabled, which for a symmetric positive-definite matrix yields an exact
sparse LDL^T (equivalently Cholesky) factorization after a fill-reducing
symmetric permutation. Everything downstream (sampling, log-densities,
conditioning by kriging) is built on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu, spsolve_triangular

LOG_2PI = math.log(2.0 * math.pi)


class FactorizationError(RuntimeError):
    """Raised when a matrix fails the SPD factorization."""


@dataclass(frozen=True)
class ConstraintSet:
    """Hard linear constraints A x = e with linearly independent rows."""

    A: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        e = np.atleast_1d(np.asarray(self.e, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "e", e)
        if A.shape[0] != e.size:
            raise ValueError("constraint rows and right-hand side disagree")
        if A.shape[0]:
            sv = np.linalg.svd(A, compute_uv=False)
            if sv[-1] <= sv[0] * 1e-12:
                raise ValueError("constraint rows are rank deficient")

    @property
    def k(self) -> int:
        return self.A.shape[0]


class FactoredPrecision:
    """Sparse Cholesky-equivalent factorization of an SPD precision matrix.

    Holds the fill-reducing permutation, the lower-triangular factor and the
    log-determinant; immutable after construction and safe to share across
    concurrent readers.
    """

    def __init__(self, Q: sparse.csc_matrix, lu, perm: np.ndarray, logdet: float):
        self.Q = Q
        self._lu = lu
        self.perm = perm
        self.logdet = logdet
        self.n = Q.shape[0]
        self._chol = None

    @property
    def chol_lower(self) -> sparse.csc_matrix:
        """Lower factor L with Q[perm-permuted] = L L^T (built on demand)."""
        if self._chol is None:
            d = self._lu.U.diagonal()
            self._chol = (self._lu.L @ sparse.diags(np.sqrt(d))).tocsc()
        return self._chol

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve Q x = b for vector or matrix right-hand sides."""
        return self._lu.solve(np.asarray(b, dtype=float))

    def half_solve_t(self, z: np.ndarray) -> np.ndarray:
        """Map iid standard normals z to a draw with covariance Q^{-1}.

        Solves L^T w = z in the permuted frame and undoes the permutation.
        """
        w = spsolve_triangular(
            self.chol_lower.T.tocsr(), np.asarray(z, dtype=float), lower=False
        )
        return w[self.perm]


def factorize(Q: sparse.spmatrix, check_symmetric: bool = True) -> FactoredPrecision:
    """Sparse SPD factorization after a fill-reducing permutation.

    Deterministic for fixed input. Raises FactorizationError naming the
    first non-positive pivot if Q is not numerically positive definite.
    check_symmetric=False skips the symmetry test for matrices that are
    symmetric by construction.
    """
    Q = sparse.csc_matrix(Q)
    if Q.shape[0] != Q.shape[1]:
        raise ValueError("Q must be square")
    if not np.all(np.isfinite(Q.data)):
        raise FactorizationError("matrix has non-finite entries")
    if check_symmetric:
        asym = abs(Q - Q.T).max() if Q.nnz else 0.0
        scale = abs(Q).max() if Q.nnz else 1.0
        if asym > 1e-10 * max(scale, 1.0):
            raise ValueError(f"Q is not symmetric (max asymmetry {asym:g})")
    try:
        lu = splu(
            Q,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:  # singular matrix
        raise FactorizationError(f"factorization failed: {exc}") from None
    d = lu.U.diagonal()
    bad = np.flatnonzero(d <= 0.0)
    if bad.size:
        i = int(bad[0])
        orig = int(np.argsort(lu.perm_c)[i])
        raise FactorizationError(
            f"non-positive pivot {d[i]:g} at factor position {i} "
            f"(original index {orig})"
        )
    logdet = float(np.sum(np.log(d)))
    return FactoredPrecision(Q=Q, lu=lu, perm=lu.perm_c, logdet=logdet)


def sample(
    f: FactoredPrecision, mean: np.ndarray, rng_seed, n_samples: int | None = None
) -> np.ndarray:
    """Draw from N(mean, Q^{-1}); deterministic given the seed.

    Returns a vector for the default single draw, or an (n, n_samples)
    array when n_samples is given.
    """
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (f.n,):
        raise ValueError("mean has wrong length")
    rng = np.random.default_rng(rng_seed)
    cols = 1 if n_samples is None else int(n_samples)
    z = rng.standard_normal((f.n, cols))
    x = f.half_solve_t(z) + mean[:, None]
    return x[:, 0] if n_samples is None else x


def condition_on_constraints(
    f: FactoredPrecision, x: np.ndarray, constraints: ConstraintSet
) -> np.ndarray:
    """Project a sample or mean onto {A x = e} by conditioning by kriging.

    x* = x - Q^{-1} A^T (A Q^{-1} A^T)^{-1} (A x - e); applied to a sample
    from N(mu, Q^{-1}) this yields an exact draw from the constrained field.
    """
    x = np.asarray(x, dtype=float)
    if constraints.k == 0:
        return x.copy()
    V = f.solve(constraints.A.T)
    W = constraints.A @ V
    resid = constraints.A @ x - constraints.e
    return x - V @ np.linalg.solve(W, resid)


def gaussian_log_density(f: FactoredPrecision, x: np.ndarray, mean: np.ndarray) -> float:
    """Log-density of N(mean, Q^{-1}) at x."""
    r = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    quad = float(r @ (f.Q @ r))
    return 0.5 * (f.logdet - f.n * LOG_2PI - quad)


def constrained_log_density(
    f: FactoredPrecision,
    x: np.ndarray,
    mean: np.ndarray,
    constraints: ConstraintSet,
) -> float:
    """Log-density of N(mean, Q^{-1}) restricted to the plane {A x = e}.

    The density is taken with respect to the surface (Hausdorff) measure on
    the constraint plane, so it integrates to one over the plane:

        log pi_c(x) = log pi(x) - log pi_{Ax}(e) - 0.5 log det(A A^T),

    with pi_{Ax} the Gaussian law of A x. The A A^T term makes the value
    independent of row scaling of A. Requires A x = e within 1e-8.
    """
    if constraints.k == 0:
        return gaussian_log_density(f, x, mean)
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    gap = np.max(np.abs(constraints.A @ x - constraints.e))
    if gap > 1e-8:
        raise ValueError(f"x violates constraints by {gap:g} (tolerance 1e-8)")
    V = f.solve(constraints.A.T)
    W = constraints.A @ V
    sign, logdet_W = np.linalg.slogdet(W)
    if sign <= 0:
        raise FactorizationError("A Q^{-1} A^T is not positive definite")
    resid = constraints.e - constraints.A @ mean
    quad = float(resid @ np.linalg.solve(W, resid))
    _, logdet_AAt = np.linalg.slogdet(constraints.A @ constraints.A.T)
    k = constraints.k
    return (
        gaussian_log_density(f, x, mean)
        + 0.5 * (k * LOG_2PI + logdet_W + quad)
        - 0.5 * logdet_AAt
    )


def selected_variances(
    f: FactoredPrecision,
    indices,
    constraints: ConstraintSet | None = None,
) -> np.ndarray:
    """Diagonal entries of the (optionally constrained) covariance Q^{-1}.

    Uses one column solve per requested index; with constraints the kriging
    variance reduction is subtracted.
    """
    indices = np.atleast_1d(np.asarray(indices, dtype=int))
    rhs = np.zeros((f.n, indices.size))
    rhs[indices, np.arange(indices.size)] = 1.0
    cols = f.solve(rhs)
    var = cols[indices, np.arange(indices.size)].copy()
    if constraints is not None and constraints.k:
        V = f.solve(constraints.A.T)
        W = constraints.A @ V
        U = V[indices]  # rows of Q^{-1} A^T at the requested indices
        var -= np.einsum("ik,ik->i", U @ np.linalg.inv(W), U)
    return var
