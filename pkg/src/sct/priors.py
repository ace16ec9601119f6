"""Spatial regularization: kernels, whitened inducing-point expansions,
the random-walk prior on spline coefficients, and hyperparameter links.

Parameter fields over L locations are never given dense L x L priors.
Instead, whitened coefficients u ~ N(0, I) at M maximin-prefix inducing
locations are expanded through the kernel, costing O(LMD + M^3). For
spline coefficient matrices the expansion is post-multiplied by the
transpose of the lower-ones Cholesky factor W of the random-walk
covariance S[r,c] = min(r+1, c+1), giving vec(beta) the separable
covariance S kron K implicitly. Amplitudes factor out of all Cholesky
work, so conditioning is always relative to a unit-diagonal correlation
matrix.

Hyperparameter links (softplus) live in ``links``; their priors are flat
on the unconstrained scale, which induces an improper prior on the
constrained value. That prior is documented, never evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from ._jax import jax, jnp
from .errors import NumericalError, ValidationError
from .geometry import LocationSet, MaximinOrdering, cross_distances
from .marginals import LOG_2PI

KERNEL_KINDS = ("matern-3/2", "matern-5/2", "squared-exponential")

# escalation ladder for Cholesky of unit-diagonal correlation matrices
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

# the jax path cannot branch on factorization failure, so it always adds
# a mid-ladder jitter
JITTER_FIXED = 1e-8


def correlation(kind: str, d, ell, xp=np):
    """Correlation at distance d for the named kernel; rho(0) = 1."""
    t = xp.asarray(d) / ell
    if kind == "matern-3/2":
        s = np.sqrt(3.0) * t
        return (1.0 + s) * xp.exp(-s)
    if kind == "matern-5/2":
        s = np.sqrt(5.0) * t
        return (1.0 + s + s * s / 3.0) * xp.exp(-s)
    if kind == "squared-exponential":
        return xp.exp(-0.5 * t * t)
    raise ValidationError(f"unknown kernel kind {kind!r}; expected {KERNEL_KINDS}")


@dataclass(frozen=True)
class Kernel:
    """Stationary kernel with amplitude tau (variance tau^2) and length scale."""

    kind: str
    tau: float
    ell: float

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if not (self.tau > 0 and self.ell > 0):
            raise ValidationError("kernel needs tau > 0 and ell > 0")

    def gram(self, d):
        return self.tau**2 * correlation(self.kind, d, self.ell)


def chol_corr(corr: np.ndarray, context: str = "") -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of a correlation matrix, escalating jitter.

    Returns (factor, jitter used). Jitter is absolute, which is relative
    to the amplitude since the diagonal is 1. Exhausting the ladder is a
    hard error naming the caller's context.
    """
    corr = np.asarray(corr)
    eye = np.eye(len(corr))
    for jit in JITTERS:
        try:
            return np.linalg.cholesky(corr + jit * eye), jit
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"correlation matrix not factorizable with jitter up to {JITTERS[-1]:g}"
        + (f" ({context})" if context else "")
    )


def brownian_S(D: int) -> np.ndarray:
    """Random-walk covariance S[r,c] = min(r+1, c+1), D x D."""
    idx = np.arange(1, D + 1)
    return np.minimum.outer(idx, idx).astype(float)


def brownian_W(D: int) -> np.ndarray:
    """Lower Cholesky factor of brownian_S: lower triangle of ones."""
    return np.tril(np.ones((D, D)))


@dataclass(frozen=True)
class InducingSet:
    """M maximin-prefix locations plus cached distance tables.

    d_uu is M x M among inducing locations, d_fu is L x M from every
    location to each inducing one. Distances are metric units, fixed
    once; only kernel hyperparameters vary during estimation.
    """

    indices: np.ndarray
    d_uu: np.ndarray = field(repr=False, compare=False)
    d_fu: np.ndarray = field(repr=False, compare=False)

    @property
    def M(self) -> int:
        return len(self.indices)


def build_inducing(
    locs: LocationSet, ordering: MaximinOrdering, M: int
) -> InducingSet:
    """First min(M, L) maximin-ordered locations as the inducing set."""
    if M < 1:
        raise ValidationError("need M >= 1 inducing locations")
    sel = ordering.order[: min(M, len(locs))]
    every = np.arange(len(locs))
    return InducingSet(
        indices=sel,
        d_uu=cross_distances(locs, sel, sel),
        d_fu=cross_distances(locs, every, sel),
    )


def _solve_upper(upper, b, xp):
    if xp is jnp:
        return jax.scipy.linalg.solve_triangular(upper, b, lower=False)
    return sla.solve_triangular(upper, b, lower=False)


def expand_whitened(u, kind, tau2, ell, inducing: InducingSet, xp=np,
                    jitter: float | None = None):
    """Low-rank field tau * C_fu C_uu^{-T/2} u from whitened coefficients.

    u is (M,) or (M, D); returns (L,) or (L, D). Under u ~ N(0, I) the
    implied covariance is tau^2 C_fu C_uu^{-1} C_uf, which equals the
    dense kernel Gram exactly when the inducing set is all of the
    locations. numpy path uses the jitter ladder; jax path adds the
    fixed jitter (no data-dependent branching under tracing).
    """
    C_uu = correlation(kind, inducing.d_uu, ell, xp=xp)
    C_fu = correlation(kind, inducing.d_fu, ell, xp=xp)
    if xp is jnp:
        jit = JITTER_FIXED if jitter is None else jitter
        Lc = jnp.linalg.cholesky(C_uu + jit * jnp.eye(inducing.M))
    else:
        if jitter is None:
            Lc, _ = chol_corr(C_uu, context=f"kind={kind}, ell={ell:.6g}")
        else:
            Lc = np.linalg.cholesky(C_uu + jitter * np.eye(inducing.M))
    X = _solve_upper(Lc.T, xp.asarray(u), xp)
    return xp.sqrt(xp.asarray(tau2)) * (C_fu @ X)


def expand_zeta(u, kernel: Kernel, inducing: InducingSet, xp=np):
    """Spatial field for one marginal parameter from whitened u (M,)."""
    return expand_whitened(u, kernel.kind, kernel.tau**2, kernel.ell, inducing, xp=xp)


def expand_beta(U, kernel: Kernel, inducing: InducingSet, xp=np):
    """Spline coefficient field (L, D) from whitened U (M, D).

    The cumulative sum along the coefficient axis right-multiplies by
    W^T, turning independent columns into random-walk increments.
    """
    return xp.cumsum(
        expand_whitened(U, kernel.kind, kernel.tau**2, kernel.ell, inducing, xp=xp),
        axis=-1,
    )


def whitened_logprior(u, xp=np):
    """Standard normal log density of all whitened coefficients."""
    u = xp.asarray(u)
    return -0.5 * xp.sum(u * u) - 0.5 * u.size * LOG_2PI


def onion_logprior_dense(beta_i, tau2) -> float:
    """Reference (non-spatial) random-walk log prior on one coefficient
    vector: increments beta_d - beta_{d-1} ~ N(0, tau^2), started at 0."""
    if tau2 <= 0:
        raise ValidationError("tau2 must be positive")
    beta_i = np.asarray(beta_i, dtype=float)
    inc = np.diff(np.concatenate(([0.0], beta_i)))
    D = beta_i.size
    return float(-0.5 * D * (LOG_2PI + np.log(tau2)) - 0.5 * np.sum(inc * inc) / tau2)
