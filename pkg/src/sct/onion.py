"""Onion splines: strictly increasing cubic B-splines, identity outside [a, b].

The transformation is parameterized by D unconstrained reals beta. Basis
coefficients are built so that (i) the curve passes through the knots
k_1 and k_m with unit slope near the boundary, (ii) coefficient
increments are exp(gamma) > 0, forcing strict monotonicity, and (iii)
the increments are normalized to traverse [a, b] on average, which glues
the spline C2-continuously onto the identity outside [a, b]. Constant
beta collapses the whole transformation to the identity.

Every evaluator takes an ``xp`` array namespace (numpy by default) so
the exact same code runs under jax for gradient-based estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class KnotGrid:
    """Equidistant knot layout for the flexible region [a, b].

    D free parameters imply m = D + 5 and J = D + 7 cubic basis
    functions over knots k_{-2} < ... < k_{m+3} with spacing
    k = (b - a)/(m - 3), pinned so k_2 = a and k_{m-1} = b exactly.
    ``knots[q + 2]`` holds k_q.
    """

    a: float
    b: float
    D: int
    m: int = field(init=False)
    J: int = field(init=False)
    k: float = field(init=False)
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)) or self.a >= self.b:
            raise ValidationError(f"need finite a < b, got a={self.a}, b={self.b}")
        if self.D < 1:
            raise ValidationError(f"need D >= 1, got D={self.D}")
        m = self.D + 5
        k = (self.b - self.a) / (m - 3)
        inner = np.linspace(self.a, self.b, m - 2)  # k_2 .. k_{m-1}, endpoints exact
        left = self.a - k * np.arange(4, 0, -1)  # k_{-2} .. k_1
        right = self.b + k * np.arange(1, 5)  # k_m .. k_{m+3}
        knots = np.concatenate((left, inner, right))
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "J", self.D + 7)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "knots", knots)

    @property
    def k1(self) -> float:
        """Left end of the spline branch (one knot left of a)."""
        return float(self.knots[3])

    @property
    def km(self) -> float:
        """Right end of the spline branch (one knot right of b)."""
        return float(self.knots[self.m + 2])


def build_knots(a: float, b: float, D: int) -> KnotGrid:
    return KnotGrid(a=float(a), b=float(b), D=int(D))


def gamma_from_beta(beta, grid: KnotGrid, xp=np):
    """Full gamma vector (..., J) from unconstrained beta (..., D).

    gamma_1 = k_0 matches level and slope of the identity at the left
    boundary; the three increments on each end are fixed at log k (unit
    slope); the D free increments are beta shifted by a log-sum-exp
    normalizer so that sum(exp(gamma_free)) = (m - 5) k, i.e. the spline
    climbs exactly b - a across the D + 1 central segments on average.
    Max-subtraction keeps the normalizer finite for |beta| up to ~700.
    """
    beta = xp.asarray(beta)
    if beta.shape[-1] != grid.D:
        raise ValidationError(f"beta last axis {beta.shape[-1]} != D={grid.D}")
    if xp is np and not np.all(np.isfinite(beta)):
        raise ValidationError("beta contains non-finite values")
    logk = np.log(grid.k)
    bmax = xp.max(beta, axis=-1, keepdims=True)
    # log( sum exp(beta) / ((m-5) k) ), stable form
    norm = xp.log(xp.sum(xp.exp(beta - bmax), axis=-1, keepdims=True)) - np.log(
        (grid.m - 5) * grid.k
    )
    free = (beta - bmax) - norm
    batch = beta.shape[:-1]
    k0 = grid.knots[2]
    fixed3 = xp.full(batch + (3,), logk, dtype=beta.dtype)
    return xp.concatenate(
        (xp.full(batch + (1,), k0, dtype=beta.dtype), fixed3, free, fixed3), axis=-1
    )


def coefficients_from_gamma(gamma, xp=np):
    """Cumulative basis coefficients c_j = gamma_1 + sum_{l<=j} exp(gamma_l)."""
    gamma = xp.asarray(gamma)
    incr = xp.cumsum(xp.exp(gamma[..., 1:]), axis=-1)
    return xp.concatenate((gamma[..., :1], gamma[..., :1] + incr), axis=-1)


def bspline_basis(x, knots, degree: int = 3, xp=np):
    """All B-spline basis values at x via the Cox-de Boor recursion.

    Returns shape x.shape + (len(knots) - 1 - degree,). Intervals are
    half-open [t_i, t_{i+1}); callers restrict x to the region where the
    basis forms a partition of unity.
    """
    x = xp.asarray(x)
    t = xp.asarray(knots)
    xe = x[..., None]
    N = xp.where((xe >= t[:-1]) & (xe < t[1:]), 1.0, 0.0)
    for d in range(1, degree + 1):
        left = (xe - t[: -(d + 1)]) / (t[d:-1] - t[: -(d + 1)]) * N[..., :-1]
        right = (t[d + 1 :] - xe) / (t[d + 1 :] - t[1:-d]) * N[..., 1:]
        N = left + right
    return N


def spline_value(x, gamma, grid: KnotGrid, xp=np):
    """Raw spline branch sum_j B_j(x) c_j, valid on [k_1, k_m] only."""
    c = coefficients_from_gamma(gamma, xp=xp)
    basis = bspline_basis(x, grid.knots, degree=3, xp=xp)
    return xp.sum(basis * c, axis=-1)


def spline_slope(x, gamma, grid: KnotGrid, xp=np):
    """Raw spline-branch slope: quadratic B-spline with weights exp(gamma)/k."""
    gamma = xp.asarray(gamma)
    basis2 = bspline_basis(x, grid.knots, degree=2, xp=xp)
    w = xp.exp(gamma[..., 1:]) / grid.k
    # quadratic elements 1..J-1 carry the curve derivative on [k_1, k_m]
    return xp.sum(basis2[..., 1 : grid.J] * w, axis=-1)


def h_forward(x, gamma, grid: KnotGrid, xp=np):
    """Spline transformation of x; identity outside (a, b).

    The raw spline already equals the identity on [k_1, a] and [b, k_m],
    so switching branches at a and b (rather than k_1 and k_m) changes
    nothing in exact arithmetic but makes the tail identity exact in
    floating point as well. gamma broadcasts against x: x shaped
    (..., L) with gamma (L, J) gives per-column transformations.
    """
    x = xp.asarray(x)
    spline = spline_value(x, gamma, grid, xp=xp)
    inside = (x > grid.a) & (x < grid.b)
    return xp.where(inside, spline, x)


def h_derivative(x, gamma, grid: KnotGrid, xp=np):
    """Slope of h_forward: exactly 1 outside (a, b), strictly positive inside."""
    x = xp.asarray(x)
    deriv = spline_slope(x, gamma, grid, xp=xp)
    inside = (x > grid.a) & (x < grid.b)
    return xp.where(inside, deriv, xp.ones_like(deriv))


@dataclass(frozen=True)
class SplineEvalTable:
    """Monotone abscissa/value table over [k_1, k_m] for one spline.

    Supports the linear-interpolation fast path and seeds inverse
    bracketing. Values are exact h_forward evaluations on the grid.
    """

    x: np.ndarray
    y: np.ndarray

    def forward_interp(self, q):
        return np.interp(q, self.x, self.y)


def build_table(gamma, grid: KnotGrid, G: int = 1000) -> SplineEvalTable:
    if G < 2:
        raise ValidationError("table needs G >= 2")
    x = np.linspace(grid.k1, grid.km, G)
    y = np.asarray(h_forward(x, gamma, grid))
    return SplineEvalTable(x=x, y=y)


def h_inverse(y, gamma, grid: KnotGrid, table: SplineEvalTable | None = None,
              tol: float = 1e-10, max_iter: int = 100):
    """Invert h_forward by table bracketing plus safeguarded Newton.

    Exact identity for y outside (a, b); elsewhere iterates until
    |h_forward(x) - y| <= tol. The transformation maps (a, b) onto
    itself, so in-range solutions stay inside the table.
    """
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    out = y.copy()
    inside = (y > grid.a) & (y < grid.b)
    if inside.any():
        if table is None:
            table = build_table(gamma, grid)
        yi = y[inside]
        # interp on the (monotone) value grid gives a first inverse guess
        x = np.interp(yi, table.y, table.x)
        lo = np.full_like(yi, grid.a)
        hi = np.full_like(yi, grid.b)
        g = np.asarray(gamma, dtype=float)
        for _ in range(max_iter):
            f = np.asarray(h_forward(x, g, grid)) - yi
            if np.all(np.abs(f) <= tol):
                break
            lo = np.where(f < 0, np.maximum(lo, x), lo)
            hi = np.where(f > 0, np.minimum(hi, x), hi)
            step = f / np.asarray(h_derivative(x, g, grid))
            xn = x - step
            # fall back to bisection whenever Newton leaves the bracket
            bad = (xn <= lo) | (xn >= hi) | ~np.isfinite(xn)
            x = np.where(bad, 0.5 * (lo + hi), xn)
        else:
            resid = float(np.max(np.abs(np.asarray(h_forward(x, g, grid)) - yi)))
            raise NumericalError(
                f"spline inverse did not reach tol={tol:g} after {max_iter} "
                f"iterations (max residual {resid:.3e})"
            )
        out[inside] = x
    return float(out[0]) if scalar else out


class OnionSpline:
    """One fitted transformation: knots plus coefficients, ready to evaluate."""

    def __init__(self, grid: KnotGrid, beta):
        self.grid = grid
        self.beta = np.asarray(beta, dtype=float)
        self.gamma = np.asarray(gamma_from_beta(self.beta, grid))
        self._table = None

    def forward(self, x):
        return h_forward(x, self.gamma, self.grid)

    def derivative(self, x):
        return h_derivative(x, self.gamma, self.grid)

    def inverse(self, y, tol: float = 1e-10):
        if self._table is None:
            self._table = build_table(self.gamma, self.grid)
        return h_inverse(y, self.gamma, self.grid, table=self._table, tol=tol)
