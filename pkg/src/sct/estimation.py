"""Two-stage fitting: joint MAP for the marginal layers, then the map.

Stage 1 maximizes, under working independence across locations, the
penalized log likelihood

    sum_{i,j} [ log phi(z_ij) + log |dH/dy~| + log |dG/dy| ] + log-priors

over the whitened marginal coefficients, the spline coefficients, and
their kernel hyperparameters (flat priors on the latter). Stage 2
freezes those estimates, pushes the ensemble through the fitted
marginal layers, and fits the transport-map hyperparameters by
empirical Bayes on the pseudo-data.

Gradients come from automatic differentiation; the optimizer is
limited-memory quasi-Newton with an optional first-order adaptive
fallback, early stopping on a held-out replicate split, and a guard
that turns non-finite evaluations into a large finite penalty so the
line search backs off instead of aborting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as sopt

from ._jax import jax, jnp
from .errors import NumericalError, ValidationError
from .geometry import LocationSet, MaximinOrdering, maximin_order
from .links import softplus, softplus_inv
from .marginals import (
    SaturationCounter,
    g_forward,
    get_family,
    log_g_derivative,
    norm_logpdf,
)
from .onion import (
    KnotGrid,
    build_knots,
    build_table,
    gamma_from_beta,
    h_derivative,
    h_forward,
    h_inverse,
)
from .priors import JITTER_FIXED, build_inducing, expand_whitened, whitened_logprior
from .transport import TMPosterior, tm_fit

SIGMA_FLOOR = 1e-6  # on the globally standardized scale


@dataclass(frozen=True)
class OptimizerConfig:
    """Deterministic optimizer settings shared by both stages."""

    algorithm: str = "quasi-newton"  # or "first-order-adaptive"
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    patience: int = 25
    validation_fraction: float = 0.2
    seed: int = 0
    learning_rate: float = 0.01  # first-order fallback only

    def __post_init__(self):
        if self.algorithm not in ("quasi-newton", "first-order-adaptive"):
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")
        if self.max_iterations < 1 or self.patience < 1:
            raise ValidationError("iteration counts must be positive")
        if self.gradient_tolerance <= 0 or self.learning_rate <= 0:
            raise ValidationError("tolerances must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValidationError("validation fraction must lie in [0, 1)")


class Stage1Problem:
    """Static data plus the differentiable Stage-1 objective.

    Parameters live in a pytree: whitened marginal coefficients
    ``u_zeta`` (M, P) with per-parameter kernel hyperparameters
    ``eta_zeta`` (P, 2) as (eta_tau, eta_ell), unconstrained shared
    parameters ``shared``, and, when the spline layer is on, whitened
    spline coefficients ``U_beta`` (M, D) with ``eta_H`` (2,).
    The zeta fields carry a constant centering offset fixed from the
    pooled moments of the standardized ensemble, so the zero vector is
    the pooled-moment model and the whitened prior shrinks toward it.
    """

    def __init__(
        self,
        Y_std: np.ndarray,
        locs: LocationSet,
        family_name: str,
        use_H: bool,
        D: int = 10,
        a: float = -4.0,
        b: float = 4.0,
        M: int = 30,
        kind_zeta: str = "matern-3/2",
        kind_beta: str = "matern-3/2",
        ordering: MaximinOrdering | None = None,
    ):
        Y_std = np.asarray(Y_std, dtype=float)
        if Y_std.ndim != 2 or Y_std.shape[0] < 2:
            raise ValidationError("need an (N, L) ensemble with N >= 2")
        if not np.all(np.isfinite(Y_std)):
            raise ValidationError("ensemble contains non-finite values")
        if Y_std.shape[1] != len(locs):
            raise ValidationError("ensemble width does not match location count")
        self.Y = Y_std
        self.locs = locs
        self.family = get_family(family_name)
        self.use_H = bool(use_H)
        self.kind_zeta = kind_zeta
        self.kind_beta = kind_beta
        self.ordering = maximin_order(locs) if ordering is None else ordering
        self.inducing = build_inducing(locs, self.ordering, min(M, len(locs)))
        self.grid = build_knots(a, b, D) if self.use_H else None
        self.D = int(D) if self.use_H else 0
        span = locs.points.max(axis=0) - locs.points.min(axis=0)
        # bounding-box diagonal; duplicates are already rejected upstream,
        # so zero span can only mean a single location, where the kernel
        # length scale is irrelevant
        self.diameter = float(np.linalg.norm(span)) if len(locs) > 1 else 1.0
        center, _ = self.family.unconstrain_moments(0.0, 1.0)
        self.center = np.asarray(center, dtype=float)

    @property
    def P(self) -> int:
        return self.family.n_local

    # ------------------------------------------------------------ init

    def initial_params(self) -> tuple[dict, np.ndarray]:
        """Moment-projected start; returns (params, degenerate locations)."""
        means = self.Y.mean(axis=0)
        sds = self.Y.std(axis=0, ddof=1)
        degenerate = np.flatnonzero(sds < SIGMA_FLOOR)
        sds = np.maximum(sds, SIGMA_FLOOR)
        raw_target, shared0 = self.family.unconstrain_moments(means, sds)
        ell0 = 0.1 * self.diameter
        eta0 = np.array([float(softplus_inv(1.0)), float(softplus_inv(ell0))])
        basis = expand_whitened(
            np.eye(self.inducing.M),
            self.kind_zeta,
            1.0,
            ell0,
            self.inducing,
            jitter=JITTER_FIXED,
        )
        u0, *_ = np.linalg.lstsq(basis, raw_target - self.center, rcond=None)
        params = {
            "u_zeta": u0,
            "eta_zeta": np.tile(eta0, (self.P, 1)),
            "shared": np.asarray(shared0, dtype=float),
        }
        if self.use_H:
            params["U_beta"] = np.zeros((self.inducing.M, self.D))
            params["eta_H"] = eta0.copy()
        return params, degenerate

    # ------------------------------------------------------ objective

    def _zeta_raw(self, params, xp=jnp):
        taus = softplus(params["eta_zeta"][:, 0], xp=xp)
        ells = softplus(params["eta_zeta"][:, 1], xp=xp)
        cols = [
            expand_whitened(
                params["u_zeta"][:, p],
                self.kind_zeta,
                taus[p] ** 2,
                ells[p],
                self.inducing,
                xp=xp,
                jitter=JITTER_FIXED,
            )
            + self.center[p]
            for p in range(self.P)
        ]
        return xp.stack(cols, axis=-1)

    def _beta(self, params, xp=jnp):
        tau = softplus(params["eta_H"][0], xp=xp)
        ell = softplus(params["eta_H"][1], xp=xp)
        U = expand_whitened(
            params["U_beta"],
            self.kind_beta,
            tau**2,
            ell,
            self.inducing,
            xp=xp,
            jitter=JITTER_FIXED,
        )
        return xp.cumsum(U, axis=-1)

    def per_point(self, params, Y, xp=jnp):
        """Pointwise log-density contributions, shape of Y (rows, L)."""
        raw = self._zeta_raw(params, xp=xp)
        fam_params = self.family.constrain(raw, params["shared"], xp=xp)
        yt = g_forward(Y, fam_params, self.family, xp=xp)
        per = log_g_derivative(Y, fam_params, self.family, xp=xp)
        if self.use_H:
            gam = gamma_from_beta(self._beta(params, xp=xp), self.grid, xp=xp)
            z = h_forward(yt, gam, self.grid, xp=xp)
            per = per + xp.log(h_derivative(yt, gam, self.grid, xp=xp))
            per = per + norm_logpdf(z, xp=xp)
        else:
            per = per + norm_logpdf(yt, xp=xp)
        return per

    def data_term(self, params, Y, xp=jnp):
        return xp.sum(self.per_point(params, Y, xp=xp))

    def log_prior(self, params, xp=jnp):
        lp = whitened_logprior(params["u_zeta"], xp=xp)
        if self.use_H:
            lp = lp + whitened_logprior(params["U_beta"], xp=xp)
        return lp

    def objective(self, params, Y, xp=jnp):
        return self.data_term(params, Y, xp=xp) + self.log_prior(params, xp=xp)


def gradient(problem: Stage1Problem, params: dict, Y=None) -> dict:
    """Objective gradient as a pytree of numpy arrays.

    Raises when any component is non-finite, naming the parameter block.
    """
    Yj = jnp.asarray(problem.Y if Y is None else Y)
    grads = jax.grad(lambda p: problem.objective(p, Yj))(
        {k: jnp.asarray(v) for k, v in params.items()}
    )
    out = {}
    bad = []
    for key, val in grads.items():
        arr = np.asarray(val, dtype=float)
        if not np.all(np.isfinite(arr)):
            bad.append(key)
        out[key] = arr
    if bad:
        raise NumericalError(f"non-finite gradient in parameter blocks {bad}")
    return out


def _per_location_diagnostic(problem: Stage1Problem, params: dict) -> np.ndarray:
    per = problem.per_point(
        {k: jnp.asarray(v) for k, v in params.items()}, jnp.asarray(problem.Y)
    )
    return np.flatnonzero(~np.isfinite(np.asarray(per).sum(axis=0)))


@dataclass
class Stage1Result:
    """Fitted marginal-layer state; everything Stage 2 and scoring need.

    ``family_name`` None means the parametric layer is the identity
    (with the spline layer necessarily off): the pseudo-data equal the
    standardized ensemble and the map reduces to the plain nonlinear
    transport baseline.
    """

    family_name: str | None
    use_H: bool
    gmean: float
    gsd: float
    raw_zeta: np.ndarray | None = None  # (L, P)
    shared: np.ndarray | None = None  # (n_shared,)
    beta: np.ndarray | None = None  # (L, D)
    grid: KnotGrid | None = None
    eta_zeta: np.ndarray | None = None  # (P, 2)
    eta_H: np.ndarray | None = None  # (2,)
    center: np.ndarray | None = None  # (P,)
    inducing_indices: np.ndarray | None = None
    degenerate_locations: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    objective_initial: float = np.nan
    objective_final: float = np.nan
    gradient_norm: float = np.nan
    iterations: int = 0
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.gsd <= 0:
            raise ValidationError("global scale must be positive")
        if self.family_name is None and self.use_H:
            raise ValidationError("spline layer requires a parametric layer")
        self._gammas = None
        self._tables = None

    # -------------------------------------------------- layer pieces

    @classmethod
    def identity(cls, Y: np.ndarray) -> "Stage1Result":
        """Both marginal layers fixed to the identity (nonlinear-map baseline)."""
        Y = np.asarray(Y, dtype=float)
        gsd = float(Y.std())
        if gsd == 0:
            raise ValidationError("ensemble is constant")
        return cls(family_name=None, use_H=False, gmean=float(Y.mean()), gsd=gsd)

    @property
    def family(self):
        return None if self.family_name is None else get_family(self.family_name)

    def constrained_params(self):
        if self.family_name is None:
            return None
        return self.family.constrain(self.raw_zeta, self.shared)

    def standardize(self, Y: np.ndarray) -> np.ndarray:
        return (np.asarray(Y, dtype=float) - self.gmean) / self.gsd

    def destandardize(self, Y_std: np.ndarray) -> np.ndarray:
        return np.asarray(Y_std, dtype=float) * self.gsd + self.gmean

    def gammas(self) -> np.ndarray | None:
        if not self.use_H:
            return None
        if self._gammas is None:
            self._gammas = gamma_from_beta(self.beta, self.grid)
        return self._gammas

    def normal_scores(self, y_std, counter: SaturationCounter | None = None):
        if self.family_name is None:
            return np.asarray(y_std, dtype=float)
        return g_forward(
            y_std, self.constrained_params(), self.family, counter=counter
        )

    def scores_to_data(self, ytilde) -> np.ndarray:
        if self.family_name is None:
            return np.asarray(ytilde, dtype=float)
        return self.family.from_normal_score(ytilde, self.constrained_params())

    def h_apply(self, ytilde) -> np.ndarray:
        if not self.use_H:
            return np.asarray(ytilde, dtype=float)
        return h_forward(ytilde, self.gammas(), self.grid)

    def h_deriv(self, ytilde) -> np.ndarray:
        if not self.use_H:
            return np.ones_like(np.asarray(ytilde, dtype=float))
        return h_derivative(ytilde, self.gammas(), self.grid)

    def h_invert(self, z: np.ndarray) -> np.ndarray:
        """Columnwise spline inversion; z is (n, L)."""
        if not self.use_H:
            return np.asarray(z, dtype=float)
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self._tables is None:
            gam = self.gammas()
            self._tables = [build_table(gam[i], self.grid) for i in range(len(gam))]
        gam = self.gammas()
        out = np.empty_like(z)
        for i in range(z.shape[1]):
            out[:, i] = h_inverse(z[:, i], gam[i], self.grid, table=self._tables[i])
        return out

    def pseudo_data(self, Y: np.ndarray,
                    counter: SaturationCounter | None = None) -> np.ndarray:
        """Standardize, then push through both marginal layers."""
        y_std = self.standardize(Y)
        return self.h_apply(self.normal_scores(y_std, counter=counter))

    def log_jacobian(self, Y: np.ndarray) -> np.ndarray:
        """Pointwise log derivative of the full marginal chain w.r.t. raw y.

        Includes the 1/gsd standardization factor, so summing this with
        the reference density of the mapped values gives densities on
        the original data scale.
        """
        y_std = self.standardize(Y)
        out = np.full(y_std.shape, -np.log(self.gsd))
        if self.family_name is not None:
            params = self.constrained_params()
            out = out + log_g_derivative(y_std, params, self.family)
            if self.use_H:
                yt = g_forward(y_std, params, self.family)
                out = out + np.log(self.h_deriv(yt))
        return out


def stage1_fit(
    Y: np.ndarray,
    locs: LocationSet,
    family: str = "skew-t3",
    use_H: bool = True,
    D: int = 10,
    a: float = -4.0,
    b: float = 4.0,
    M: int = 30,
    kind_zeta: str = "matern-3/2",
    kind_beta: str = "matern-3/2",
    optimizer: OptimizerConfig = OptimizerConfig(),
    ordering: MaximinOrdering | None = None,
    on_iteration=None,
) -> Stage1Result:
    """MAP estimation of the marginal layers on a standardized ensemble."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise ValidationError("need an (N, L) ensemble with N >= 2")
    if not np.all(np.isfinite(Y)):
        raise ValidationError("ensemble contains non-finite values")
    gmean = float(Y.mean())
    gsd = float(Y.std())
    if gsd == 0:
        raise ValidationError("ensemble is constant; nothing to fit")
    Y_std = (Y - gmean) / gsd

    problem = Stage1Problem(
        Y_std, locs, family, use_H, D=D, a=a, b=b, M=M,
        kind_zeta=kind_zeta, kind_beta=kind_beta, ordering=ordering,
    )
    params0, degenerate = problem.initial_params()
    flat0, unravel = jax.flatten_util.ravel_pytree(
        {k: jnp.asarray(v) for k, v in params0.items()}
    )
    x0 = np.asarray(flat0, dtype=float)

    N = Y_std.shape[0]
    rng = np.random.default_rng(optimizer.seed)
    n_val = int(round(optimizer.validation_fraction * N))
    use_val = n_val >= 1 and (N - n_val) >= 2
    perm = rng.permutation(N)
    if use_val:
        val_rows, train_rows = perm[:n_val], perm[n_val:]
    else:
        val_rows, train_rows = np.empty(0, int), np.arange(N)
    Yt = jnp.asarray(Y_std[train_rows])

    neg = jax.jit(lambda x: -problem.objective(unravel(x), Yt))
    value_grad = jax.jit(jax.value_and_grad(lambda x: -problem.objective(unravel(x), Yt)))
    if use_val:
        Yv = jnp.asarray(Y_std[val_rows])
        val_fn = jax.jit(lambda x: problem.data_term(unravel(x), Yv))
    else:
        val_fn = None

    v0, g0 = value_grad(flat0)
    v0 = float(v0)
    if not np.isfinite(v0):
        bad = _per_location_diagnostic(problem, params0)
        raise NumericalError(
            f"non-finite objective at initialization; locations {bad.tolist()}"
        )

    state = {
        "best_val": float(val_fn(flat0)) if use_val else None,
        "best_x": x0.copy(),
        "stale": 0,
        "it": 0,
        "nan_hits": 0,
    }
    trace: list[dict] = []
    t_start = time.perf_counter()

    def wrapped(x):
        v, gr = value_grad(jnp.asarray(x))
        v = float(v)
        gr = np.asarray(gr, dtype=float)
        if not np.isfinite(v) or not np.all(np.isfinite(gr)):
            state["nan_hits"] += 1
            return 1e15, np.zeros_like(gr)
        return v, gr

    class _Stop(Exception):
        pass

    def callback(xk):
        state["it"] += 1
        v, gr = wrapped(xk)
        record = {
            "iteration": state["it"],
            "objective": -v,
            "grad_norm": float(np.linalg.norm(gr)),
            "wall_time": time.perf_counter() - t_start,
        }
        if use_val:
            vv = float(val_fn(jnp.asarray(xk)))
            record["validation"] = vv
            if np.isfinite(vv) and vv > state["best_val"]:
                state["best_val"] = vv
                state["best_x"] = np.asarray(xk, dtype=float).copy()
                state["stale"] = 0
            else:
                state["stale"] += 1
        else:
            state["best_x"] = np.asarray(xk, dtype=float).copy()
        trace.append(record)
        if on_iteration is not None:
            on_iteration(record)
        if use_val and state["stale"] > optimizer.patience:
            raise _Stop

    try:
        if optimizer.algorithm == "quasi-newton":
            res = sopt.minimize(
                wrapped,
                x0,
                jac=True,
                method="L-BFGS-B",
                callback=callback,
                options={
                    "maxiter": optimizer.max_iterations,
                    "gtol": optimizer.gradient_tolerance,
                },
            )
            if not use_val:
                state["best_x"] = np.asarray(res.x, dtype=float)
        else:
            _adam(wrapped, x0, optimizer, callback)
    except (_Stop, StopIteration):
        pass

    x_best = state["best_x"]
    v_best, g_best = wrapped(x_best)
    if v_best >= 1e15:
        params_bad = {k: np.asarray(v) for k, v in unravel(jnp.asarray(x_best)).items()}
        bad = _per_location_diagnostic(problem, params_bad)
        raise NumericalError(
            f"persistent non-finite objective; locations {bad.tolist()}"
        )
    # never return anything worse than the start
    if v_best > v0:
        x_best, v_best, g_best = x0, v0, np.asarray(g0, dtype=float)
    fitted = {k: np.asarray(v) for k, v in unravel(jnp.asarray(x_best)).items()}

    raw_zeta = np.asarray(problem._zeta_raw(fitted, xp=jnp))
    beta = np.asarray(problem._beta(fitted, xp=jnp)) if use_H else None
    return Stage1Result(
        family_name=family,
        use_H=use_H,
        gmean=gmean,
        gsd=gsd,
        raw_zeta=raw_zeta,
        shared=fitted["shared"].copy(),
        beta=beta,
        grid=problem.grid,
        eta_zeta=fitted["eta_zeta"].copy(),
        eta_H=fitted["eta_H"].copy() if use_H else None,
        center=problem.center.copy(),
        inducing_indices=problem.inducing.indices.copy(),
        degenerate_locations=degenerate,
        objective_initial=-v0,
        objective_final=-float(v_best),
        gradient_norm=float(np.linalg.norm(g_best)),
        iterations=state["it"],
        trace=trace,
    )


def _adam(wrapped, x0, optimizer: OptimizerConfig, callback):
    """Deterministic first-order fallback with bias-corrected moments."""
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, optimizer.max_iterations + 1):
        val, gr = wrapped(x)
        m = b1 * m + (1 - b1) * gr
        v = b2 * v + (1 - b2) * gr * gr
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - optimizer.learning_rate * mh / (np.sqrt(vh) + eps)
        callback(x)
        if np.linalg.norm(gr) < optimizer.gradient_tolerance:
            break
    return x


def stage2_fit(
    Y: np.ndarray,
    locs: LocationSet,
    ordering: MaximinOrdering,
    stage1: Stage1Result,
    g: float = 4.0,
    eps: float = 0.01,
    theta0=None,
    maxiter: int = 200,
) -> tuple[TMPosterior, dict]:
    """Freeze the marginal layers, Gaussianize, fit the transport map."""
    t0 = time.perf_counter()
    Z = stage1.pseudo_data(Y)
    t1 = time.perf_counter()
    post, info = tm_fit(Z, locs, ordering, g=g, eps=eps, theta0=theta0,
                        maxiter=maxiter)
    t2 = time.perf_counter()
    info["pseudo_data"] = Z
    info["timings"] = {"gaussianize": t1 - t0, "tm_fit": t2 - t1}
    return post, info
