"""Fitted model container, sampling by composite inversion, and scoring.

The fitted model bundles the marginal-layer state, the transport-map
posterior, and the preprocessing constants. New fields are generated by
drawing i.i.d. standard normal noise and pushing it back through the
inverted composition; predictive log densities sum the transport
posterior predictive with the marginal log-Jacobian terms, so scores
live on the original data scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .estimation import OptimizerConfig, Stage1Result, stage1_fit, stage2_fit
from .geometry import LocationSet, MaximinOrdering, maximin_order
from .marginals import SaturationCounter
from .transport import TMPosterior

__all__ = [
    "FittedModel",
    "ScoreReport",
    "fit_model",
    "sample",
    "log_density",
    "log_density_parts",
    "log_score",
    "exceedance_map",
    "global_quantile",
]


@dataclass
class FittedModel:
    """Everything needed to sample from and score a fitted composition.

    Parameters
    ----------
    stage1 : Stage1Result
        Fitted marginal layers, including the global standardization
        constants. Identity layers (``family_name`` None) reduce the
        model to the plain nonlinear transport baseline.
    transport : TMPosterior
        Closed-form map posterior at the optimized hyperparameters.
    ordering : MaximinOrdering
        Shared by both stages and by the conditioning-set construction.
    locs : LocationSet
        Training locations in original order.
    config : dict
        Flat record of the settings the model was fitted with; hashed
        into ``fingerprint`` so artifacts can be matched to configs.
    location_sds : (L,) array
        Per-location sample standard deviations of the training
        ensemble. Only used to report the location-wise score
        adjustment constant, never in the model itself.
    pseudo_train : (N, L) array
        Training pseudo-data (marginal layers applied). Persisting it
        lets the transport posterior be rebuilt exactly on load.
    fit_info : dict
        Optimizer diagnostics; not part of the model state proper.
    """

    stage1: Stage1Result
    transport: TMPosterior
    ordering: MaximinOrdering
    locs: LocationSet
    config: dict
    location_sds: np.ndarray
    pseudo_train: np.ndarray
    fit_info: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return len(self.locs)

    @property
    def fingerprint(self) -> str:
        """Stable digest of the configuration the model was fitted with."""
        blob = json.dumps(self.config, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -------------------------------------------------- composite map

    def to_reference(self, Y: np.ndarray,
                     counter: SaturationCounter | None = None) -> np.ndarray:
        """Forward composition: raw fields (n, L) to reference space."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] != self.L:
            raise ValidationError(
                f"fields have {Y.shape[1]} locations, model has {self.L}"
            )
        return self.transport.apply(self.stage1.pseudo_data(Y, counter=counter))

    def from_reference(self, Z: np.ndarray) -> np.ndarray:
        """Inverse composition: reference-space rows (n, L) to raw fields."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] != self.L:
            raise ValidationError(
                f"noise has {Z.shape[1]} columns, model has {self.L} locations"
            )
        z_tilde = self.transport.invert(Z)
        _check_finite_rows(z_tilde, "transport inversion")
        y_tilde = self.stage1.h_invert(z_tilde)
        _check_finite_rows(y_tilde, "spline inversion")
        y_std = self.stage1.scores_to_data(y_tilde)
        _check_finite_rows(y_std, "marginal quantile inversion")
        return self.stage1.destandardize(y_std)


def _check_finite_rows(arr: np.ndarray, stage: str) -> None:
    bad = ~np.all(np.isfinite(arr), axis=1)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise NumericalError(
            f"{stage} produced non-finite values for sample index "
            f"{idx[0]} ({idx.size} of {arr.shape[0]} rows affected)"
        )


def fit_model(
    Y: np.ndarray,
    locs: LocationSet,
    family: str | None = "skew-t3",
    use_H: bool = True,
    D: int = 10,
    a: float = -4.0,
    b: float = 4.0,
    M: int = 30,
    kind_zeta: str = "matern-3/2",
    kind_beta: str = "matern-3/2",
    g: float = 4.0,
    eps: float = 0.01,
    optimizer: OptimizerConfig = OptimizerConfig(),
    theta0=None,
    maxiter_tm: int = 200,
    ordering: MaximinOrdering | None = None,
    on_iteration=None,
) -> FittedModel:
    """Fit both stages on a training ensemble and bundle the result.

    ``family`` None requests identity marginal layers (global
    standardization only), the plain nonlinear transport baseline;
    ``use_H`` must be False in that case.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise ValidationError("need an (N, L) ensemble with N >= 2")
    if Y.shape[1] != len(locs):
        raise ValidationError(
            f"ensemble has {Y.shape[1]} columns, location set has {len(locs)}"
        )
    if not np.all(np.isfinite(Y)):
        raise ValidationError("ensemble contains non-finite values")
    if family is None and use_H:
        raise ValidationError("identity marginals cannot carry a spline layer")
    if ordering is None:
        ordering = maximin_order(locs)

    if family is None:
        stage1 = Stage1Result.identity(Y)
    else:
        stage1 = stage1_fit(
            Y, locs, family=family, use_H=use_H, D=D, a=a, b=b, M=M,
            kind_zeta=kind_zeta, kind_beta=kind_beta, optimizer=optimizer,
            ordering=ordering, on_iteration=on_iteration,
        )
    post, info = stage2_fit(
        Y, locs, ordering, stage1, g=g, eps=eps, theta0=theta0,
        maxiter=maxiter_tm,
    )

    config = {
        "family": "none" if family is None else family,
        "use_H": bool(use_H),
        "D": int(D), "a": float(a), "b": float(b), "M": int(M),
        "kind_zeta": kind_zeta, "kind_beta": kind_beta,
        "g": float(g), "eps": float(eps),
        "algorithm": optimizer.algorithm,
        "max_iterations": optimizer.max_iterations,
        "gradient_tolerance": optimizer.gradient_tolerance,
        "patience": optimizer.patience,
        "validation_fraction": optimizer.validation_fraction,
        "learning_rate": optimizer.learning_rate,
        "seed": optimizer.seed,
        "maxiter_tm": int(maxiter_tm),
        "metric": locs.metric,
    }
    fit_info = {
        "theta": np.asarray(info["theta"], dtype=float),
        "rounds": info.get("rounds"),
        "timings": info.get("timings"),
        "stage1_objective_initial": stage1.objective_initial,
        "stage1_objective_final": stage1.objective_final,
        "stage1_iterations": stage1.iterations,
    }
    return FittedModel(
        stage1=stage1,
        transport=post,
        ordering=ordering,
        locs=locs,
        config=config,
        location_sds=np.std(Y, axis=0, ddof=1),
        pseudo_train=np.asarray(info["pseudo_data"], dtype=float),
        fit_info=fit_info,
    )


# ------------------------------------------------------------------ sampling


def sample(
    model: FittedModel,
    count: int,
    seed: int | None = None,
    noise: np.ndarray | None = None,
    return_noise: bool = False,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Generate ``count`` fields by inverting the composition on noise.

    Deterministic given ``seed``. Passing ``noise`` (count x L standard
    normal draws) overrides the internal generator; supplying the same
    array to several model variants compares them under common noise.
    ``return_noise`` additionally returns the (possibly generated)
    noise matrix actually consumed.
    """
    if count < 1:
        raise ValidationError("sample count must be at least 1")
    if noise is None:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((count, model.L))
    else:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (count, model.L):
            raise ValidationError(
                f"noise must have shape ({count}, {model.L}), got {noise.shape}"
            )
        if not np.all(np.isfinite(noise)):
            raise ValidationError("noise contains non-finite values")
    fields = model.from_reference(noise)
    if return_noise:
        return fields, noise
    return fields


# ------------------------------------------------------------------ scoring


def log_density(
    model: FittedModel,
    Y: np.ndarray,
    counter: SaturationCounter | None = None,
) -> np.ndarray | float:
    """Joint log density of fields on the original data scale.

    Sums the transport posterior-predictive log density of the
    pseudo-data with the pointwise log-Jacobians of both marginal
    layers (standardization included). A 1-D input returns a scalar,
    an (n, L) input one value per row. Values clamped at the normal
    score limit are counted on ``counter`` when one is supplied.
    """
    Y = np.asarray(Y, dtype=float)
    single = Y.ndim == 1
    Y = np.atleast_2d(Y)
    if Y.shape[1] != model.L:
        raise ValidationError(
            f"fields have {Y.shape[1]} locations, model has {model.L}"
        )
    if not np.all(np.isfinite(Y)):
        raise ValidationError("fields contain non-finite values")
    z_tilde = model.stage1.pseudo_data(Y, counter=counter)
    out = model.transport.predictive_logpdf(z_tilde)
    out = out + model.stage1.log_jacobian(Y).sum(axis=1)
    return float(out[0]) if single else out


def log_density_parts(model: FittedModel, Y: np.ndarray) -> dict:
    """Per-layer contributions to :func:`log_density`, one row each.

    Returns arrays ``parametric`` (standardization plus parametric
    log-derivatives), ``spline``, and ``transport`` whose sum equals
    the joint log density. Each layer is evaluated through its own
    primitives rather than the fused Jacobian path.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    stage1 = model.stage1
    n = Y.shape[0]
    y_std = stage1.standardize(Y)
    parametric = np.full(n, -model.L * np.log(stage1.gsd))
    spline = np.zeros(n)
    if stage1.family_name is not None:
        from .marginals import log_g_derivative

        params = stage1.constrained_params()
        parametric = parametric + log_g_derivative(
            y_std, params, stage1.family
        ).sum(axis=1)
        if stage1.use_H:
            yt = stage1.normal_scores(y_std)
            spline = np.log(stage1.h_deriv(yt)).sum(axis=1)
    transport = model.transport.predictive_logpdf(stage1.pseudo_data(Y))
    return {"parametric": parametric, "spline": spline, "transport": transport}


@dataclass(frozen=True)
class ScoreReport:
    """Predictive log-score summary for a holdout ensemble.

    ``log_densities`` are on the original data scale, so the mean
    negative log score already carries the standardization Jacobian;
    the adjustment constants are reported for reconstruction, never
    re-applied. ``adjustment_global`` is L log(gsd) for the global
    standardization used here (score on the standardized scale equals
    ``mean_negative_log_score - adjustment_global``), while
    ``adjustment_locationwise`` is the sum of per-location training
    log standard deviations, the constant needed to lift scores of
    models fitted to location-wise standardized data onto the same
    scale.
    """

    log_densities: np.ndarray
    mean_negative_log_score: float
    adjustment_global: float
    adjustment_locationwise: float
    n_locations: int
    n_replicates: int
    saturation_count: int = 0
    split_id: str | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.log_densities)):
            raise NumericalError("score report contains non-finite densities")
        if not np.isfinite(self.mean_negative_log_score):
            raise NumericalError("mean negative log score is non-finite")


def log_score(
    model: FittedModel,
    Y_test: np.ndarray,
    split_id: str | None = None,
) -> ScoreReport:
    """Mean negative predictive log density over holdout replicates."""
    Y_test = np.asarray(Y_test, dtype=float)
    if Y_test.ndim == 1:
        Y_test = Y_test[None, :]
    if Y_test.size == 0 or Y_test.shape[0] < 1:
        raise ValidationError("empty test set")
    counter = SaturationCounter()
    ld = log_density(model, Y_test, counter=counter)
    return ScoreReport(
        log_densities=ld,
        mean_negative_log_score=float(-np.mean(ld)),
        adjustment_global=float(model.L * np.log(model.stage1.gsd)),
        adjustment_locationwise=float(np.sum(np.log(model.location_sds))),
        n_locations=model.L,
        n_replicates=Y_test.shape[0],
        saturation_count=counter.count,
        split_id=split_id,
    )


# ------------------------------------------------------------- summaries


def exceedance_map(
    source,
    threshold: float,
    direction: str = "above",
    count: int | None = None,
    seed: int | None = None,
) -> np.ndarray:
    """Per-location empirical probability of exceeding a threshold.

    ``source`` is either an (n, L) sample array or a fitted model; the
    model form draws ``count`` Monte-Carlo samples (at least 100) with
    ``seed`` first.
    """
    if direction not in ("above", "below"):
        raise ValidationError(
            f"direction must be 'above' or 'below', got {direction!r}"
        )
    if isinstance(source, FittedModel):
        if count is None or count < 100:
            raise ValidationError(
                "Monte-Carlo exceedance needs count >= 100 samples"
            )
        samples = sample(source, count, seed=seed)
    else:
        samples = np.atleast_2d(np.asarray(source, dtype=float))
        if samples.shape[0] < 1:
            raise ValidationError("need at least one sample row")
    if direction == "above":
        return np.mean(samples > threshold, axis=0)
    return np.mean(samples < threshold, axis=0)


def global_quantile(ensemble: np.ndarray, p: float) -> float:
    """Empirical quantile pooling all replicates and locations.

    Linear interpolation between order statistics.
    """
    if not 0.0 < p < 1.0:
        raise ValidationError(f"quantile level must be in (0, 1), got {p}")
    vals = np.asarray(ensemble, dtype=float).ravel()
    if vals.size == 0:
        raise ValidationError("empty ensemble")
    return float(np.quantile(vals, p, method="linear"))
