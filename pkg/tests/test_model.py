"""Sampling and scoring tests: density oracles, KS checks, score plumbing."""

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from sct.errors import NumericalError, ValidationError
from sct.estimation import OptimizerConfig, Stage1Result
from sct.geometry import LocationSet, maximin_order
from sct.links import softplus_inv
from sct.marginals import SaturationCounter, log_g_derivative
from sct.model import (
    FittedModel,
    ScoreReport,
    exceedance_map,
    fit_model,
    global_quantile,
    log_density,
    log_density_parts,
    log_score,
    sample,
)
from sct.transport import fit_posterior


def grid_locs(nx, ny, jitter=0.0, seed=0):
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float))
    coords = np.column_stack([xs.ravel(), ys.ravel()])
    if jitter:
        coords = coords + np.random.default_rng(seed).uniform(
            -jitter, jitter, coords.shape
        )
    return LocationSet(coords, metric="euclidean-plane")


class _IdentityTransport:
    """Stand-in transport layer: the identity map with N(0,1) reference."""

    def apply(self, Z):
        return np.atleast_2d(np.asarray(Z, dtype=float))

    def invert(self, Z):
        return np.atleast_2d(np.asarray(Z, dtype=float))

    def predictive_logpdf(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return stats.norm.logpdf(Z).sum(axis=1)


def _shell_model(stage1, transport, locs, config=None):
    ordering = maximin_order(locs)
    return FittedModel(
        stage1=stage1,
        transport=transport,
        ordering=ordering,
        locs=locs,
        config=config or {},
        location_sds=np.ones(len(locs)),
        pseudo_train=np.zeros((2, len(locs))),
    )


# ------------------------------------------------------------- fixtures


@pytest.fixture(scope="module")
def white_model():
    """Identity marginals plus a transport map fitted on white noise.

    The training block is large enough that the fitted per-location
    predictive scales pin down near 1, so the sampling path can be
    checked against the N(0, 1) oracle.
    """
    rng = np.random.default_rng(11)
    Y = rng.standard_normal((500, 9))
    return Y, fit_model(Y, grid_locs(3, 3), family=None, use_H=False)


@pytest.fixture(scope="module")
def skew_field():
    """Correlated, skewed 3x3 synthetic field: train and test blocks."""
    rng = np.random.default_rng(21)
    locs = grid_locs(3, 3)
    d = np.linalg.norm(locs.points[:, None, :] - locs.points[None, :, :], axis=2)
    C = np.exp(-d / 1.5)
    Lc = np.linalg.cholesky(C + 1e-10 * np.eye(9))
    Z = rng.standard_normal((50, 9)) @ Lc.T
    Y = np.exp(0.8 * Z)
    return locs, Y[:25], Y[25:]


@pytest.fixture(scope="module")
def skew_model(skew_field):
    locs, Y_train, _ = skew_field
    return fit_model(
        Y_train, locs, family="skew-t3", use_H=True, D=6, M=9,
        optimizer=OptimizerConfig(max_iterations=250, seed=3),
    )


# ------------------------------------------ density collapse and quadrature


def test_gaussian_identity_layers_collapse_to_normal_density():
    # L = 1, Gaussian marginal, identity spline and transport: the joint
    # density must reduce to the fitted normal density on the raw scale.
    rng = np.random.default_rng(0)
    Y = rng.normal(3.0, 2.0, (200, 1))
    locs = LocationSet(np.array([[0.0, 0.0]]), metric="euclidean-plane")
    from sct.estimation import stage1_fit

    stage1 = stage1_fit(
        Y, locs, family="gaussian", use_H=False, M=1,
        optimizer=OptimizerConfig(max_iterations=200, validation_fraction=0.0),
    )
    model = _shell_model(stage1, _IdentityTransport(), locs)
    mu, sigma = stage1.constrained_params()
    mu_raw = stage1.gmean + stage1.gsd * float(mu[0])
    sd_raw = stage1.gsd * float(sigma[0])
    ys = np.linspace(mu_raw - 4 * sd_raw, mu_raw + 4 * sd_raw, 41)
    got = log_density(model, ys[:, None])
    want = stats.norm.logpdf(ys, loc=mu_raw, scale=sd_raw)
    assert np.max(np.abs(got - want)) < 1e-10


def test_one_dim_density_integrates_to_one():
    # Full model on L = 1: skewed marginal, spline correction, fitted
    # transport posterior. Change of variables says the joint density
    # must integrate to 1 over the real line.
    rng = np.random.default_rng(5)
    Y = rng.gamma(3.0, 1.0, (300, 1))
    locs = LocationSet(np.array([[0.0, 0.0]]), metric="euclidean-plane")
    model = fit_model(
        Y, locs, family="skew-t3", use_H=True, D=6, M=1,
        optimizer=OptimizerConfig(max_iterations=200, validation_fraction=0.0),
    )
    total, err = quad(
        lambda y: np.exp(log_density(model, np.array([y]))),
        -np.inf, np.inf, limit=400,
    )
    assert err < 1e-7
    assert abs(total - 1.0) < 1e-5


def test_two_dim_density_integrates_to_one():
    # L = 2 with correlation; tensor Gauss-Legendre quadrature over a box
    # wide enough that the truncated mass is negligible.
    rng = np.random.default_rng(7)
    z = rng.multivariate_normal([0, 0], [[1.0, 0.7], [0.7, 1.0]], size=40)
    Y = np.exp(0.6 * z)
    locs = LocationSet(np.array([[0.0, 0.0], [1.0, 0.0]]), metric="euclidean-plane")
    model = fit_model(
        Y, locs, family="gaussian", use_H=True, D=6, M=2,
        optimizer=OptimizerConfig(max_iterations=200, validation_fraction=0.0),
    )
    lo = model.stage1.gmean - 20 * model.stage1.gsd
    hi = model.stage1.gmean + 20 * model.stage1.gsd
    nodes, weights = np.polynomial.legendre.leggauss(400)
    x = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * weights
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    pts = np.column_stack([X1.ravel(), X2.ravel()])
    ld = log_density(model, pts).reshape(400, 400)
    total = w @ np.exp(ld) @ w
    assert abs(total - 1.0) < 1e-4


# ----------------------------------------------------------------- sampling


def test_white_noise_model_samples_standard_normal(white_model):
    _, model = white_model
    fields = sample(model, 1000, seed=5)
    assert fields.shape == (1000, 9)
    crit = stats.kstwobign.isf(0.01) / np.sqrt(1000)
    stats_per_loc = [
        stats.kstest(fields[:, i], "norm").statistic for i in range(9)
    ]
    assert sum(s > crit for s in stats_per_loc) <= 1


def test_sampling_deterministic_given_seed(white_model):
    _, model = white_model
    a = sample(model, 7, seed=123)
    b = sample(model, 7, seed=123)
    c = sample(model, 7, seed=124)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_return_noise_reproduces_generator(white_model):
    _, model = white_model
    fields, noise = sample(model, 4, seed=9, return_noise=True)
    assert noise.shape == (4, 9)
    expect = np.random.default_rng(9).standard_normal((4, 9))
    assert np.array_equal(noise, expect)
    assert np.array_equal(fields, sample(model, 4, noise=noise))


def test_common_noise_consumed_identically(white_model, skew_model):
    # Two different model variants must feed the exact same reference
    # draws into their transport inversions when noise is injected.
    _, ma = white_model
    mb = skew_model
    noise = np.random.default_rng(2).standard_normal((5, 9))
    seen = []
    for m in (ma, mb):
        orig = m.transport.invert

        def recorder(Z, _orig=orig):
            seen.append(np.array(Z))
            return _orig(Z)

        m.transport.invert = recorder
    try:
        fa = sample(ma, 5, noise=noise)
        fb = sample(mb, 5, noise=noise)
    finally:
        del ma.transport.invert, mb.transport.invert
    assert np.array_equal(seen[0], noise)
    assert np.array_equal(seen[1], noise)
    assert fa.shape == fb.shape
    assert not np.allclose(fa, fb)


def test_sample_validation(white_model):
    _, model = white_model
    with pytest.raises(ValidationError):
        sample(model, 0, seed=1)
    with pytest.raises(ValidationError):
        sample(model, 3, noise=np.zeros((2, 9)))
    with pytest.raises(ValidationError):
        sample(model, 1, noise=np.full((1, 9), np.nan))


def test_inversion_failure_names_sample_index():
    locs = grid_locs(2, 1)
    stage1 = Stage1Result.identity(np.random.default_rng(0).normal(size=(5, 2)))

    class _Broken(_IdentityTransport):
        def invert(self, Z):
            Z = np.array(np.atleast_2d(Z), dtype=float)
            Z[2, 0] = np.nan
            return Z

    model = _shell_model(stage1, _Broken(), locs)
    with pytest.raises(NumericalError, match="sample index 2"):
        sample(model, 4, seed=0)


def test_round_trip_through_reference_space(skew_field, skew_model):
    # Forward then inverse reproduces held-out fields; repeated forward
    # maps agree to tight tolerance in reference space.
    _, _, Y_test = skew_field
    z1 = skew_model.to_reference(Y_test)
    y2 = skew_model.from_reference(z1)
    z2 = skew_model.to_reference(y2)
    assert np.max(np.abs(z2 - z1)) < 1e-6
    assert np.max(np.abs(y2 - Y_test) / (1.0 + np.abs(Y_test))) < 1e-4


def test_generated_samples_have_finite_density(skew_model):
    fields = sample(skew_model, 50, seed=31)
    ld = log_density(skew_model, fields)
    assert np.all(np.isfinite(ld))


# ------------------------------------------------------------------ scoring


def test_score_decomposition_matches_layer_parts(skew_field, skew_model):
    # The fused log density must equal the sum of the three per-layer
    # contributions computed through the layer primitives.
    _, _, Y_test = skew_field
    parts = log_density_parts(skew_model, Y_test)
    total = parts["parametric"] + parts["spline"] + parts["transport"]
    ld = log_density(skew_model, Y_test)
    assert np.max(np.abs(total - ld)) < 1e-10

    # independent recomputation of the parametric part
    stage1 = skew_model.stage1
    y_std = stage1.standardize(Y_test)
    para = -9 * np.log(stage1.gsd) + log_g_derivative(
        y_std, stage1.constrained_params(), stage1.family
    ).sum(axis=1)
    assert np.max(np.abs(para - parts["parametric"])) < 1e-10


def test_score_report_fields(skew_field, skew_model):
    _, Y_train, Y_test = skew_field
    rep = log_score(skew_model, Y_test, split_id="holdout-0")
    assert isinstance(rep, ScoreReport)
    assert rep.n_replicates == Y_test.shape[0]
    assert rep.n_locations == 9
    assert rep.split_id == "holdout-0"
    assert np.allclose(rep.mean_negative_log_score, -np.mean(rep.log_densities))
    assert np.isclose(
        rep.adjustment_global, 9 * np.log(skew_model.stage1.gsd)
    )
    assert np.isclose(
        rep.adjustment_locationwise,
        np.sum(np.log(np.std(Y_train, axis=0, ddof=1))),
    )


def test_score_standardized_scale_reconstruction(skew_field, skew_model):
    # Subtracting the global adjustment must give exactly the score the
    # model would report on the standardized data scale.
    _, _, Y_test = skew_field
    rep = log_score(skew_model, Y_test)
    parts = log_density_parts(skew_model, Y_test)
    std_ld = (
        parts["parametric"]
        + 9 * np.log(skew_model.stage1.gsd)
        + parts["spline"]
        + parts["transport"]
    )
    want = -np.mean(std_ld)
    assert abs((rep.mean_negative_log_score - rep.adjustment_global) - want) < 1e-10


def test_empty_test_set_rejected(skew_model):
    with pytest.raises(ValidationError):
        log_score(skew_model, np.empty((0, 9)))


def test_log_density_validation(skew_model):
    with pytest.raises(ValidationError):
        log_density(skew_model, np.zeros((2, 5)))
    with pytest.raises(ValidationError):
        log_density(skew_model, np.full((1, 9), np.inf))


def test_skewed_data_prefers_skewed_marginals(skew_field, skew_model):
    # Paired comparison on the same holdout block: the model with the
    # skewed parametric layer must beat the identity-marginal baseline.
    locs, Y_train, Y_test = skew_field
    baseline = fit_model(Y_train, locs, family=None, use_H=False)
    s_skew = log_score(skew_model, Y_test)
    s_base = log_score(baseline, Y_test)
    diff = -s_skew.log_densities + s_base.log_densities
    se = np.std(diff, ddof=1) / np.sqrt(len(diff))
    assert s_skew.mean_negative_log_score < s_base.mean_negative_log_score
    assert np.mean(diff) < -2 * se


def test_saturation_is_counted():
    # A value far beyond the marginal support clamps the normal score;
    # the density stays finite and the event is counted.
    locs = LocationSet(np.array([[0.0, 0.0]]), metric="euclidean-plane")
    stage1 = Stage1Result(
        family_name="skew-t3",
        use_H=False,
        gmean=0.0,
        gsd=1.0,
        raw_zeta=np.array([[0.0, softplus_inv(1.0), 0.5]]),
        shared=np.array([softplus_inv(5.0)]),
    )
    model = _shell_model(stage1, _IdentityTransport(), locs)
    counter = SaturationCounter()
    ld = log_density(model, np.array([[1e6]]), counter=counter)
    assert counter.count >= 1
    assert np.all(np.isfinite(ld))
    rep = log_score(model, np.array([[1e6], [0.5]]))
    assert rep.saturation_count >= 1


# ---------------------------------------------------------------- summaries


def test_exceedance_trivial_thresholds():
    rng = np.random.default_rng(3)
    samples = rng.standard_normal((200, 4))
    assert np.array_equal(exceedance_map(samples, -np.inf, "above"), np.ones(4))
    assert np.array_equal(exceedance_map(samples, np.inf, "below"), np.ones(4))
    assert np.array_equal(exceedance_map(samples, np.inf, "above"), np.zeros(4))


def test_exceedance_binomial_oracle():
    rng = np.random.default_rng(13)
    samples = rng.standard_normal((2000, 5))
    p = exceedance_map(samples, 0.0, "above")
    se = 0.5 / np.sqrt(2000)
    assert np.all(np.abs(p - 0.5) < 4 * se)
    assert np.allclose(p + exceedance_map(samples, 0.0, "below"), 1.0)


def test_exceedance_model_mode(white_model):
    _, model = white_model
    p = exceedance_map(model, 0.0, "above", count=400, seed=8)
    assert p.shape == (9,)
    assert np.all((p > 0.35) & (p < 0.65))
    direct = exceedance_map(sample(model, 400, seed=8), 0.0, "above")
    assert np.array_equal(p, direct)
    with pytest.raises(ValidationError):
        exceedance_map(model, 0.0, "above", count=50, seed=8)
    with pytest.raises(ValidationError):
        exceedance_map(model, 0.0, "sideways", count=400)


def test_global_quantile_hand_cases():
    assert global_quantile(np.array([1.0, 2.0, 3.0]), 0.5) == 2.0
    # linear interpolation between order statistics: position
    # (n - 1) p = 0.75 between the first two order statistics
    assert global_quantile(np.array([0.0, 1.0, 2.0, 3.0]), 0.25) == 0.75
    vals = np.random.default_rng(0).normal(size=(6, 7))
    ps = np.linspace(0.05, 0.95, 19)
    qs = [global_quantile(vals, p) for p in ps]
    assert np.all(np.diff(qs) >= 0)
    for bad in (0.0, 1.0, -0.1, 1.1):
        with pytest.raises(ValidationError):
            global_quantile(vals, bad)


# ------------------------------------------------------------- fit_model


def test_fit_model_validation(white_model):
    Y, _ = white_model
    locs = grid_locs(3, 3)
    with pytest.raises(ValidationError):
        fit_model(Y, locs, family=None, use_H=True)
    with pytest.raises(ValidationError):
        fit_model(Y[:, :5], locs, family=None, use_H=False)
    bad = Y.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValidationError):
        fit_model(bad, locs, family=None, use_H=False)


def test_fit_model_records_config_and_fingerprint(skew_model, white_model):
    _, white = white_model
    assert skew_model.config["family"] == "skew-t3"
    assert skew_model.config["use_H"] is True
    assert white.config["family"] == "none"
    assert skew_model.fingerprint != white.fingerprint
    clone = FittedModel(
        stage1=white.stage1,
        transport=white.transport,
        ordering=white.ordering,
        locs=white.locs,
        config=dict(white.config),
        location_sds=white.location_sds,
        pseudo_train=white.pseudo_train,
    )
    assert clone.fingerprint == white.fingerprint
    assert "theta" in skew_model.fit_info


def test_identity_model_matches_rebuilt_posterior(white_model):
    # The stored pseudo-data plus theta must reproduce the transport
    # posterior exactly: scores agree to machine precision.
    Y, model = white_model
    rebuilt = fit_posterior(
        model.pseudo_train, model.locs, model.ordering,
        model.transport.theta, model.transport.g, model.transport.eps,
    )
    clone = FittedModel(
        stage1=model.stage1,
        transport=rebuilt,
        ordering=model.ordering,
        locs=model.locs,
        config=model.config,
        location_sds=model.location_sds,
        pseudo_train=model.pseudo_train,
    )
    Y_new = np.random.default_rng(77).standard_normal((6, 9))
    assert np.allclose(
        log_density(model, Y_new), log_density(clone, Y_new),
        rtol=0, atol=1e-12,
    )
