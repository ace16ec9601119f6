"""Parametric marginal layer: per-location Gaussianization through a CDF.

y -> ytilde = ndtri(F(y | zeta)). Families implement log density, CDF,
survival function, and the inverse map from normal scores; everything
except the inverse runs under numpy or jax interchangeably via the xp
argument. Tail evaluation always goes through whichever of CDF/survival
is the small one, which keeps normal scores accurate out to |ytilde|
around 8.5; beyond that the score is clamped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special as _sspecial
import scipy.stats as _sstats

from ._jax import jax, jnp, jspecial
from .errors import ValidationError
from .links import softplus, softplus_inv

LOG_2PI = float(np.log(2.0 * np.pi))

# ndtr(-8.5): scores are exact up to here, clamped past it. The matching
# ndtri slope 1/phi(8.5) ~ 1e16 is still finite, so gradients never blow
# up through a clamped point (clipping zeroes them instead).
_PMIN = float(_sspecial.ndtr(-8.5))


def _special(xp):
    return jspecial if xp is jnp else _sspecial


def norm_logpdf(x, xp=np):
    return -0.5 * xp.asarray(x) ** 2 - 0.5 * LOG_2PI


def t_logpdf(x, nu, xp=np):
    sp = _special(xp)
    x = xp.asarray(x)
    return (
        sp.gammaln((nu + 1.0) / 2.0)
        - sp.gammaln(nu / 2.0)
        - 0.5 * xp.log(nu * np.pi)
        - (nu + 1.0) / 2.0 * xp.log1p(x * x / nu)
    )


def _t_tail_expr(x, nu, xp):
    """0.5 * I_{nu/(nu+x^2)}(nu/2, 1/2): t tail mass beyond |x|.

    Equals the t CDF for x <= 0 and the t survival function for x >= 0;
    relatively accurate deep into the tail, unlike 1 - CDF.
    """
    sp = _special(xp)
    x = xp.asarray(x)
    return 0.5 * sp.betainc(nu / 2.0, 0.5, nu / (nu + x * x))


@jax.custom_jvp
def _t_tail_jx(x, nu):
    return _t_tail_expr(x, nu, jnp)


@_t_tail_jx.defjvp
def _t_tail_jvp(primals, tangents):
    # betainc has no built-in derivative for its shape arguments, so the
    # dof direction uses a central difference; the x direction is the
    # (signed) t density, exact.
    x, nu = primals
    dx, dnu = tangents
    q = _t_tail_expr(x, nu, jnp)
    pdf = jnp.exp(t_logpdf(x, nu, jnp))
    dq_dx = jnp.where(x <= 0, pdf, -pdf)
    h = 1e-4 * nu
    dq_dnu = (_t_tail_expr(x, nu + h, jnp) - _t_tail_expr(x, nu - h, jnp)) / (2.0 * h)
    return q, dq_dx * dx + dq_dnu * dnu


def t_tail(x, nu, xp=np):
    if xp is jnp:
        return _t_tail_jx(x, nu)
    return _t_tail_expr(x, nu, np)


def t_cdf(x, nu, xp=np):
    q = t_tail(x, nu, xp=xp)
    return xp.where(xp.asarray(x) <= 0, q, 1.0 - q)


class GaussianFamily:
    """Location-scale normal; the composite layer reduces to (y - mu)/sigma."""

    name = "gaussian"
    n_local = 2
    n_shared = 0
    local_names = ("mu", "sigma")
    local_links = ("identity", "softplus")
    shared_names = ()
    shared_links = ()

    @staticmethod
    def constrain(raw, shared, xp=np):
        return (raw[..., 0], softplus(raw[..., 1], xp=xp))

    @staticmethod
    def unconstrain_moments(mean, sd):
        return np.stack((mean, softplus_inv(np.asarray(sd))), axis=-1), np.empty(0)

    @staticmethod
    def logpdf(y, params, xp=np):
        mu, sigma = params
        z = (xp.asarray(y) - mu) / sigma
        return norm_logpdf(z, xp=xp) - xp.log(sigma)

    @staticmethod
    def cdf(y, params, xp=np):
        mu, sigma = params
        return _special(xp).ndtr((xp.asarray(y) - mu) / sigma)

    @staticmethod
    def sf(y, params, xp=np):
        mu, sigma = params
        return _special(xp).ndtr(-(xp.asarray(y) - mu) / sigma)

    @staticmethod
    def normal_score(y, params, xp=np):
        mu, sigma = params
        return (xp.asarray(y) - mu) / sigma

    @staticmethod
    def from_normal_score(ytilde, params):
        mu, sigma = params
        return mu + sigma * np.asarray(ytilde)

    @staticmethod
    def quantile(p, params, ps=None):
        mu, sigma = params
        p = np.asarray(p, dtype=float)
        if ps is None:
            ps = 1.0 - p
        z = np.where(p <= 0.5, _sspecial.ndtri(np.clip(p, _PMIN, 0.6)),
                     -_sspecial.ndtri(np.clip(ps, _PMIN, 0.6)))
        return mu + sigma * z


class SkewT3Family:
    """Two-piece skew t: scaled t density on each side of mu.

    f(z) = 2/(alpha + 1/alpha) * t_nu(alpha z)        for z < 0
         = 2/(alpha + 1/alpha) * t_nu(z / alpha)      for z >= 0
    alpha = 1 restores the symmetric t; alpha > 1 skews right. The
    degrees of freedom nu are shared across locations.
    """

    name = "skew-t3"
    n_local = 3
    n_shared = 1
    local_names = ("mu", "sigma", "alpha")
    local_links = ("identity", "softplus", "softplus")
    shared_names = ("nu",)
    shared_links = ("softplus",)

    @staticmethod
    def constrain(raw, shared, xp=np):
        return (
            raw[..., 0],
            softplus(raw[..., 1], xp=xp),
            softplus(raw[..., 2], xp=xp),
            softplus(shared[..., 0], xp=xp),
        )

    @staticmethod
    def unconstrain_moments(mean, sd):
        # symmetric start: alpha = 1, nu = 10, scale matched so the
        # implied t standard deviation hits the sample sd
        nu0 = 10.0
        mean = np.asarray(mean, dtype=float)
        sigma = np.asarray(sd, dtype=float) * np.sqrt((nu0 - 2.0) / nu0)
        eta_alpha = np.full_like(mean, float(softplus_inv(1.0)))
        raw = np.stack((mean, softplus_inv(sigma), eta_alpha), axis=-1)
        return raw, np.array([float(softplus_inv(nu0))])

    @staticmethod
    def logpdf(y, params, xp=np):
        mu, sigma, alpha, nu = params
        z = (xp.asarray(y) - mu) / sigma
        arg = xp.where(z < 0, alpha * z, z / alpha)
        return (
            xp.log(2.0)
            - xp.log(alpha + 1.0 / alpha)
            - xp.log(sigma)
            + t_logpdf(arg, nu, xp=xp)
        )

    @staticmethod
    def cdf(y, params, xp=np):
        mu, sigma, alpha, nu = params
        z = (xp.asarray(y) - mu) / sigma
        a2 = alpha * alpha
        # left piece integrates exactly; right piece adds the scaled
        # central t mass accumulated past the mode
        left = 2.0 * t_cdf(alpha * z, nu, xp=xp) / (1.0 + a2)
        right = (1.0 + 2.0 * a2 * (t_cdf(z / alpha, nu, xp=xp) - 0.5)) / (1.0 + a2)
        return xp.where(z < 0, left, right)

    @staticmethod
    def sf(y, params, xp=np):
        mu, sigma, alpha, nu = params
        z = (xp.asarray(y) - mu) / sigma
        a2 = alpha * alpha
        left = 1.0 - 2.0 * t_cdf(alpha * z, nu, xp=xp) / (1.0 + a2)
        # t_tail is the t survival function for nonnegative arguments
        right = 2.0 * a2 * t_tail(z / alpha, nu, xp=xp) / (1.0 + a2)
        return xp.where(z < 0, left, right)

    @staticmethod
    def quantile(p, params, ps=None):
        mu, sigma, alpha, nu = (np.asarray(v, dtype=float) for v in params)
        p = np.asarray(p, dtype=float)
        if ps is None:
            ps = 1.0 - p
        a2 = alpha * alpha
        p0 = 1.0 / (1.0 + a2)
        lower = _sstats.t.ppf(np.clip(p * (1.0 + a2) / 2.0, 0.0, 1.0), nu) / alpha
        upper = alpha * _sstats.t.isf(
            np.clip(ps * (1.0 + a2) / (2.0 * a2), 0.0, 1.0), nu
        )
        z = np.where(p < p0, lower, upper)
        return mu + sigma * z

    @classmethod
    def from_normal_score(cls, ytilde, params):
        ytilde = np.asarray(ytilde, dtype=float)
        p = _sspecial.ndtr(ytilde)
        ps = _sspecial.ndtr(-ytilde)
        return cls.quantile(p, params, ps=ps)


FAMILIES = {f.name: f for f in (GaussianFamily, SkewT3Family)}


def get_family(name: str):
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValidationError(
            f"unknown family {name!r}; expected one of {sorted(FAMILIES)}"
        ) from None


@dataclass
class SaturationCounter:
    """Counts CDF evaluations clamped at the +-8.5 normal-score limit."""

    count: int = 0


@dataclass(frozen=True)
class ZetaField:
    """Unconstrained marginal parameters: per-location raw plus global shared."""

    family_name: str
    raw: np.ndarray  # (L, n_local)
    shared: np.ndarray  # (n_shared,)

    def __post_init__(self):
        fam = get_family(self.family_name)
        if self.raw.ndim != 2 or self.raw.shape[1] != fam.n_local:
            raise ValidationError(
                f"raw must be (L, {fam.n_local}) for family {fam.name}"
            )
        if self.shared.shape != (fam.n_shared,):
            raise ValidationError(f"shared must have length {fam.n_shared}")
        if not (np.all(np.isfinite(self.raw)) and np.all(np.isfinite(self.shared))):
            raise ValidationError("non-finite marginal parameters")

    @property
    def family(self):
        return get_family(self.family_name)

    def constrained(self, xp=np):
        return self.family.constrain(self.raw, self.shared, xp=xp)


def g_forward(y, params, family, xp=np, counter: SaturationCounter | None = None):
    """Normal score ndtri(F(y)), via the smaller of CDF and survival.

    Scores saturate at +-8.5; clamped points are tallied on ``counter``
    when given (numpy path only).
    """
    if family is GaussianFamily:
        return family.normal_score(y, params, xp=xp)
    cdf = family.cdf(y, params, xp=xp)
    sf = family.sf(y, params, xp=xp)
    if counter is not None and xp is np:
        counter.count += int(np.sum((cdf < _PMIN) | (sf < _PMIN)))
    sp = _special(xp)
    lo = sp.ndtri(xp.clip(cdf, _PMIN, 0.6))
    hi = -sp.ndtri(xp.clip(sf, _PMIN, 0.6))
    return xp.where(cdf <= 0.5, lo, hi)


def log_g_derivative(y, params, family, xp=np):
    """log of d g_forward / dy = log f(y) - log phi(g_forward(y))."""
    yt = g_forward(y, params, family, xp=xp)
    return family.logpdf(y, params, xp=xp) - norm_logpdf(yt, xp=xp)


def g_derivative(y, params, family, xp=np):
    return xp.exp(log_g_derivative(y, params, family, xp=xp))


def g_inverse(ytilde, params, family):
    """y with g_forward(y) = ytilde; numpy-only quantile path."""
    return family.from_normal_score(ytilde, params)
