"""Densities used by the ICA model: generalized Gaussian priors, a diagonal
Gaussian likelihood and a diagonal Laplace posterior.

Special functions (log-gamma, the regularized incomplete gamma and its
inverse) are implemented here directly so the module depends on numpy only.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)

# Lanczos coefficients, g = 7, n = 9
_LANCZOS_G = 7.0
_LANCZOS = (
    0.99999999999980993, 676.5203681218851, -1259.1392167224028,
    771.32342877765313, -176.61502916214059, 12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7,
)


def lgamma(x):
    """log |Gamma(x)| for x > 0 via the Lanczos approximation."""
    x = float(x)
    if not x > 0:
        raise DomainError(f"lgamma needs x > 0, got {x}")
    if x < 0.5:
        # reflection keeps the series in its accurate range
        return math.log(math.pi / math.sin(math.pi * x)) - lgamma(1.0 - x)
    x -= 1.0
    acc = _LANCZOS[0]
    for i, c in enumerate(_LANCZOS[1:], start=1):
        acc += c / (x + i)
    t = x + _LANCZOS_G + 0.5
    return 0.5 * LOG_2PI + (x + 0.5) * math.log(t) - t + math.log(acc)


def gammainc(a, x):
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise DomainError("gammainc needs a > 0")
    if x <= 0:
        return 0.0
    log_pref = -x + a * math.log(x) - lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(1000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return min(1.0, total * math.exp(log_pref))
    # Lentz continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return max(0.0, 1.0 - math.exp(log_pref) * h)


def gammaincinv(a, p):
    """Inverse of :func:`gammainc` in its second argument.

    Safeguarded Newton iteration on log x, started from the leading series
    term (accurate for small p) and bracketed by bisection.
    """
    if not 0.0 <= p < 1.0:
        raise DomainError(f"gammaincinv needs p in [0, 1), got {p}")
    if p == 0.0:
        return 0.0
    lg = lgamma(a)
    lo, hi = -800.0, math.log(max(1.0, a))
    while gammainc(a, math.exp(hi)) < p:
        hi += 1.0
    t = (math.log(p) + lgamma(a + 1.0)) / a
    if not lo < t < hi:
        t = 0.5 * (lo + hi)
    for _ in range(300):
        x = math.exp(t)
        f = gammainc(a, x) - p
        if f > 0:
            hi = t
        else:
            lo = t
        # dP/dt = x * density(x)
        slope = math.exp(-x + a * t - lg)
        step = f / slope if slope > 0 else float("inf")
        if abs(step) < 1e-15:
            return math.exp(t - step)
        nxt = t - step
        t = nxt if lo < nxt < hi else 0.5 * (lo + hi)
        if hi - lo < 1e-15:
            break
    return math.exp(t)


@dataclass(frozen=True)
class GeneralizedGaussian:
    """Density rho / (2 alpha Gamma(1/rho)) * exp(-(|x - mu| / alpha) ** rho)."""

    mu: float = 0.0
    alpha: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.alpha > 0 and self.rho > 0
                and np.isfinite(self.alpha) and np.isfinite(self.rho)):
            raise DomainError(f"invalid generalized Gaussian {self}")

    @property
    def log_norm(self):
        return math.log(self.rho / (2.0 * self.alpha)) - lgamma(1.0 / self.rho)

    @classmethod
    def unit_variance(cls, rho, mu=0.0):
        """The member of the family with shape ``rho`` and variance 1."""
        return cls(mu, math.exp(0.5 * (lgamma(1.0 / rho) - lgamma(3.0 / rho))), rho)

    @property
    def variance(self):
        return self.alpha ** 2 * math.exp(lgamma(3.0 / self.rho) - lgamma(1.0 / self.rho))

    def sample(self, shape, rng):
        """Inverse-CDF draws: (|x - mu| / alpha) ** rho is Gamma(1/rho, 1)."""
        u = rng.uniform(size=shape)
        flat = np.abs(2.0 * u - 1.0).reshape(-1)
        a = 1.0 / self.rho
        mag = np.array([gammaincinv(a, min(p, 1.0 - 1e-16)) for p in flat]).reshape(u.shape)
        return self.mu + np.sign(u - 0.5) * self.alpha * mag ** (1.0 / self.rho)


@dataclass
class DiagonalGaussian:
    mean: Tensor
    log_var: Tensor

    @property
    def variance(self):
        return T.exp(self.log_var)


@dataclass
class DiagonalLaplace:
    loc: Tensor
    log_b: Tensor

    @property
    def diversity(self):
        return T.exp(self.log_b)


def gg_log_pdf(x, p):
    """Elementwise log-density of a generalized Gaussian."""
    x = T.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise DomainError("gg_log_pdf: non-finite input")
    r = T.abs(x - p.mu) / p.alpha
    return p.log_norm - r ** p.rho


def laplace_log_pdf(x, q):
    x = T.as_tensor(x)
    return -math.log(2.0) - q.log_b - T.abs(x - q.loc) / T.exp(q.log_b)


def laplace_rsample(q, noise):
    """Reparameterized Laplace draw from uniform ``noise`` in (-1/2, 1/2).

    ``noise`` may carry extra leading axes (e.g. Monte Carlo samples); it
    broadcasts against ``q.loc``.
    """
    u = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if np.any(np.abs(u) >= 0.5):
        raise DomainError("Laplace noise must lie strictly inside (-1/2, 1/2)")
    eps = -np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return q.loc + T.exp(q.log_b) * Tensor(eps)


def gaussian_log_pdf(z, p):
    """Row log-density of a diagonal Gaussian, summed over the last axis."""
    z = T.as_tensor(z)
    try:
        shape = np.broadcast_shapes(z.shape, p.mean.shape, p.log_var.shape)
    except ValueError as exc:
        raise DimensionError(f"gaussian_log_pdf: {z.shape} vs {p.mean.shape}") from exc
    if shape[-1] != z.shape[-1]:
        raise DimensionError(f"gaussian_log_pdf: {z.shape} vs {p.mean.shape}")
    diff = z - p.mean
    per_dim = -0.5 * LOG_2PI - 0.5 * p.log_var - diff * diff / (2.0 * T.exp(p.log_var))
    return T.sum(per_dim, axis=-1)


def kl_laplace_standard(q, prior):
    """Closed form KL(Laplace(loc, b) || Laplace(mu, alpha)) per row."""
    m = T.abs(q.loc - prior.mu)
    b = T.exp(q.log_b)
    a = prior.alpha
    per_dim = m / a + (b / a) * T.exp(-m / b) + math.log(a) - q.log_b - 1.0
    return T.sum(per_dim, axis=-1)


def kl_q_to_prior(q, prior, n_mc=1, noise=None, rng=None):
    """KL(q || prod_i prior) per row, summed over source dimensions.

    Uses the closed form when the prior is a Laplace, otherwise a
    reparameterized Monte Carlo average over ``n_mc`` draws.  ``noise``, when
    given, has shape ``(n_mc,) + loc.shape``; otherwise it is drawn from ``rng``.
    """
    if not isinstance(prior, GeneralizedGaussian):
        raise DomainError("prior must be a GeneralizedGaussian")
    if n_mc < 1:
        raise DomainError("n_mc must be >= 1")
    if prior.rho == 1.0:
        return kl_laplace_standard(q, prior)
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = uniform_noise(rng, (n_mc,) + q.loc.shape)
    s = laplace_rsample(q, noise)
    log_ratio = laplace_log_pdf(s, q) - gg_log_pdf(s, prior)
    return T.mean(T.sum(log_ratio, axis=-1), axis=0)


def uniform_noise(rng, shape):
    """Uniform draws in the open interval (-1/2, 1/2)."""
    u = rng.uniform(-0.5, 0.5, size=shape)
    return np.clip(u, -0.5 + 1e-12, 0.5 - 1e-12)
