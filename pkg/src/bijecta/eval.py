"""Evaluation metrics: total correlation, explained-variance spectra, mean
correlation coefficient, prior log-density of embeddings, reconstruction
error and sampling from a factorised aggregate posterior."""
import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp
from scipy.stats import norm, rankdata

from .dists import gg_log_pdf
from .errors import ConfigError, DimensionError
from .tensor import no_grad


def _array(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


# -- total correlation -------------------------------------------------------
def _component_logpdf(points, loc, scale, family):
    """log N(points | loc, scale) (or Laplace) per dimension, shape (P, C, d)."""
    diff = (points[:, None, :] - loc[None]) / scale[None]
    if family == "gaussian":
        return -0.5 * diff ** 2 - np.log(scale)[None] - 0.5 * math.log(2 * math.pi)
    return -np.abs(diff) - np.log(2 * scale)[None]


def total_correlation(samples, loc=None, log_scale=None, family="laplace", max_components=5000,
                      seed=0, chunk=500):
    """KL(r(s) || prod_i r(s_i)) in nats, for an aggregate posterior r.

    r is the mixture of per-datapoint components: Laplace (or Gaussian)
    densities with locations ``loc`` and log-scales ``log_scale``, one row
    per datapoint; ``samples`` holds one draw from each component.  The
    expectation over r and the mixture densities are both estimated on the
    same (optionally subsampled) set, so joint and marginal terms share one
    estimator.  This is the minibatch-weighted estimate with the whole set as
    the batch; it runs high when components barely overlap.

    Without ``loc`` the samples are treated as draws of a deterministic
    representation: each marginal is mapped to normal scores through its
    ranks (TC is unchanged by monotone maps of single coordinates), then a
    Gaussian kernel density of Scott-rule width is used, leaving each point
    out of its own estimate.
    """
    s = _array(samples)
    if s.ndim != 2:
        raise DimensionError(f"expected (N, d) samples, got {s.shape}")
    n, d = s.shape
    if d < 2:
        return 0.0
    loo = loc is None
    if loo:
        s = norm.ppf((rankdata(s, axis=0) - 0.5) / n)
        loc = s
        sd = s.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        scale = np.broadcast_to(sd * n ** (-1.0 / (d + 4)), s.shape)
        family = "gaussian"
    else:
        loc = _array(loc)
        scale = np.broadcast_to(np.exp(_array(log_scale)), loc.shape)
    if family not in ("laplace", "gaussian"):
        raise ConfigError(f"unknown component family {family!r}")
    if n > max_components:
        keep = np.sort(np.random.default_rng(seed).choice(n, max_components, replace=False))
        s, loc, scale = s[keep], loc[keep], scale[keep]
        n = max_components
    joint = np.empty(n)
    marg = np.empty((n, d))
    for start in range(0, n, chunk):
        lp = _component_logpdf(s[start:start + chunk], loc, scale, family)
        if loo:
            rows = np.arange(len(lp))
            lp[rows, start + rows] = -np.inf
        m = n - 1 if loo else n
        joint[start:start + chunk] = logsumexp(lp.sum(axis=-1), axis=1) - math.log(m)
        marg[start:start + chunk] = logsumexp(lp, axis=1) - math.log(m)
    return float(np.mean(joint - marg.sum(axis=1)))


def histogram_tc(samples, bins=32):
    """Plug-in TC of a 2-D sample from its joint histogram (brute-force oracle)."""
    s = _array(samples)
    if s.shape[1] != 2:
        raise DimensionError("histogram_tc handles 2-D samples only")
    h, _, _ = np.histogram2d(s[:, 0], s[:, 1], bins=bins)
    return discrete_tc(h / h.sum())


def discrete_tc(pmf):
    """Exact KL(p || p_1 p_2) for a 2-D probability table."""
    p = np.asarray(pmf, dtype=np.float64)
    outer = np.outer(p.sum(axis=1), p.sum(axis=0))
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / outer[mask])))


# -- explained variance -------------------------------------------------------
@dataclass
class Spectrum:
    eigenvalues: np.ndarray
    cumulative: np.ndarray
    warnings: list = field(default_factory=list)

    def top(self, k):
        return float(self.cumulative[k - 1])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "eigenvalue", "cumulative_fraction"])
            for i, (ev, c) in enumerate(zip(self.eigenvalues, self.cumulative)):
                w.writerow([i, repr(float(ev)), repr(float(c))])


def explained_variance(z):
    z = _array(z)
    n, d = z.shape
    warnings = []
    if n <= d:
        warnings.append(f"rank-deficient: N={n} <= d={d}")
    ev = np.linalg.eigvalsh(np.cov(z, rowvar=False).reshape(d, d))[::-1]
    ev = np.clip(ev, 0.0, None)
    total = ev.sum()
    cum = np.cumsum(ev) / total if total > 0 else np.ones(d)
    cum[-1] = 1.0
    return Spectrum(ev, cum, warnings)


def whitened_projection(x, k):
    """Project rows of ``x`` onto their top-``k`` principal axes, scaled to unit variance."""
    x = _array(x)
    xc = x - x.mean(axis=0)
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    if k > len(sv):
        raise DimensionError(f"cannot keep {k} components of rank-{len(sv)} data")
    scale = sv[:k] / math.sqrt(max(len(x) - 1, 1))
    return (xc @ vt[:k].T) / np.where(scale > 0, scale, 1.0)


# -- mean correlation coefficient -------------------------------------------
def _abs_corr(a, b):
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    c = a.T @ b
    denom = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(denom > 0, np.abs(c) / np.where(denom > 0, denom, 1.0), 0.0)
    return c


def mcc(true_sources, recovered):
    """Mean |Pearson correlation| under the best one-to-one assignment.

    With unequal numbers of columns, the smaller set is matched into the larger.
    """
    a, b = _array(true_sources), _array(recovered)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"source arrays differ in length: {a.shape} vs {b.shape}")
    c = _abs_corr(a, b)
    rows, cols = linear_sum_assignment(c, maximize=True)
    return float(c[rows, cols].mean())


def rotation_null_mcc(true_sources, recovered, n_draws=1000, seed=0):
    """MCC of ``true_sources`` against random rotations of ``recovered``.

    When sources are unidentifiable the recovered representation is an
    arbitrary rotation of itself, so a trained MCC should look like a draw
    from this distribution.
    """
    a, b = _array(true_sources), _array(recovered)
    b = b - b.mean(axis=0)
    rng = np.random.default_rng(seed)
    out = np.empty(n_draws)
    for i in range(n_draws):
        q, r = np.linalg.qr(rng.normal(size=(b.shape[1],) * 2))
        out[i] = mcc(a, b @ (q * np.sign(np.diag(r))))
    return out


def null_percentile(value, null):
    """Fraction of the null strictly below ``value``, with half weight on ties."""
    null = np.asarray(null)
    return float((np.sum(null < value) + 0.5 * np.sum(null == value)) / len(null))


# -- model-level metrics ------------------------------------------------------
def log_ps_per_dim(model, data):
    """Mean prior log-density of posterior-mean embeddings, per source dim."""
    s = model.transform(data)
    with no_grad():
        return float(np.mean(gg_log_pdf(s, model.prior).data))


def l1_recon_error(model, data):
    """Mean per-element L1 error of the round trip through the sources."""
    x = _array(data)
    return float(np.mean(np.abs(model.reconstruct(x) - x)))


def factorised_posterior_sample(model, data, n, bins=64, seed=0, return_sources=False):
    """Decode draws from independent per-dimension histograms of the posterior means."""
    if n <= 0:
        raise ConfigError(f"n must be positive, got {n}", key="n")
    s = model.transform(data)
    draws = sample_histograms(s, n, bins, seed)
    out = model.inverse_transform(draws)
    return (out, draws) if return_sources else out


def sample_histograms(s, n, bins=64, seed=0):
    rng = np.random.default_rng(seed)
    draws = np.empty((n, s.shape[1]))
    for j in range(s.shape[1]):
        lo, hi = s[:, j].min(), s[:, j].max()
        if hi <= lo:
            draws[:, j] = lo
            continue
        counts, edges = np.histogram(s[:, j], bins=bins, range=(lo, hi))
        which = rng.choice(bins, size=n, p=counts / counts.sum())
        draws[:, j] = rng.uniform(edges[which], edges[which + 1])
    return draws


@dataclass
class MetricsReport:
    tc: float
    mcc: float
    log_ps_per_dim: float
    l1_recon: float
    bpd: float
    explained_top: float
    n_tc_samples: int
    explained_variance: Spectrum = None

    FIELDS = ("tc", "mcc", "bpd", "l1_recon", "log_ps_per_dim", "explained_top", "n_tc_samples")

    def row(self):
        d = asdict(self)
        return [repr(float(d[k])) if k != "n_tc_samples" else str(d[k]) for k in self.FIELDS]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            w.writerow(self.row())
