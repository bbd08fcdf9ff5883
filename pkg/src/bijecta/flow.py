"""Rational-quadratic spline flows on flat vectors.

Direction convention: ``forward`` maps data ``x`` to the representation
``z`` and returns log|det dz/dx|; ``inverse`` maps ``z`` back to ``x``.

A :class:`FlowStack` is a sequence of blocks ``ActNorm -> InvertibleMix ->
RQSCoupling -> InvertibleMix``.  After every block except the last, the
first half of the active dimensions is factored out; factored slices are
laid out in ``z`` in the order they were emitted, followed by the final
active slice.
"""
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, DomainError
from .nn import Module, ResidualNet, param
from .tensor import Tensor

DEFAULT_MIN = 1e-3


def _derivative_offset(min_derivative):
    # softplus(offset) + min_derivative == 1, so zero parameters give slope 1
    return math.log(math.expm1(1.0 - min_derivative))


def _bin_locations(unnormalized, tail_bound, min_size):
    k = unnormalized.shape[-1]
    if min_size * k > 1.0:
        raise ConfigError(f"minimum bin size {min_size} too large for {k} bins")
    frac = min_size + (1.0 - min_size * k) * T.softmax(unnormalized, axis=-1)
    cum = T.pad_constant(T.cumsum(frac, axis=-1), 1, 0, 0.0)
    cum = cum * (2.0 * tail_bound) - tail_bound
    # pin the ends exactly to the interval
    edge = np.zeros(cum.shape, dtype=bool)
    edge[..., 0] = edge[..., -1] = True
    pinned = np.zeros(cum.shape)
    pinned[..., 0], pinned[..., -1] = -tail_bound, tail_bound
    cum = T.where(edge, Tensor(pinned), cum)
    sizes = cum[..., 1:] - cum[..., :-1]
    return cum, sizes


def rqs(x, unnormalized_widths, unnormalized_heights, unnormalized_derivatives,
        inverse=False, tail_bound=3.0, min_bin_width=DEFAULT_MIN,
        min_bin_height=DEFAULT_MIN, min_derivative=DEFAULT_MIN):
    """Monotone rational-quadratic spline on [-B, B], identity outside.

    ``x`` has shape ``(..., D)``; widths and heights ``(..., D, K)``;
    interior derivatives ``(..., D, K - 1)``.  The two boundary derivatives
    are fixed to 1 so the linear tails join smoothly.  Returns the
    transformed values and the elementwise log|dy/dx| (of the map actually
    applied, i.e. of the inverse when ``inverse`` is set).
    """
    x = T.as_tensor(x)
    uw, uh, ud = (T.as_tensor(p) for p in
                  (unnormalized_widths, unnormalized_heights, unnormalized_derivatives))
    for p in (uw, uh, ud):
        if not np.all(np.isfinite(p.data)):
            raise DomainError("spline parameters contain NaN or inf")
    k = uw.shape[-1]
    if uh.shape[-1] != k or ud.shape[-1] != k - 1:
        raise DimensionError("spline parameter shapes disagree")
    inside = (x.data >= -tail_bound) & (x.data <= tail_bound)
    if not np.any(inside):
        return x, Tensor(np.zeros(x.shape))

    xin = T.where(inside, x, 0.0)
    cumw, widths = _bin_locations(uw, tail_bound, min_bin_width)
    cumh, heights = _bin_locations(uh, tail_bound, min_bin_height)
    offset = _derivative_offset(min_derivative)
    derivs = min_derivative + T.softplus(T.pad_constant(ud, 1, 1, 0.0) + offset)

    knots = cumh.data if inverse else cumw.data
    search = knots.copy()
    search[..., -1] += 1e-6
    idx = np.sum(xin.data[..., None] >= search, axis=-1, keepdims=True) - 1
    idx = np.clip(idx, 0, k - 1)

    def pick(t):
        return T.take_along_axis(t, idx, axis=-1)[..., 0]

    x_k, w_k = pick(cumw), pick(widths)
    y_k, h_k = pick(cumh), pick(heights)
    slope = h_k / w_k
    d_k = pick(derivs)
    d_k1 = T.take_along_axis(derivs, idx + 1, axis=-1)[..., 0]
    curv = d_k + d_k1 - 2.0 * slope

    if not inverse:
        theta = (xin - x_k) / w_k
        tt = theta * (1.0 - theta)
        denom = slope + curv * tt
        out = y_k + h_k * (slope * theta * theta + d_k * tt) / denom
    else:
        dy = xin - y_k
        a = dy * curv + h_k * (slope - d_k)
        b = h_k * d_k - dy * curv
        c = -slope * dy
        disc = b * b - 4.0 * a * c
        if np.any(disc.data < -1e-12):
            raise DomainError("spline inverse: negative discriminant")
        disc = T.where(disc.data > 0, disc, 0.0)
        theta = (2.0 * c) / (-b - T.sqrt(disc + 1e-300))
        # rounding can push the root just outside its bin
        theta = T.where(theta.data < 0.0, 0.0, T.where(theta.data > 1.0, 1.0, theta))
        tt = theta * (1.0 - theta)
        denom = slope + curv * tt
        out = x_k + theta * w_k
    dnum = slope * slope * (d_k1 * theta * theta + 2.0 * slope * tt
                            + d_k * (1.0 - theta) * (1.0 - theta))
    lad = T.log(dnum) - 2.0 * T.log(denom)
    if inverse:
        lad = -lad
    y = T.where(inside, out, x)
    return y, T.where(inside, lad, 0.0)


def rqs_forward(x, widths, heights, derivatives, **kw):
    return rqs(x, widths, heights, derivatives, inverse=False, **kw)


def rqs_inverse(y, widths, heights, derivatives, **kw):
    return rqs(y, widths, heights, derivatives, inverse=True, **kw)


@dataclass(frozen=True)
class SplineConfig:
    knots: int = 4
    tail_bound: float = 3.0
    min_bin_width: float = DEFAULT_MIN
    min_bin_height: float = DEFAULT_MIN
    min_derivative: float = DEFAULT_MIN

    def kwargs(self):
        return dict(tail_bound=self.tail_bound, min_bin_width=self.min_bin_width,
                    min_bin_height=self.min_bin_height, min_derivative=self.min_derivative)


class RQSCoupling(Module):
    """Leaves the first ``ceil(d/2)`` dims unchanged and splines the rest,
    with knots predicted from the unchanged part."""

    def __init__(self, dim, hidden, rng, spline=SplineConfig()):
        if dim < 2:
            raise DimensionError("a coupling layer needs at least 2 dimensions")
        self.dim = dim
        self.split_at = (dim + 1) // 2
        self.spline = spline
        k = spline.knots
        self.n_params = 3 * k - 1
        self.conditioner = ResidualNet(self.split_at, (dim - self.split_at) * self.n_params,
                                       hidden, rng)

    def _knots(self, cond):
        raw = self.conditioner(cond)
        raw = raw.reshape(cond.shape[0], self.dim - self.split_at, self.n_params)
        k = self.spline.knots
        return raw[..., :k], raw[..., k:2 * k], raw[..., 2 * k:]

    def _apply(self, x, inverse):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"coupling expects {self.dim} dims, got {x.shape[-1]}")
        keep, change = T.split(x, self.split_at)
        uw, uh, ud = self._knots(keep)
        out, lad = rqs(change, uw, uh, ud, inverse=inverse, **self.spline.kwargs())
        return T.concat([keep, out]), T.sum(lad, axis=-1)

    def forward(self, x):
        return self._apply(x, inverse=False)

    def inverse(self, y):
        return self._apply(y, inverse=True)


class ActNorm(Module):
    """Per-dimension affine map, initialised from the first batch it sees."""

    def __init__(self, dim, min_var=1e-2):
        # dims whose batch variance is tiny (e.g. pixels the batch never
        # covers) are not blown up; constant dims are left unscaled
        self.min_var = min_var
        self.shift = param(np.zeros(dim))
        self.log_scale = param(np.zeros(dim))
        self.initialized = np.zeros((), dtype=np.float64)

    @property
    def is_initialized(self):
        return bool(self.initialized)

    def initialize(self, x):
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        mean = data.mean(axis=0)
        var = data.var(axis=0)
        log_scale = np.where(var < 1e-8, 0.0, -0.5 * np.log(np.maximum(var, self.min_var)))
        self.shift.data = mean.copy()
        self.log_scale.data = log_scale
        self.initialized = np.ones((), dtype=np.float64)

    def forward(self, x):
        if not self.is_initialized:
            self.initialize(x)
        y = (x - self.shift) * T.exp(self.log_scale)
        return y, T.sum(self.log_scale) + Tensor(np.zeros(x.shape[0]))

    def inverse(self, y):
        if not self.is_initialized:
            raise ContractError("actnorm used in inverse before initialisation")
        x = y * T.exp(-self.log_scale) + self.shift
        return x, -T.sum(self.log_scale) + Tensor(np.zeros(y.shape[0]))


class InvertibleMix(Module):
    """Dense channel mix W = P L U with fixed permutation P, unit lower
    triangular L and upper triangular U whose diagonal is sign * exp(log_s).

    Off-diagonal entries are stored multiplied by sqrt(dim), so an optimiser
    step of fixed per-entry size changes a whole row by O(lr sqrt(dim))
    rather than O(lr dim).
    """

    def __init__(self, dim, rng, identity=False):
        self.dim = dim
        if identity:
            perm, lower, upper = np.arange(dim), np.eye(dim), np.eye(dim)
        else:
            q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            p, lower, upper = scipy.linalg.lu(q)
            perm = np.argmax(p, axis=1)
        diag = np.diag(upper)
        # Adam moves every stored entry by about lr, so shrink the applied step to
        # keep the change of a whole row independent of the width
        self._gain = 1.0 / math.sqrt(dim)
        self.perm = perm.astype(np.int64)
        self.sign = np.sign(diag)
        self.lower = param(np.tril(lower, -1) / self._gain)
        self.upper = param(np.triu(upper, 1) / self._gain)
        self.log_s = param(np.log(np.abs(diag)))
        self._eye = np.eye(dim)

    def _factors(self):
        lo = T.tril(self.lower, -1) * self._gain + Tensor(self._eye)
        up = T.triu(self.upper, 1) * self._gain + T.diag(Tensor(self.sign) * T.exp(self.log_s))
        return lo, up

    def weight(self):
        """The dense matrix W, with (P v)_i = v_{perm[i]}."""
        with T.no_grad():
            lo, up = self._factors()
            return (lo @ up).data[self.perm]

    def forward(self, x):
        lo, up = self._factors()
        h = x @ T.transpose(up)
        h = h @ T.transpose(lo)
        y = T.permute(h, self.perm)
        return y, T.sum(self.log_s) + Tensor(np.zeros(x.shape[0]))

    def inverse(self, y):
        lo, up = self._factors()
        v = T.permute(y, np.argsort(self.perm))
        w = T.solve_triangular(lo, T.transpose(v), lower=True, unit_diagonal=True)
        x = T.transpose(T.solve_triangular(up, w, lower=False))
        return x, -T.sum(self.log_s) + Tensor(np.zeros(y.shape[0]))


class FlowBlock(Module):
    def __init__(self, dim, hidden, rng, spline, identity_mix=False):
        self.actnorm = ActNorm(dim)
        self.mix_in = InvertibleMix(dim, rng, identity=identity_mix)
        self.coupling = RQSCoupling(dim, hidden, rng, spline)
        self.mix_out = InvertibleMix(dim, rng, identity=identity_mix)

    @property
    def layers(self):
        return [self.actnorm, self.mix_in, self.coupling, self.mix_out]

    def forward(self, x):
        total = None
        for layer in self.layers:
            x, ld = layer.forward(x)
            total = ld if total is None else total + ld
        return x, total

    def inverse(self, z):
        total = None
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z)
            total = ld if total is None else total + ld
        return z, total


def factor_schedule(dim, n_layers):
    """Dimensions emitted after each block and the active width of each block."""
    widths, emitted = [], []
    active = dim
    for i in range(n_layers):
        widths.append(active)
        k = active // 2 if i < n_layers - 1 and active - active // 2 >= 2 else 0
        emitted.append(k)
        active -= k
    return widths, emitted


class FlowStack(Module):
    """Composite bijection with factor-out after every block but the last."""

    def __init__(self, dim, n_layers=1, hidden=128, seed=0, spline=SplineConfig(),
                 identity_mix=False):
        if dim < 2:
            raise DimensionError("flows need at least 2 dimensions")
        if n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.n_layers = n_layers
        self.hidden = hidden
        self.seed = seed
        self.spline = spline
        self.widths, self.emitted = factor_schedule(dim, n_layers)
        self.blocks = [FlowBlock(w, hidden, rng, spline, identity_mix) for w in self.widths]

    @property
    def initialized(self):
        return all(b.actnorm.is_initialized for b in self.blocks)

    def forward(self, x):
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"flow expects (N, {self.dim}) input, got {x.shape}")
        outs = []
        total = None
        active = x
        for block, k in zip(self.blocks, self.emitted):
            active, ld = block.forward(active)
            total = ld if total is None else total + ld
            if k:
                out, active = T.split(active, k)
                outs.append(out)
        return T.concat(outs + [active]) if outs else active, total

    def inverse(self, z):
        """Map ``z`` back to data; returns ``(x, log|det dx/dz|)``."""
        z = T.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise DimensionError(f"flow expects (N, {self.dim}) input, got {z.shape}")
        if not self.initialized:
            raise ContractError("flow inverse used before actnorm initialisation")
        pieces = []
        rest = z
        for k in self.emitted:
            if k:
                piece, rest = T.split(rest, k)
                pieces.append(piece)
        active = rest
        total = None
        for block, k in zip(reversed(self.blocks), reversed(self.emitted)):
            if k:
                active = T.concat([pieces.pop(), active])
            active, ld = block.inverse(active)
            total = ld if total is None else total + ld
        return active, total

    def initialize(self, x):
        """Run one forward pass to trigger data-dependent actnorm initialisation."""
        with T.no_grad():
            self.forward(T.as_tensor(x))

    def architecture(self):
        return {
            "dim": self.dim, "n_layers": self.n_layers, "hidden": self.hidden,
            "seed": self.seed, "knots": self.spline.knots,
            "tail_bound": self.spline.tail_bound,
            "min_bin_width": self.spline.min_bin_width,
            "min_bin_height": self.spline.min_bin_height,
            "min_derivative": self.spline.min_derivative,
            "widths": list(self.widths), "emitted": list(self.emitted),
        }


def flow_forward(flow, x):
    return flow.forward(x)


def flow_inverse(flow, z):
    return flow.inverse(z)[0]


# -- image preprocessing ----------------------------------------------------
def _to_uint8(img):
    arr = np.asarray(img.data if isinstance(img, Tensor) else img)
    if arr.dtype == np.uint8:
        return arr
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise DomainError("image values must lie in [0, 255]")
    if arr.size and arr.max() <= 1.0:
        arr = arr * 255.0
    return np.rint(arr).astype(np.uint8)


def dequantize_preprocess(img, bits=5, eps=0.05, noise=None):
    """Quantize to ``bits``, dequantize with uniform noise and squeeze into [eps, 1 - eps].

    ``img`` holds 8-bit values (uint8, or floats in [0, 1] which are scaled
    to 0..255 first).  ``noise`` is uniform in [0, 1) in units of one
    quantization level, or ``None`` for zero noise.

    Returns ``(x, log_det_pp)``.  ``log_det_pp`` is the per-sample log
    Jacobian of the map from integer levels (plus noise) to ``x``:
    ``d_x * (log(1 - 2 eps) - bits * log 2)``.  Adding it to a density on
    ``x`` gives a density on the ``bits``-bit level scale, so bits-per-dim
    is measured against a ceiling of ``bits``.
    """
    if not (isinstance(bits, (int, np.integer)) and 1 <= bits <= 8):
        raise ConfigError(f"bits must be an integer in [1, 8], got {bits}", key="bits")
    if not 0 <= eps < 0.5:
        raise ConfigError(f"eps must lie in [0, 1/2), got {eps}", key="eps")
    arr = _to_uint8(img)
    levels = (arr >> (8 - bits)).astype(np.float64)
    u = np.zeros_like(levels) if noise is None else np.asarray(noise, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= 1):
        raise DomainError("dequantization noise must lie in [0, 1)")
    v = (levels + u) / 2 ** bits
    x = eps + (1.0 - 2.0 * eps) * v
    flat = x.reshape(len(x), -1) if x.ndim > 1 else x.reshape(1, -1)
    d = flat.shape[1]
    log_det = d * (math.log(1.0 - 2.0 * eps) - bits * math.log(2.0))
    return flat, log_det


def dequantize_inverse(x, bits=5, eps=0.05):
    """Recover the integer ``bits``-bit levels from preprocessed values."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    v = (x - eps) / (1.0 - 2.0 * eps)
    return np.clip(np.floor(v * 2 ** bits + 1e-9), 0, 2 ** bits - 1).astype(np.uint8)
