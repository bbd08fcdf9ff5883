"""Joint flow + linear ICA model, its objective and trainer, and the
flow-only baseline with a factorised Laplace base density."""
import csv
import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .dists import gg_log_pdf, uniform_noise
from .errors import ConfigError, DimensionError, TrainingError
from .flow import FlowStack, SplineConfig, dequantize_preprocess
from .io import load_bjt, save_bjt
from .linear_ica import LinearICAModel, load_linear_ica, make_prior, save_linear_ica
from .nn import Module
from .optim import Adam
from .tensor import Tensor, no_grad

LN2 = math.log(2.0)
METRIC_COLUMNS = ("step", "loss", "elbo_z", "log_det", "kl", "rec_l1", "bpd")
INIT_SAMPLES = 1024


@dataclass
class BijectaConfig:
    model: str = "bijecta"
    d_s: int = 2
    n_layers: int = 1
    hidden: int = 128
    prior_rho: float = 1.0
    prior_alpha: float = None  # None: unit prior variance
    lr: float = 5e-4
    batch: int = 128
    steps: int = 2000
    seed: int = 0
    jl_seed: int = 0
    lambda_rec: float = 1.0
    knots: int = 4
    tail_bound: float = 3.0
    min_bin_width: float = 1e-3
    min_bin_height: float = 1e-3
    min_derivative: float = 1e-3
    ica_mode: str = "whitening_only"
    n_mc: int = 1
    sigma_init: float = 0.1
    # a narrow initial posterior keeps the sampled KL tame under peaked priors
    b_init: float = 0.1
    bits: int = 5
    eps: float = 0.05

    def spline(self):
        return SplineConfig(self.knots, self.tail_bound, self.min_bin_width,
                            self.min_bin_height, self.min_derivative)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class BijectaModel(Module):
    """Flow f (data -> z through ``flow.forward``) followed by a linear ICA
    head on the full z."""

    def __init__(self, d_x, cfg=None):
        cfg = cfg or BijectaConfig()
        if not 1 <= cfg.d_s <= d_x:
            raise DimensionError(f"need 1 <= d_s <= d_x, got d_s={cfg.d_s}, d_x={d_x}")
        if cfg.lambda_rec < 0:
            raise ConfigError("lambda_rec must be >= 0", key="lambda_rec")
        self.cfg = cfg
        self.flow = FlowStack(d_x, cfg.n_layers, cfg.hidden, cfg.seed, cfg.spline())
        prior = make_prior(cfg.prior_rho, cfg.prior_alpha)
        self.ica = LinearICAModel(cfg.d_s, d_x, prior, cfg.ica_mode, cfg.jl_seed, cfg.seed,
                                  cfg.sigma_init, b_init=cfg.b_init)
        self.lambda_rec = cfg.lambda_rec

    @property
    def d_x(self):
        return self.flow.dim

    @property
    def d_s(self):
        return self.ica.d_s

    @property
    def prior(self):
        return self.ica.prior

    def initialize(self, x):
        """Data-dependent start: actnorm statistics, then centre the head on
        the initial representation and fit its decoder by least squares."""
        self.flow.initialize(x)
        self.ica.init_from_data(self.embed(x))

    def terms(self, x, noise):
        """Per-row log-likelihood, KL and log-det, plus the posterior."""
        z, log_det = self.flow.forward(x)
        ll, kl, q = self.ica.elbo_terms(z, noise)
        return ll, kl, log_det, q

    def loss(self, x, noise):
        """-(ELBO_z + log|det|) + lambda_rec * L1, averaged over the batch.

        The L1 term is the per-point error summed over data dimensions,
        reconstructing through the posterior-mean sources.
        """
        x = T.as_tensor(x)
        ll, kl, log_det, q = self.terms(x, noise)
        elbo_z = T.mean(ll - kl)
        ld = T.mean(log_det)
        loss = -(elbo_z + ld)
        rec = None
        if self.lambda_rec:
            x_rec, _ = self.flow.inverse(self.ica.decode(q.loc))
            rec = T.mean(T.sum(T.abs(x - x_rec), axis=-1))
            loss = loss + self.lambda_rec * rec
        if not np.isfinite(loss.data):
            raise TrainingError("non-finite loss")
        metrics = {"loss": loss.item(), "elbo_z": elbo_z.item(), "log_det": ld.item(),
                   "kl": float(np.mean(kl.data)),
                   "rec_l1": float("nan") if rec is None else rec.item()}
        return loss, metrics

    def elbo_x(self, x, noise):
        """Per-row lower bound on log p(x)."""
        with no_grad():
            ll, kl, log_det, _ = self.terms(T.as_tensor(x), noise)
        return ll.data - kl.data + log_det.data

    def transform(self, x):
        """Posterior-mean sources."""
        with no_grad():
            z, _ = self.flow.forward(T.as_tensor(x))
            return self.ica.posterior(z).loc.data

    def embed(self, x):
        """The flow representation z = f^-1(x)."""
        with no_grad():
            return self.flow.forward(T.as_tensor(x))[0].data

    def inverse_transform(self, s):
        with no_grad():
            return self.flow.inverse(self.ica.decode(T.as_tensor(s)))[0].data

    def reconstruct(self, x):
        return self.inverse_transform(self.transform(x))


class FlowOnlyBaseline(Module):
    """The same flow trained by maximum likelihood under a factorised
    generalized Gaussian base (Laplace by default)."""

    def __init__(self, d_x, cfg=None):
        cfg = cfg or BijectaConfig(model="flow_only")
        self.cfg = cfg
        self.flow = FlowStack(d_x, cfg.n_layers, cfg.hidden, cfg.seed, cfg.spline())
        self.base = make_prior(cfg.prior_rho, cfg.prior_alpha)

    @property
    def d_x(self):
        return self.flow.dim

    def initialize(self, x):
        self.flow.initialize(x)

    def log_prob(self, x):
        z, log_det = self.flow.forward(T.as_tensor(x))
        return T.sum(gg_log_pdf(z, self.base), axis=-1) + log_det, log_det

    def loss(self, x, noise=None):
        lp, log_det = self.log_prob(x)
        loss = -T.mean(lp)
        if not np.isfinite(loss.data):
            raise TrainingError("non-finite loss")
        ld = float(np.mean(log_det.data))
        return loss, {"loss": loss.item(), "elbo_z": -loss.item() - ld, "log_det": ld,
                      "kl": float("nan"), "rec_l1": float("nan")}

    def elbo_x(self, x, noise=None):
        with no_grad():
            return self.log_prob(x)[0].data

    def embed(self, x):
        with no_grad():
            return self.flow.forward(T.as_tensor(x))[0].data


def build_model(d_x, cfg):
    if cfg.model == "bijecta":
        return BijectaModel(d_x, cfg)
    if cfg.model == "flow_only":
        return FlowOnlyBaseline(d_x, cfg)
    raise ConfigError(f"unknown model {cfg.model!r}", key="model")


# -- training -----------------------------------------------------------------
def bpd_from_elbo(elbo, d_x, log_det_pp=0.0):
    """Bits per dimension of a bound on log p(x), on the dequantised level scale."""
    return -(np.asarray(elbo) + log_det_pp) / (d_x * LN2)


def preprocess_images(images, cfg, rng):
    """Dequantise a batch of [0, 1] images with fresh uniform noise."""
    noise = rng.uniform(0.0, 1.0, size=np.shape(images))
    return dequantize_preprocess(images, cfg.bits, cfg.eps, noise=np.minimum(noise, 1 - 1e-12))


def midpoint_preprocess(images, cfg):
    """Deterministic preprocessing: every pixel sits at the centre of its level."""
    return dequantize_preprocess(images, cfg.bits, cfg.eps,
                                 noise=np.full(np.shape(images), 0.5))[0]


def train_bijecta(images, cfg=None, model=None, log_every=1, callback=None):
    """Train on images in [0, 1] (any shape with a leading batch axis).

    Each minibatch is dequantised with fresh noise.  Returns the model, whose
    ``trace`` holds one metric row per logged step (see ``METRIC_COLUMNS``).
    ``callback(model, metrics)`` runs after every logged step.  Raises
    ``TrainingError`` carrying the trace on divergence.
    """
    cfg = cfg or BijectaConfig()
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    if n < cfg.batch:
        raise ConfigError(f"need at least batch={cfg.batch} images, got {n}", key="batch")
    d_x = int(np.prod(images.shape[1:]))
    model = model or build_model(d_x, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    if not model.flow.initialized:
        init_idx = rng.choice(n, size=min(n, INIT_SAMPLES), replace=False)
        model.initialize(preprocess_images(images[init_idx], cfg, rng)[0])
    opt = Adam(model.parameters(), lr=cfg.lr, total_steps=cfg.steps)
    trace = []
    for step in range(cfg.steps):
        idx = rng.choice(n, size=cfg.batch, replace=False)
        x, log_det_pp = preprocess_images(images[idx], cfg, rng)
        noise = uniform_noise(rng, (cfg.n_mc, cfg.batch, getattr(model, "d_s", 1)))
        try:
            loss, metrics = model.loss(Tensor(x), noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
        except (TrainingError, ArithmeticError, ValueError) as exc:
            raise TrainingError(f"training diverged at step {step}: {exc}", step=step,
                                trace=trace) from exc
        if step % log_every == 0 or step == cfg.steps - 1:
            elbo = metrics["elbo_z"] + metrics["log_det"]
            metrics["bpd"] = float(bpd_from_elbo(elbo, d_x, log_det_pp))
            metrics["step"] = step
            trace.append(metrics)
            if callback is not None:
                callback(model, metrics)
    model.trace = trace
    return model


def bits_per_dim(model, images, cfg=None, seed=0, chunk=500):
    """Average bpd of a held-out image set under fixed dequantisation noise."""
    cfg = cfg or model.cfg
    rng = np.random.default_rng(seed)
    vals = []
    for start in range(0, len(images), chunk):
        x, log_det_pp = preprocess_images(images[start:start + chunk], cfg, rng)
        noise = uniform_noise(rng, (1, len(x), getattr(model, "d_s", 1)))
        vals.append(bpd_from_elbo(model.elbo_x(x, noise), x.shape[1], log_det_pp))
    return float(np.mean(np.concatenate(vals)))


def write_metrics_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in trace:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])


# -- generation -----------------------------------------------------------------
def to_images(model, x, shape):
    """Map preprocessed values back to [0, 1] pixel intensities."""
    cfg = model.cfg
    v = (np.asarray(x) - cfg.eps) / (1.0 - 2.0 * cfg.eps)
    return np.clip(v, 0.0, 1.0).reshape((-1,) + tuple(shape))


def sample(model, n, temperature=1.0, seed=0):
    """Decode sources drawn from the prior, scaled by ``temperature``."""
    rng = np.random.default_rng(seed)
    s = model.prior.sample((n, model.d_s), rng) * temperature
    return model.inverse_transform(s)


def traverse(model, x, dim, span=6.0, steps=7):
    """Vary source ``dim`` of the posterior mean of ``x`` over +-span prior std devs.

    Returns an array of shape ``(steps, d_x)``; ``span=0`` repeats the
    reconstruction of ``x``.
    """
    if not 0 <= dim < model.d_s:
        raise DimensionError(f"dim must lie in [0, {model.d_s}), got {dim}")
    s = model.transform(np.atleast_2d(x))[:1]
    offsets = np.linspace(-span, span, steps) * math.sqrt(model.prior.variance)
    grid = np.repeat(s, steps, axis=0)
    grid[:, dim] += offsets
    return model.inverse_transform(grid)


# -- checkpoints ---------------------------------------------------------------
def save_model(model, path):
    os.makedirs(path, exist_ok=True)
    flow_dir = os.path.join(path, "flow")
    os.makedirs(flow_dir, exist_ok=True)
    for name, arr in model.flow.state_dict().items():
        save_bjt(os.path.join(flow_dir, f"{name}.bjt"), np.asarray(arr, dtype=np.float64))
    with open(os.path.join(flow_dir, "manifest.json"), "w") as fh:
        json.dump(model.flow.architecture(), fh, indent=1, sort_keys=True)
    if isinstance(model, BijectaModel):
        save_linear_ica(model.ica, os.path.join(path, "ica"))
    with open(os.path.join(path, "config.json"), "w") as fh:
        json.dump(asdict(model.cfg), fh, indent=1, sort_keys=True)
    if getattr(model, "trace", None):
        write_metrics_csv(model.trace, os.path.join(path, "metrics.csv"))


def load_model(path):
    with open(os.path.join(path, "config.json")) as fh:
        cfg = BijectaConfig.from_dict(json.load(fh))
    with open(os.path.join(path, "flow", "manifest.json")) as fh:
        arch = json.load(fh)
    model = build_model(arch["dim"], cfg)
    state = {name: load_bjt(os.path.join(path, "flow", f"{name}.bjt"))
             for name in model.flow.state_dict()}
    model.flow.load_state_dict(state)
    if isinstance(model, BijectaModel):
        model.ica = load_linear_ica(os.path.join(path, "ica"))
    return model
