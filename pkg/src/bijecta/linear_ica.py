"""Non-square linear ICA with a variational Laplace posterior.

Generative model: s ~ prod_i GG(0, alpha, rho), z | s ~ N(A s, diag(sigma^2)).
Posterior: q(s | z) = Laplace(A+ z, b), where the unmixing map A+ is built
from a fixed sign sketch Q (optionally followed by learnable diagonal scales
and a Cayley rotation).
"""
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dists import (DiagonalGaussian, DiagonalLaplace, GeneralizedGaussian, gaussian_log_pdf,
                    gg_log_pdf, kl_q_to_prior, laplace_log_pdf, laplace_rsample, uniform_noise)
from .errors import ConfigError, DimensionError, TrainingError
from .io import load_bjt, save_bjt
from .nn import Module, param
from .optim import Adam
from .stiefel import cayley, sample_jl
from .tensor import Tensor

MODES = ("full", "whitening_only", "unconstrained")


class UnmixingMap(Module):
    """A+ = Phi R Lambda Q (``full``), A+ = Q (``whitening_only``) or a free
    matrix initialised at Q (``unconstrained``, only for ablations)."""

    def __init__(self, d_s, d_z, jl_seed=0, mode="full"):
        if mode not in MODES:
            raise ConfigError(f"unknown unmixing mode {mode!r}", key="ica_mode")
        self.mode = mode
        self.sketch = sample_jl(d_s, d_z, jl_seed)
        self.q = self.sketch.q
        self.jl_seed = jl_seed
        if mode == "full":
            self.log_lambda = param(np.zeros(d_s))
            self.l = param(np.zeros((d_s, d_s)))
            self.log_phi = param(np.zeros(d_s))
        elif mode == "unconstrained":
            self.w = param(np.array(self.q))

    @property
    def d_s(self):
        return self.q.shape[0]

    @property
    def d_z(self):
        return self.q.shape[1]

    def __call__(self, z):
        if self.mode == "unconstrained":
            return z @ T.transpose(self.w)
        s = z @ Tensor(self.q.T)
        if self.mode == "full":
            s = s * T.exp(self.log_lambda)
            s = s @ T.transpose(cayley(self.l))
            s = s * T.exp(self.log_phi)
        return s

    def matrix(self):
        """A+ as a dense ``d_s x d_z`` array."""
        with T.no_grad():
            return self(Tensor(np.eye(self.d_z))).data.T


class LinearICAModel(Module):
    def __init__(self, d_s, d_z, prior=GeneralizedGaussian(), mode="full", jl_seed=0,
                 seed=0, sigma_init=0.1, learn_sigma=True, b_init=1.0):
        if not 1 <= d_s <= d_z:
            raise DimensionError(f"need 1 <= d_s <= d_z, got d_s={d_s}, d_z={d_z}")
        rng = np.random.default_rng(seed)
        self.unmix = UnmixingMap(d_s, d_z, jl_seed, mode)
        # start from the transpose of the sketch, a near pseudo-inverse
        self.a = param(self.unmix.q.T + 0.01 * rng.normal(size=(d_z, d_s)))
        log_var = np.full(d_z, math.log(sigma_init ** 2))
        self.log_var = param(log_var) if learn_sigma else Tensor(log_var)
        self.log_b = param(np.full(d_s, math.log(b_init)))
        self.offset = np.zeros(d_z)
        # optional batch sphering of the data: z~ = (z - offset) @ pre.T
        self.set_sphering(np.eye(d_z), np.eye(d_z))
        self.prior = prior
        self.seed = seed
        self.trace = None

    @property
    def d_s(self):
        return self.unmix.d_s

    @property
    def d_z(self):
        return self.unmix.d_z

    def _check(self, z):
        z = T.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.d_z:
            raise DimensionError(f"expected (N, {self.d_z}) input, got {z.shape}")
        return z

    def _sphere(self, z):
        return (z - Tensor(self.offset)) @ Tensor(self.pre.T)

    def set_sphering(self, pre, pre_inv):
        self.pre = pre
        self.pre_inv = pre_inv
        self._log_det_pre = float(np.linalg.slogdet(pre)[1])

    @property
    def log_det_pre(self):
        return self._log_det_pre

    def posterior(self, z):
        z = self._check(z)
        loc = self.unmix(self._sphere(z))
        return DiagonalLaplace(loc, self.log_b + Tensor(np.zeros(loc.shape)))

    def decode(self, s):
        """Mean of p(z | s), in data coordinates."""
        return (T.as_tensor(s) @ T.transpose(self.a)) @ Tensor(self.pre_inv.T) + Tensor(self.offset)

    def likelihood(self, s):
        """p(z~ | s) on the sphered coordinates."""
        return DiagonalGaussian(T.as_tensor(s) @ T.transpose(self.a), self.log_var)

    def elbo_terms(self, z, noise):
        """Per-row expected log-likelihood and KL, averaged over the leading
        Monte Carlo axis of ``noise`` (shape ``(n_mc, N, d_s)``).  The
        likelihood includes the Jacobian of the sphering map, so it is a
        density on ``z``."""
        z = self._check(z)
        q = self.posterior(z)
        s = laplace_rsample(q, noise)
        ll = T.mean(gaussian_log_pdf(self._sphere(z), self.likelihood(s)), axis=0)
        kl = kl_q_to_prior(q, self.prior, n_mc=noise.shape[0], noise=noise)
        return ll + self.log_det_pre, kl, q

    def elbo_z(self, z, noise):
        ll, kl, _ = self.elbo_terms(z, noise)
        out = T.mean(ll - kl)
        if not np.isfinite(out.data):
            raise TrainingError("non-finite ELBO")
        return out

    def transform(self, z):
        """Posterior means, as an array."""
        with T.no_grad():
            return self.posterior(z).loc.data

    def inverse_transform(self, s):
        with T.no_grad():
            return self.decode(s).data

    def reconstruct(self, z):
        return self.inverse_transform(self.transform(z))

    def posterior_params(self, z):
        """Posterior locations and log-diversities as arrays."""
        with T.no_grad():
            q = self.posterior(z)
            return q.loc.data, q.log_b.data

    def init_from_data(self, z, sphere=False):
        """Centre (and optionally sphere) the data, rescale the sketched
        coordinates to unit variance and set A to the least-squares decoder.

        Sphering whitens the principal subspace of the data and leaves
        directions with negligible variance unscaled.
        """
        z = np.asarray(z, dtype=np.float64)
        self.offset = z.mean(axis=0)
        zc = z - self.offset
        if sphere:
            w, v = np.linalg.eigh(np.cov(zc, rowvar=False).reshape(self.d_z, self.d_z))
            scale = np.where(w > w.max() * 1e-10, 1.0 / np.sqrt(np.maximum(w, 1e-300)), 1.0)
            self.set_sphering((v * scale) @ v.T, (v / scale) @ v.T)
            zc = zc @ self.pre.T
        if self.unmix.mode == "full":
            proj = zc @ self.unmix.q.T
            self.unmix.log_lambda.data = -0.5 * np.log(np.maximum(proj.var(axis=0), 1e-12))
        elif self.unmix.mode == "unconstrained":
            proj = zc @ self.unmix.q.T
            self.unmix.w.data = self.unmix.q / np.sqrt(np.maximum(proj.var(axis=0), 1e-12))[:, None]
        s = zc @ self.unmix.matrix().T
        self.a.data = np.linalg.lstsq(s, zc, rcond=None)[0].T
        resid = (zc - s @ self.a.data.T).var(axis=0)
        if self.log_var.requires_grad:
            self.log_var.data = np.log(np.maximum(resid, np.exp(self.log_var.data)))


def log_evidence_is(model, z, n_samples=10000, rng=None, chunk=1000):
    """Importance-sampled log p(z) per row, using q(s | z) as the proposal."""
    rng = rng if rng is not None else np.random.default_rng(0)
    z = np.asarray(z, dtype=np.float64)
    out = []
    with T.no_grad():
        q = model.posterior(z)
        zs = model._sphere(Tensor(z)).data
        for row in range(len(z)):
            loc = DiagonalLaplace(Tensor(q.loc.data[row:row + 1]),
                                  Tensor(q.log_b.data[row:row + 1]))
            ws = []
            for start in range(0, n_samples, chunk):
                m = min(chunk, n_samples - start)
                s = laplace_rsample(loc, uniform_noise(rng, (m, 1, model.d_s)))
                log_w = (gaussian_log_pdf(Tensor(zs[row:row + 1]), model.likelihood(s))
                         + model.log_det_pre
                         + T.sum(gg_log_pdf(s, model.prior), axis=-1)
                         - T.sum(laplace_log_pdf(s, loc), axis=-1))
                ws.append(log_w.data.reshape(-1))
            w = np.concatenate(ws)
            top = w.max()
            out.append(top + math.log(np.mean(np.exp(w - top))))
    return np.array(out)


@dataclass
class LinearICAConfig:
    d_s: int = 2
    prior_rho: float = 1.0
    prior_alpha: float = None  # None: unit prior variance
    ica_mode: str = "full"
    lr: float = 1e-2
    batch: int = 128
    steps: int = 3000
    seed: int = 0
    jl_seed: int = 0
    n_mc: int = 1
    lambda_rec: float = 0.0
    sigma_init: float = 0.1
    b_init: float = 1.0
    learn_sigma: bool = True
    sphere: bool = True
    restarts: int = 1


def make_prior(rho, alpha=None):
    if alpha is None:
        return GeneralizedGaussian.unit_variance(rho)
    return GeneralizedGaussian(0.0, alpha, rho)


def build_linear_ica(d_z, cfg, jl_seed=None):
    jl_seed = cfg.jl_seed if jl_seed is None else jl_seed
    return LinearICAModel(cfg.d_s, d_z, make_prior(cfg.prior_rho, cfg.prior_alpha), cfg.ica_mode,
                          jl_seed, cfg.seed, cfg.sigma_init, cfg.learn_sigma, cfg.b_init)


def final_elbo(model, data, n_mc=4, seed=0):
    """ELBO on ``data`` under fixed noise; the restart selection criterion."""
    noise = uniform_noise(np.random.default_rng(seed), (n_mc, len(data), model.d_s))
    with T.no_grad():
        return model.elbo_z(data, noise).item()


def train_linear_ica(data, cfg=None, model=None):
    """Maximise the ELBO with Adam and cosine decay.

    The per-step ELBO is stored on ``model.trace``.  Minibatches and noise
    are drawn from a generator seeded by ``cfg.seed``.  With ``restarts > 1``
    one model is trained per sketch seed ``jl_seed, jl_seed + 1, ...`` and
    the one with the highest final ELBO on ``data`` is returned.
    """
    cfg = cfg or LinearICAConfig()
    data = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError(f"expected an (N, d_z) array, got {data.shape}")
    if len(data) < cfg.batch:
        raise ConfigError(f"need at least batch={cfg.batch} rows, got {len(data)}", key="batch")
    if cfg.restarts < 1:
        raise ConfigError("restarts must be >= 1", key="restarts")
    if model is not None:
        return _fit(model, data, cfg)
    best = None
    for k in range(cfg.restarts):
        cand = build_linear_ica(data.shape[1], cfg, jl_seed=cfg.jl_seed + k)
        cand.init_from_data(data, sphere=cfg.sphere)
        _fit(cand, data, cfg)
        cand.selection_elbo = final_elbo(cand, data)
        if best is None or cand.selection_elbo > best.selection_elbo:
            best = cand
    return best


def _fit(model, data, cfg):
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.parameters(), lr=cfg.lr, total_steps=cfg.steps)
    trace = np.zeros(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.choice(len(data), size=cfg.batch, replace=False)
        z = Tensor(data[idx])
        noise = uniform_noise(rng, (cfg.n_mc, cfg.batch, model.d_s))
        try:
            ll, kl, q = model.elbo_terms(z, noise)
            elbo = T.mean(ll - kl)
            loss = -elbo
            if cfg.lambda_rec:
                loss = loss + cfg.lambda_rec * T.mean(T.sum(T.abs(model.decode(q.loc) - z), axis=-1))
            if not np.isfinite(loss.data):
                raise TrainingError("non-finite loss", step=step, trace=trace[:step])
            opt.zero_grad()
            loss.backward()
            opt.step()
        except (ArithmeticError, ValueError) as exc:
            raise TrainingError(f"training diverged: {exc}", step=step, trace=trace[:step]) from exc
        trace[step] = elbo.data
    model.trace = trace
    return model


# -- checkpoints -------------------------------------------------------------
def save_linear_ica(model, path):
    os.makedirs(path, exist_ok=True)
    u = model.unmix
    tensors = {"a": model.a.data, "log_var": model.log_var.data, "log_b": model.log_b.data,
               "q": u.q, "offset": model.offset, "pre": model.pre, "pre_inv": model.pre_inv,
               "seeds": np.array([u.jl_seed, model.seed], dtype=np.float64)}
    if u.mode == "full":
        tensors.update(l=u.l.data, log_lambda=u.log_lambda.data, log_phi=u.log_phi.data)
    elif u.mode == "unconstrained":
        tensors["w"] = u.w.data
    for name, arr in tensors.items():
        save_bjt(os.path.join(path, f"{name}.bjt"), np.asarray(arr, dtype=np.float64))
    lines = [f"d_s={model.d_s}", f"d_z={model.d_z}", f"prior_rho={model.prior.rho!r}",
             f"prior_alpha={model.prior.alpha!r}", f"mode={u.mode}",
             f"learn_sigma={int(model.log_var.requires_grad)}"]
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_linear_ica(path):
    meta = {}
    with open(os.path.join(path, "manifest.txt")) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.strip().split("=", 1)
                meta[k] = v
    get = lambda name: load_bjt(os.path.join(path, f"{name}.bjt"))  # noqa: E731
    jl_seed, seed = (int(v) for v in get("seeds"))
    prior = GeneralizedGaussian(0.0, float(meta["prior_alpha"]), float(meta["prior_rho"]))
    model = LinearICAModel(int(meta["d_s"]), int(meta["d_z"]), prior, meta["mode"], jl_seed,
                           seed, learn_sigma=bool(int(meta.get("learn_sigma", "1"))))
    if not np.array_equal(model.unmix.q, get("q")):
        raise ConfigError("stored sketch does not match its seed", key="jl_seed")
    model.a.data = get("a")
    model.log_var.data = get("log_var")
    model.log_b.data = get("log_b")
    model.offset = get("offset")
    model.set_sphering(get("pre"), get("pre_inv"))
    u = model.unmix
    if u.mode == "full":
        u.l.data, u.log_lambda.data, u.log_phi.data = get("l"), get("log_lambda"), get("log_phi")
    elif u.mode == "unconstrained":
        u.w.data = get("w")
    return model
