"""Config-driven orchestration shared by the command line: datasets,
training, checkpoints and the metrics report for any of the three models."""
import math
import os

import numpy as np

from .data import DatasetSpec
from .dists import gg_log_pdf
from .errors import ConfigError
from .eval import (MetricsReport, explained_variance, l1_recon_error, log_ps_per_dim, mcc,
                   total_correlation, whitened_projection)
from .linear_ica import (LinearICAModel, final_elbo, load_linear_ica, save_linear_ica,
                         train_linear_ica)
from .model import (BijectaModel, FlowOnlyBaseline, bits_per_dim, bpd_from_elbo, build_model,
                    load_model, midpoint_preprocess, save_model, train_bijecta)
from .tensor import no_grad

TC_SAMPLES = 2000


def dataset_spec(cfg):
    return DatasetSpec(cfg.dataset, cfg.n_data, cfg.canvas, cfg.data_seed, cfg.data_path)


def build_dataset(cfg):
    """Images in [0, 1] and the true sources (``None`` for files)."""
    images, sources = dataset_spec(cfg).build()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim < 2:
        raise ConfigError("a dataset needs a leading sample axis", key="dataset")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ConfigError("dataset values must lie in [0, 1]", key="dataset")
    return images, sources


def features(images, cfg):
    """The flat, deterministically preprocessed inputs every model sees at eval time."""
    return midpoint_preprocess(images, cfg)


def train(cfg, images):
    """Train the model selected by a resolved :class:`RunConfig`."""
    mcfg = cfg.model_config()
    if cfg.model == "linear_ica":
        return train_linear_ica(features(images, cfg), mcfg)
    d_x = int(np.prod(images.shape[1:]))
    return train_bijecta(images, mcfg, model=build_model(d_x, mcfg))


def save(model, path, cfg):
    os.makedirs(path, exist_ok=True)
    if isinstance(model, LinearICAModel):
        save_linear_ica(model, os.path.join(path, "ica"))
    else:
        save_model(model, path)
    with open(os.path.join(path, "run.cfg"), "w") as fh:
        fh.write(cfg.to_text())


def load(path, cfg):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"no checkpoint at {path}")
    if cfg.model == "linear_ica":
        return load_linear_ica(os.path.join(path, "ica"))
    return load_model(path)


def embedding(model, x):
    """The representation whose covariance spectrum is reported."""
    if isinstance(model, LinearICAModel):
        return x
    return model.embed(x)


def posterior_draws(model, x, seed=0):
    """One aggregate-posterior draw per row, plus component locations and log-scales.

    The flow-only baseline has no posterior; its top principal directions,
    whitened, stand in as sources and the scales are left to the estimator.
    """
    if isinstance(model, FlowOnlyBaseline):
        s = whitened_projection(model.embed(x), model.cfg.d_s)
        return s, None, None
    head = model.ica if isinstance(model, BijectaModel) else model
    z = model.embed(x) if isinstance(model, BijectaModel) else x
    loc, log_b = head.posterior_params(z)
    log_b = np.broadcast_to(log_b, loc.shape)
    rng = np.random.default_rng(seed)
    u = rng.uniform(-0.5, 0.5, size=loc.shape)
    draws = loc - np.exp(log_b) * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return draws, loc, log_b


def sources_of(model, x):
    if isinstance(model, FlowOnlyBaseline):
        return whitened_projection(model.embed(x), model.cfg.d_s)
    return model.transform(x)


def bpd(model, images, cfg, seed=0):
    if isinstance(model, LinearICAModel):
        x = features(images, cfg)
        d = x.shape[1]
        log_det_pp = d * (math.log(1.0 - 2.0 * cfg.eps) - cfg.bits * math.log(2.0))
        return float(bpd_from_elbo(final_elbo(model, x, n_mc=1, seed=seed), d, log_det_pp))
    return bits_per_dim(model, images, seed=seed)


def evaluate(model, images, sources, cfg, seed=0, tc_samples=TC_SAMPLES):
    """Every report metric on ``images``; ``mcc`` is NaN without true sources."""
    x = features(images, cfg)
    s = sources_of(model, x)
    keep = np.random.default_rng(seed).permutation(len(x))[:tc_samples]
    draws, loc, log_b = posterior_draws(model, x[keep], seed)
    tc = total_correlation(draws, loc, log_b, seed=seed)
    m = float("nan") if sources is None else mcc(sources, s)
    if isinstance(model, FlowOnlyBaseline):
        with no_grad():
            lps = float(np.mean(gg_log_pdf(model.embed(x), model.base).data))
        l1 = float("nan")
    else:
        lps = log_ps_per_dim(model, x)
        l1 = l1_recon_error(model, x)
    spec = explained_variance(embedding(model, x))
    return MetricsReport(tc=tc, mcc=m, log_ps_per_dim=lps, l1_recon=l1,
                         bpd=bpd(model, images, cfg, seed), explained_top=spec.top(cfg.d_s),
                         n_tc_samples=len(draws), explained_variance=spec)
