"""scikit-learn style wrappers around the linear ICA model, the joint
flow + ICA model and the flow-only baseline."""
from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DimensionError
from .linear_ica import LinearICAConfig, final_elbo, train_linear_ica
from .model import BijectaConfig, bits_per_dim, build_model, midpoint_preprocess, to_images, \
    train_bijecta


def _check_features(est, X):
    if X.shape[1] != est.n_features_in_:
        raise DimensionError(f"X has {X.shape[1]} features, but {type(est).__name__} "
                             f"was fitted with {est.n_features_in_}")
    return X


def _check_images(X, est=None):
    """Accept ``(n, d)`` or ``(n, h, w[, c])`` arrays of values in [0, 1]."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_min_samples=1)
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    if est is not None:
        if int(np.prod(X.shape[1:])) != est.n_features_in_:
            raise DimensionError(f"expected images with {est.n_features_in_} values, "
                                 f"got shape {X.shape[1:]}")
    return X


class LinearICA(TransformerMixin, BaseEstimator):
    """Variational linear ICA with a sketched, constrained unmixing map.

    Parameters mirror :class:`LinearICAConfig`; ``n_components`` is the
    number of sources and ``random_state`` seeds initialisation and
    minibatching.

    Attributes
    ----------
    model_ : LinearICAModel
    mixing_ : ndarray of shape (n_features, n_components)
        Decoder columns in data coordinates.
    components_ : ndarray of shape (n_components, n_features)
        The unmixing map applied to centred data.
    """

    def __init__(self, n_components=2, prior_rho=1.0, prior_alpha=None, ica_mode="full",
                 lr=1e-2, batch=128, steps=3000, n_mc=1, lambda_rec=0.0, sigma_init=0.1,
                 learn_sigma=True, sphere=True, restarts=1, jl_seed=0, random_state=0):
        self.n_components = n_components
        self.prior_rho = prior_rho
        self.prior_alpha = prior_alpha
        self.ica_mode = ica_mode
        self.lr = lr
        self.batch = batch
        self.steps = steps
        self.n_mc = n_mc
        self.lambda_rec = lambda_rec
        self.sigma_init = sigma_init
        self.learn_sigma = learn_sigma
        self.sphere = sphere
        self.restarts = restarts
        self.jl_seed = jl_seed
        self.random_state = random_state

    def _config(self):
        return LinearICAConfig(
            d_s=self.n_components, prior_rho=self.prior_rho, prior_alpha=self.prior_alpha,
            ica_mode=self.ica_mode, lr=self.lr, batch=self.batch, steps=self.steps,
            seed=self.random_state, jl_seed=self.jl_seed, n_mc=self.n_mc,
            lambda_rec=self.lambda_rec, sigma_init=self.sigma_init,
            learn_sigma=self.learn_sigma, sphere=self.sphere, restarts=self.restarts)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        self.model_ = train_linear_ica(X, self._config())
        m = self.model_
        self.mixing_ = m.pre_inv @ m.a.data
        self.components_ = m.unmix.matrix() @ m.pre
        self.trace_ = m.trace
        return self

    def transform(self, X):
        """Posterior-mean sources."""
        check_is_fitted(self, "model_")
        X = _check_features(self, check_array(X, dtype=np.float64))
        return self.model_.transform(X)

    def inverse_transform(self, S):
        check_is_fitted(self, "model_")
        S = check_array(S, dtype=np.float64)
        if S.shape[1] != self.n_components:
            raise DimensionError(f"expected {self.n_components} sources, got {S.shape[1]}")
        return self.model_.inverse_transform(S)

    def score(self, X, y=None):
        """Mean ELBO per row (a lower bound on the average log-likelihood)."""
        check_is_fitted(self, "model_")
        X = _check_features(self, check_array(X, dtype=np.float64))
        return final_elbo(self.model_, X, seed=self.random_state)


class _ImageModel(TransformerMixin, BaseEstimator):
    _model_kind = "bijecta"

    def _config(self):
        names = {f.name for f in fields(BijectaConfig)}
        kw = {k: v for k, v in self.get_params().items() if k in names}
        kw["seed"] = self.random_state
        kw["model"] = self._model_kind
        if "n_components" in self.get_params():
            kw["d_s"] = self.n_components
        return BijectaConfig(**kw)

    def fit(self, X, y=None):
        X = _check_images(X)
        self.image_shape_ = X.shape[1:]
        self.n_features_in_ = int(np.prod(self.image_shape_))
        cfg = self._config()
        self.model_ = train_bijecta(X, cfg, model=build_model(self.n_features_in_, cfg))
        self.trace_ = self.model_.trace
        return self

    def _preprocess(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X, self)
        return midpoint_preprocess(X, self.model_.cfg)

    def embed(self, X):
        """Flow representation of images, before the linear head."""
        return self.model_.embed(self._preprocess(X))

    def score(self, X, y=None):
        """Negative bits per dimension (higher is better)."""
        check_is_fitted(self, "model_")
        X = _check_images(X, self)
        return -bits_per_dim(self.model_, X, seed=self.random_state)


class Bijecta(_ImageModel):
    """Spline flow trained jointly with a linear ICA head on its output.

    ``fit`` takes images with values in [0, 1], shaped ``(n, h, w)``,
    ``(n, h, w, c)`` or already flattened.  ``transform`` returns
    posterior-mean sources of shape ``(n, n_components)``.
    """

    _model_kind = "bijecta"

    def __init__(self, n_components=2, n_layers=1, hidden=128, prior_rho=1.0, prior_alpha=None,
                 lr=5e-4, batch=128, steps=2000, lambda_rec=1.0, knots=4, tail_bound=3.0,
                 ica_mode="whitening_only", n_mc=1, sigma_init=0.1, b_init=0.1, bits=5,
                 eps=0.05, jl_seed=0, random_state=0):
        self.n_components = n_components
        self.n_layers = n_layers
        self.hidden = hidden
        self.prior_rho = prior_rho
        self.prior_alpha = prior_alpha
        self.lr = lr
        self.batch = batch
        self.steps = steps
        self.lambda_rec = lambda_rec
        self.knots = knots
        self.tail_bound = tail_bound
        self.ica_mode = ica_mode
        self.n_mc = n_mc
        self.sigma_init = sigma_init
        self.b_init = b_init
        self.bits = bits
        self.eps = eps
        self.jl_seed = jl_seed
        self.random_state = random_state

    def transform(self, X):
        return self.model_.transform(self._preprocess(X))

    def inverse_transform(self, S):
        """Decode sources to images in [0, 1]."""
        check_is_fitted(self, "model_")
        S = check_array(S, dtype=np.float64)
        if S.shape[1] != self.n_components:
            raise DimensionError(f"expected {self.n_components} sources, got {S.shape[1]}")
        return to_images(self.model_, self.model_.inverse_transform(S), self.image_shape_)


class FlowOnly(_ImageModel):
    """The same spline flow fitted by maximum likelihood under a factorised
    generalized Gaussian base density."""

    _model_kind = "flow_only"

    def __init__(self, n_layers=1, hidden=128, prior_rho=1.0, prior_alpha=None, lr=5e-4,
                 batch=128, steps=2000, knots=4, tail_bound=3.0, bits=5, eps=0.05,
                 random_state=0):
        self.n_layers = n_layers
        self.hidden = hidden
        self.prior_rho = prior_rho
        self.prior_alpha = prior_alpha
        self.lr = lr
        self.batch = batch
        self.steps = steps
        self.knots = knots
        self.tail_bound = tail_bound
        self.bits = bits
        self.eps = eps
        self.random_state = random_state

    def transform(self, X):
        return self.embed(X)
