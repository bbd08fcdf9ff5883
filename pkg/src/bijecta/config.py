"""Flat ``key = value`` run configuration with profiles and overrides.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Resolution order, later wins: profile, config file, ``BIJECTA_SEED``,
command-line overrides.  Model-specific keys left unset take the defaults
of the selected model.
"""
import os
from dataclasses import dataclass, fields

from .errors import ConfigError
from .linear_ica import MODES, LinearICAConfig
from .model import BijectaConfig

MODELS = ("linear_ica", "bijecta", "flow_only")
DATASETS = ("affine_sprite", "linear_mixture", "file")


@dataclass
class RunConfig:
    model: str = "bijecta"
    d_s: int = 2
    n_layers: int = 1
    hidden: int = 128
    prior_rho: float = 1.0
    prior_alpha: float = None
    lr: float = None
    batch: int = None
    steps: int = None
    seed: int = 0
    jl_seed: int = 0
    lambda_rec: float = None
    knots: int = 4
    tail_bound: float = 3.0
    min_bin_width: float = 1e-3
    min_bin_height: float = 1e-3
    min_derivative: float = 1e-3
    ica_mode: str = None
    n_mc: int = 1
    sigma_init: float = 0.1
    b_init: float = None
    bits: int = 5
    eps: float = 0.05
    restarts: int = 1
    sphere: bool = None
    dataset: str = "affine_sprite"
    n_data: int = 10000
    canvas: int = 32
    data_seed: int = 0
    data_path: str = ""
    output_dir: str = "runs/default"

    def model_config(self):
        """The resolved config object for the selected model."""
        target = LinearICAConfig if self.model == "linear_ica" else BijectaConfig
        names = {f.name for f in fields(target)}
        kw = {k: v for k, v in self.items() if k in names and v is not None}
        if self.model != "linear_ica":
            kw["model"] = self.model
        return target(**kw)

    def resolved(self):
        """Copy with every model-specific ``None`` filled from the model defaults."""
        out = RunConfig(**dict(self.items()))
        base = self.model_config()
        for f in fields(RunConfig):
            if getattr(out, f.name) is None and hasattr(base, f.name):
                setattr(out, f.name, getattr(base, f.name))
        return out

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def validate(self):
        checks = [
            ("model", self.model in MODELS, f"model must be one of {MODELS}"),
            ("dataset", self.dataset in DATASETS, f"dataset must be one of {DATASETS}"),
            ("ica_mode", self.ica_mode is None or self.ica_mode in MODES,
             f"ica_mode must be one of {MODES}"),
            ("d_s", self.d_s >= 1, "d_s must be >= 1"),
            ("n_layers", self.n_layers >= 1, "n_layers must be >= 1"),
            ("prior_rho", self.prior_rho > 0, "prior_rho must be > 0"),
            ("prior_alpha", self.prior_alpha is None or self.prior_alpha > 0,
             "prior_alpha must be > 0"),
            ("lr", self.lr is None or self.lr > 0, "lr must be > 0"),
            ("batch", self.batch is None or self.batch >= 1, "batch must be >= 1"),
            ("steps", self.steps is None or self.steps >= 1, "steps must be >= 1"),
            ("knots", self.knots >= 2, "knots must be >= 2"),
            ("tail_bound", self.tail_bound > 0, "tail_bound must be > 0"),
            ("lambda_rec", self.lambda_rec is None or self.lambda_rec >= 0,
             "lambda_rec must be >= 0"),
            ("n_mc", self.n_mc >= 1, "n_mc must be >= 1"),
            ("restarts", self.restarts >= 1, "restarts must be >= 1"),
            ("n_data", self.n_data >= 1, "n_data must be >= 1"),
            ("data_path", self.dataset != "file" or bool(self.data_path),
             "dataset = file needs data_path"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(msg, key=key)
        return self


PROFILES = {
    "desk": {},
    # the full-scale training schedule
    "paper": {"lr": 5e-4, "batch": 512, "steps": 25000, "knots": 4, "min_bin_width": 1e-3,
              "min_bin_height": 1e-3, "min_derivative": 1e-3},
}


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key, text):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}", key=key)
    kind = _TYPES[key]
    text = str(text).strip()
    if text.lower() in ("none", "") and kind is not str:
        return None
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} ({kind.__name__})", key=key) from None


def parse_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value", key=line)
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def load_config(path=None, overrides=None, profile="desk", env=None):
    """Build a validated :class:`RunConfig`.  ``overrides`` maps keys to
    strings or values."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}", key="profile")
    values = dict(PROFILES[profile])
    if path:
        with open(path) as fh:
            values.update(parse_text(fh.read(), path))
    env = os.environ if env is None else env
    if env.get("BIJECTA_SEED"):
        values["seed"] = parse_value("seed", env["BIJECTA_SEED"])
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    return RunConfig(**values).validate()
