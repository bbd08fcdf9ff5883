"""Command-line entry point: ``bijecta <command> [--config FILE] [--key value ...]``.

Every artifact-producing command writes its resolved config and a
``manifest.json`` (config snapshot plus git-style blob hashes of inputs
and outputs) into the output directory.  Failures print one JSON line on
stderr and exit nonzero.
"""
import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import pipeline
from .config import RunConfig, load_config
from .data import demo_sources, gen_linear_mixture, load_dataset, save_dataset, save_images
from .errors import BijectaError, ConfigError, FormatError, TrainingError
from .eval import mcc
from .linear_ica import LinearICAConfig, train_linear_ica
from .model import midpoint_preprocess, sample, to_images, traverse, write_metrics_csv
from .stiefel import (interpolation_path, offdiag_crosscorr_norm, orthogonality_defect,
                      stiefel_distance, white_data)

EXIT_CODES = {ConfigError: 2, FileNotFoundError: 3, OSError: 3, FormatError: 4,
              TrainingError: 5}


def git_blob_hash(data):
    """The object id git would assign to ``data`` as a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_path(path):
    if os.path.isdir(path):
        return {os.path.relpath(p, path): h for p, h in _walk_hashes(path)}
    with open(path, "rb") as fh:
        return git_blob_hash(fh.read())


def _walk_hashes(root):
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = os.path.join(dirpath, name)
            with open(p, "rb") as fh:
                yield p, git_blob_hash(fh.read())


def write_manifest(out_dir, command, cfg, inputs=(), outputs=()):
    manifest = {
        "command": command,
        "config": {k: v for k, v in cfg.items()},
        "config_hash": git_blob_hash(cfg.to_text().encode()),
        "inputs": {p: _hash_path(p) for p in inputs},
        "outputs": {os.path.relpath(p, out_dir): _hash_path(p) for p in outputs},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _prepare(args, command):
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    cfg = load_config(args.config, overrides, profile=args.profile).resolved()
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, f"{command}.cfg"), "w") as fh:
        fh.write(cfg.to_text())
    return cfg


def _out(cfg, name):
    return os.path.join(cfg.output_dir, name)


def _dataset(cfg):
    """Images and sources from ``data_path`` (a make-data directory or file), else generated."""
    if cfg.data_path and os.path.isdir(cfg.data_path):
        images, _ = load_dataset(os.path.join(cfg.data_path, "images.bjt"))
        src = os.path.join(cfg.data_path, "sources.bjt")
        sources = load_dataset(src)[0] if os.path.exists(src) else None
        return images, sources, [cfg.data_path]
    images, sources = pipeline.build_dataset(cfg)
    return images, sources, [cfg.data_path] if cfg.data_path else []


def _checkpoint(args, cfg):
    return args.checkpoint or _out(cfg, "checkpoint")


# -- commands -----------------------------------------------------------------
def cmd_make_data(args):
    cfg = _prepare(args, "make-data")
    images, sources = pipeline.build_dataset(cfg)
    outs = [_out(cfg, "images.bjt"), _out(cfg, "preview.pgm")]
    save_dataset(outs[0], images)
    if sources is not None:
        outs.append(_out(cfg, "sources.bjt"))
        save_dataset(outs[-1], sources)
    save_images(images[:64], outs[1])
    write_manifest(cfg.output_dir, "make-data", cfg, outputs=outs)
    return outs


def cmd_train(args):
    cfg = _prepare(args, "train")
    images, _, inputs = _dataset(cfg)
    model = pipeline.train(cfg, images)
    ckpt = _out(cfg, "checkpoint")
    pipeline.save(model, ckpt, cfg)
    metrics = _out(cfg, "train_metrics.csv")
    if cfg.model == "linear_ica":
        with open(metrics, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "elbo_z"])
            w.writerows([i, repr(float(v))] for i, v in enumerate(model.trace))
    else:
        write_metrics_csv(model.trace, metrics)
    write_manifest(cfg.output_dir, "train", cfg, inputs, [ckpt, metrics])
    return [ckpt, metrics]


def cmd_eval(args):
    cfg = _prepare(args, "eval")
    ckpt = _checkpoint(args, cfg)
    model = pipeline.load(ckpt, cfg)
    images, sources, inputs = _dataset(cfg)
    if args.n_eval:
        images = images[:args.n_eval]
        sources = None if sources is None else sources[:args.n_eval]
    report = pipeline.evaluate(model, images, sources, cfg, seed=cfg.seed)
    outs = [_out(cfg, "metrics.csv"), _out(cfg, "spectrum.csv")]
    report.to_csv(outs[0])
    report.explained_variance.to_csv(outs[1])
    write_manifest(cfg.output_dir, "eval", cfg, inputs + [ckpt], outs)
    return outs


def _image_shape(cfg, d):
    side = int(round(np.sqrt(d)))
    return (side, side) if side * side == d else (d,)


def _require_joint(cfg, command):
    if cfg.model != "bijecta":
        raise ConfigError(f"{command} needs a bijecta checkpoint", key="model")


def cmd_sample(args):
    cfg = _prepare(args, "sample")
    _require_joint(cfg, "sample")
    ckpt = _checkpoint(args, cfg)
    model = pipeline.load(ckpt, cfg)
    x = sample(model, args.n, args.temperature, seed=cfg.seed)
    out = _out(cfg, "samples.pgm")
    save_images(to_images(model, x, _image_shape(cfg, model.d_x)), out)
    write_manifest(cfg.output_dir, "sample", cfg, [ckpt], [out])
    return [out]


def cmd_traverse(args):
    cfg = _prepare(args, "traverse")
    _require_joint(cfg, "traverse")
    ckpt = _checkpoint(args, cfg)
    model = pipeline.load(ckpt, cfg)
    images, _, inputs = _dataset(cfg)
    x = midpoint_preprocess(images[args.index:args.index + 1], cfg)
    rows = traverse(model, x, args.dim, args.span, args.steps_traverse)
    out = _out(cfg, f"traverse_dim{args.dim}.pgm")
    save_images(to_images(model, rows, _image_shape(cfg, model.d_x)), out,
                ncols=args.steps_traverse)
    write_manifest(cfg.output_dir, "traverse", cfg, inputs + [ckpt], [out])
    return [out]


def mix_demo(cfg, size=16, n=512):
    """Unmix linear mixtures of two fixed images; returns per-source |cosine|
    between the matched decoder columns and the true images, plus the columns."""
    a, b = demo_sources(size)
    mix, weights = gen_linear_mixture(a, b, n, seed=cfg.seed)
    lcfg = LinearICAConfig(d_s=2, prior_rho=cfg.prior_rho, prior_alpha=cfg.prior_alpha,
                           ica_mode="full", steps=cfg.steps, seed=cfg.seed, jl_seed=cfg.jl_seed,
                           restarts=cfg.restarts)
    model = train_linear_ica(mix, lcfg)
    cols = (model.pre_inv @ model.a.data).T
    truth = np.stack([a.reshape(-1), b.reshape(-1)])
    cos = np.abs(truth @ cols.T) / np.outer(np.linalg.norm(truth, axis=1),
                                           np.linalg.norm(cols, axis=1))
    order = [0, 1] if cos[0, 0] + cos[1, 1] >= cos[0, 1] + cos[1, 0] else [1, 0]
    matched = cols[order]
    # sign-align each column with its source for display
    signs = np.sign(np.sum(matched * truth, axis=1))
    return {"cosine": cos[[0, 1], order], "columns": matched * signs[:, None],
            "sources": truth, "mixtures": mix, "weights": weights, "model": model,
            "mcc": mcc(weights, model.transform(mix))}


def _unit_range(v):
    lo, hi = v.min(axis=-1, keepdims=True), v.max(axis=-1, keepdims=True)
    return (v - lo) / np.where(hi > lo, hi - lo, 1.0)


def cmd_mix_demo(args):
    overrides = {"steps": 3000, "restarts": 3, "prior_rho": 1.0}
    for k, v in overrides.items():
        if getattr(args, k, None) is None:
            setattr(args, k, str(v))
    cfg = _prepare(args, "mix-demo")
    res = mix_demo(cfg, size=args.size)
    shape = (args.size, args.size)
    outs = [_out(cfg, n) for n in ("sources.pgm", "mixtures.pgm", "columns.pgm",
                                    "mix_metrics.csv")]
    save_images(res["sources"].reshape((-1,) + shape), outs[0])
    save_images(res["mixtures"][:16].reshape((-1,) + shape), outs[1])
    save_images(_unit_range(res["columns"]).reshape((-1,) + shape), outs[2])
    with open(outs[3], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "abs_cosine", "weight_mcc"])
        for i, c in enumerate(res["cosine"]):
            w.writerow([i, repr(float(c)), repr(res["mcc"])])
    write_manifest(cfg.output_dir, "mix-demo", cfg, outputs=outs)
    return outs


def theorem_rows(d_s, d_x, n_paths=3, n_points=100, seed=0):
    """Interpolations from random ``d_s x d_x`` matrices to their polar
    projections, with the whitened-data cross-correlation along each path."""
    rng = np.random.default_rng(seed)
    x = white_data(d_x, max(4 * d_x, 2000), seed)
    rows = []
    for p in range(n_paths):
        g = rng.normal(size=(d_s, d_x))
        for t, m in enumerate(interpolation_path(g, n_points)):
            rows.append((p, t, stiefel_distance(m), offdiag_crosscorr_norm(m, x),
                         orthogonality_defect(m)))
    return rows


def cmd_theorem_check(args):
    cfg = _prepare(args, "theorem-check")
    rows = theorem_rows(cfg.d_s, args.d_x, args.paths, args.points, cfg.seed)
    out = _out(cfg, "theorem.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "stiefel_distance", "offdiag_norm", "defect"])
        for p, t, dist, off, defect in rows:
            w.writerow([p, t, repr(float(dist)), repr(float(off)), repr(float(defect))])
    write_manifest(cfg.output_dir, "theorem-check", cfg, outputs=[out])
    return [out]


COMMANDS = {"make-data": cmd_make_data, "train": cmd_train, "eval": cmd_eval,
            "sample": cmd_sample, "traverse": cmd_traverse, "mix-demo": cmd_mix_demo,
            "theorem-check": cmd_theorem_check}


def build_parser():
    parser = argparse.ArgumentParser(prog="bijecta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--profile", default="desk", help="desk or paper")
        for f in fields(RunConfig):
            p.add_argument(f"--{f.name}", dest=f.name, metavar="VALUE")
        if name in ("eval", "sample", "traverse"):
            p.add_argument("--checkpoint", help="defaults to <output_dir>/checkpoint")
        if name == "eval":
            p.add_argument("--n-eval", type=int, default=0, help="evaluate the first N rows")
        if name == "sample":
            p.add_argument("--n", type=int, default=16)
            p.add_argument("--temperature", type=float, default=1.0)
        if name == "traverse":
            p.add_argument("--dim", type=int, default=0)
            p.add_argument("--index", type=int, default=0)
            p.add_argument("--span", type=float, default=6.0)
            p.add_argument("--steps-traverse", dest="steps_traverse", type=int, default=7)
        if name == "mix-demo":
            p.add_argument("--size", type=int, default=16)
        if name == "theorem-check":
            p.add_argument("--d_x", "--d-x", dest="d_x", type=int, default=64)
            p.add_argument("--paths", type=int, default=3)
            p.add_argument("--points", type=int, default=100)
    return parser


def _error_line(exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("key", "offset", "step"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    return json.dumps(payload, sort_keys=True)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        for path in COMMANDS[args.command](args):
            print(path)
    except (BijectaError, OSError) as exc:
        print(_error_line(exc), file=sys.stderr)
        code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
