"""Adam with bias correction and an optional cosine learning-rate decay."""
import math

import numpy as np

from .errors import TrainingError


def cosine_lr(base_lr, step, total_steps):
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update.

    ``params`` and ``grads`` are parallel lists of arrays; ``state`` is a dict
    holding ``t`` (completed steps) and the moment lists ``m`` and ``v``,
    created on first use.  Returns ``state``.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if "m" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at step {state['t']}", step=state["t"])
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} differs from param {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        buf = np.multiply(g, g)
        buf *= 1.0 - beta2
        v *= beta2
        v += buf
        np.sqrt(v, out=buf)
        buf *= 1.0 / math.sqrt(bc2)
        buf += eps
        np.divide(m, buf, out=buf)
        buf *= lr / bc1
        p -= buf
    return state


class Adam:
    """Adam over a list of leaf tensors, with cosine decay when ``total_steps`` is set."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, total_steps=None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.total_steps = total_steps
        self.state = {}

    @property
    def step_count(self):
        return self.state.get("t", 0)

    def current_lr(self):
        if self.total_steps is None:
            return self.lr
        return cosine_lr(self.lr, self.step_count, self.total_steps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, self.current_lr(), self.betas[0], self.betas[1], self.eps)
