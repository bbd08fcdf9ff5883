"""Minimal parameter containers and dense layers."""
import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Collects Tensor parameters from attributes, recursively.

    Attributes that are Tensors with ``requires_grad`` count as parameters;
    attributes that are Modules (or lists of Modules) are traversed.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """Non-trainable arrays that still belong in a checkpoint."""
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Tensor) and not value.requires_grad:
                yield full, value.data
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def state_dict(self):
        state = {k: v.data.copy() for k, v in self.named_parameters()}
        state.update({k: np.array(v, copy=True) for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.data.dtype).reshape(p.shape)
        for name, _ in list(self.named_buffers()):
            self._set_buffer(name, state[name])

    def _set_buffer(self, dotted, value):
        obj = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        cur = getattr(obj, parts[-1])
        if isinstance(cur, Tensor):
            cur.data = np.array(value, dtype=cur.data.dtype).reshape(cur.shape)
        else:
            setattr(obj, parts[-1], np.array(value, dtype=cur.dtype).reshape(cur.shape))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False):
        scale = 0.0 if zero else 1.0 / np.sqrt(n_in)
        self.weight = param(rng.normal(size=(n_in, n_out)) * scale)
        self.bias = param(np.zeros(n_out))

    def __call__(self, x):
        return x @ self.weight + self.bias


class ResidualNet(Module):
    """Dense residual network; the output layer starts at zero."""

    def __init__(self, n_in, n_out, hidden, rng, n_blocks=3):
        self.inp = Linear(n_in, hidden, rng)
        self.blocks = [ResidualBlock(hidden, rng) for _ in range(n_blocks)]
        self.out = Linear(hidden, n_out, rng, zero=True)

    def __call__(self, x):
        h = self.inp(x)
        for block in self.blocks:
            h = block(h)
        return self.out(T.relu(h))


class ResidualBlock(Module):
    def __init__(self, width, rng):
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)

    def __call__(self, h):
        return h + self.fc2(T.relu(self.fc1(T.relu(h))))
