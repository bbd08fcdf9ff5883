"""Central finite differences, used as an independent oracle for autodiff."""
import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(fn, arrays, eps=1e-6):
    """d fn / d array for each array, by central differences.

    ``fn`` takes a list of plain Tensors and returns a scalar Tensor or float.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with no_grad():
        for k, arr in enumerate(arrays):
            g = np.zeros_like(arr)
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(fn([Tensor(a) for a in arrays]))
                flat[i] = orig - eps
                fm = _scalar(fn([Tensor(a) for a in arrays]))
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            grads.append(g)
    return grads


def analytic_gradient(fn, arrays):
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(leaves)
    out.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


def relative_error(analytic, numeric):
    """max |a - n| scaled by max(|n|, |a|, 1e-8), over all entries of all arrays."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-8)
    return float(np.max(np.abs(a - n)) / scale)


def check_gradient(fn, arrays, eps=1e-6):
    """Relative error between reverse-mode and finite-difference gradients."""
    return relative_error(analytic_gradient(fn, arrays), numerical_gradient(fn, arrays, eps))


def check_gradient_sampled(fn, arrays, n_entries, rng, eps=1e-6):
    """Like :func:`check_gradient`, but differencing only ``n_entries`` random
    coordinates of each array (all of them when the array is smaller)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = analytic_gradient(fn, arrays)
    picked_a, picked_n = [], []
    with no_grad():
        for k, arr in enumerate(arrays):
            flat = arr.reshape(-1)
            idx = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(fn([Tensor(a) for a in arrays]))
                flat[i] = orig - eps
                fm = _scalar(fn([Tensor(a) for a in arrays]))
                flat[i] = orig
                picked_n.append((fp - fm) / (2 * eps))
                picked_a.append(analytic[k].reshape(-1)[i])
    return relative_error([np.array(picked_a)], [np.array(picked_n)])


def _scalar(x):
    return float(x.data.reshape(())) if isinstance(x, Tensor) else float(x)
