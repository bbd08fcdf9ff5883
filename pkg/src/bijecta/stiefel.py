"""Approximately-orthogonal projections.

Random sign sketches stand in for data-aware whitening matrices, Cayley
transforms give an unconstrained parameterization of SO(d), and the polar
projection onto the Stiefel manifold (computed with a one-sided Jacobi SVD)
provides the diagnostics used to check the decorrelation guarantees.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, LinAlgError
from .tensor import Tensor


@dataclass(frozen=True)
class JLSketch:
    """A fixed random sign matrix of shape ``(d_s, d_x)``.

    ``scale`` selects the entry magnitude: ``"rows"`` uses 1/sqrt(d_x), so
    rows have unit norm and ``q @ q.T`` concentrates around the identity;
    ``"columns"`` uses 1/sqrt(d_s), so columns have unit norm instead.
    """

    q: np.ndarray
    seed: int
    scale: str = "rows"

    @property
    def d_s(self):
        return self.q.shape[0]

    @property
    def d_x(self):
        return self.q.shape[1]

    def as_tensor(self):
        return Tensor(self.q)


def sample_jl(d_s, d_x, seed, scale="rows"):
    """Draw a sign sketch with i.i.d. entries of equal probability.

    Draws without full row rank (likely at small ``d_x``, where two rows can
    coincide up to sign) are discarded and redrawn from the same generator.
    """
    if not 1 <= d_s <= d_x:
        raise DimensionError(f"need 1 <= d_s <= d_x, got d_s={d_s}, d_x={d_x}")
    if scale not in ("rows", "columns"):
        raise ValueError(f"unknown sketch scale {scale!r}")
    rng = np.random.default_rng(seed)
    while True:
        signs = rng.integers(0, 2, size=(d_s, d_x)) * 2.0 - 1.0
        if np.linalg.matrix_rank(signs) == d_s:
            break
    mag = 1.0 / np.sqrt(d_x if scale == "rows" else d_s)
    q = signs * mag
    q.setflags(write=False)
    return JLSketch(q, int(seed), scale)


def antisymmetric(l):
    return (l - T.transpose(l)) * 0.5


def cayley(l):
    """Rotation (I - M)^{-1} (I + M) with M the antisymmetric part of ``l``."""
    l = T.as_tensor(l)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise DimensionError(f"cayley needs a square matrix, got {l.shape}")
    if not np.all(np.isfinite(l.data)):
        raise LinAlgError("cayley: non-finite parameters")
    m = antisymmetric(l)
    eye = Tensor(np.eye(l.shape[0]))
    r = T.solve(eye - m, eye + m)
    if not np.all(np.isfinite(r.data)):
        raise LinAlgError("cayley: overflow in the linear solve")
    return r


def jacobi_svd(g, tol=1e-15, max_sweeps=60):
    """Thin SVD of an ``r x c`` matrix (r <= c) by one-sided Jacobi rotations.

    Returns ``(u, s, vt)`` with ``g = u @ diag(s) @ vt``, ``u`` of shape
    ``(r, r)`` and ``vt`` of shape ``(r, c)``; ``s`` is sorted descending.
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    r, c = g.shape
    if r > c:
        raise DimensionError(f"jacobi_svd expects r <= c, got {g.shape}")
    a = g.T.copy()  # c x r, columns get orthogonalised
    v = np.eye(r)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(r - 1):
            for j in range(i + 1, r):
                alpha = a[:, i] @ a[:, i]
                beta = a[:, j] @ a[:, j]
                gamma = a[:, i] @ a[:, j]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                ai, aj = a[:, i].copy(), a[:, j].copy()
                a[:, i] = cs * ai - sn * aj
                a[:, j] = sn * ai + cs * aj
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = cs * vi - sn * vj
                v[:, j] = sn * vi + cs * vj
        if not rotated:
            break
    s = np.linalg.norm(a, axis=0)
    order = np.argsort(-s)
    s = s[order]
    a = a[:, order]
    v = v[:, order]
    if s[0] == 0 or s[-1] <= max(r, c) * np.finfo(float).eps * s[0]:
        raise LinAlgError("rank-deficient matrix")
    return v, s, (a / s).T


def polar_project(g):
    """Nearest point on the Stiefel manifold: the orthogonal polar factor."""
    u, _, vt = jacobi_svd(g)
    return u @ vt


def stiefel_distance(g):
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    return float(np.linalg.norm(g - polar_project(g)))


def orthogonality_defect(g):
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    if g.shape[0] > g.shape[1]:
        raise DimensionError(f"expects r <= c, got {g.shape}")
    return float(np.linalg.norm(g @ g.T - np.eye(g.shape[0])))


def offdiag_crosscorr_norm(g, x):
    """Frobenius norm of G X X^T G^T minus its diagonal."""
    proj = np.asarray(g) @ np.asarray(x)
    cc = proj @ proj.T
    return float(np.linalg.norm(cc - np.diag(np.diag(cc))))


def theorem1_check(g, x):
    """Pair the distance to the manifold with the projected cross-correlation defect.

    ``x`` is a ``d_x x N`` data matrix with ``N > d_x``.
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.shape[0] != g.shape[1]:
        raise DimensionError(f"data has {x.shape[0]} rows, projection expects {g.shape[1]}")
    if x.shape[1] <= x.shape[0]:
        raise DimensionError("need more samples than dimensions")
    return stiefel_distance(g), offdiag_crosscorr_norm(g, x)


def interpolation_path(g, n_points):
    """Matrices (1 - t) G + t polar(G) for ``n_points`` evenly spaced t in [0, 1]."""
    target = polar_project(g)
    return [(1.0 - t) * g + t * target for t in np.linspace(0.0, 1.0, n_points)]


def white_data(d_x, n, seed):
    """``d_x x n`` data whose sample second moment X X^T / n is exactly I."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(d_x, n))
    w, v = np.linalg.eigh(x @ x.T / n)
    return (v / np.sqrt(w)) @ v.T @ x
