import numpy as np
import pytest
import scipy.stats

from bijecta import io
from bijecta.errors import DimensionError, LinAlgError
from bijecta.gradcheck import check_gradient
from bijecta.stiefel import (cayley, interpolation_path, jacobi_svd, orthogonality_defect,
                             polar_project, sample_jl, stiefel_distance, theorem1_check,
                             white_data)
from bijecta import tensor as T
from bijecta.tensor import Tensor


def test_jl_entries_and_determinism():
    sk = sample_jl(4, 50, seed=3, scale="columns")
    assert set(np.unique(sk.q)) == {-0.5, 0.5}
    rows = sample_jl(4, 25, seed=3)
    assert set(np.unique(rows.q)) == {-0.2, 0.2}
    np.testing.assert_array_equal(sample_jl(4, 25, seed=3).q, rows.q)
    assert not np.array_equal(sample_jl(4, 25, seed=4).q, rows.q)
    with pytest.raises(DimensionError):
        sample_jl(5, 4, seed=0)


def test_jl_sketch_has_full_row_rank():
    for seed in range(200):
        assert np.linalg.matrix_rank(sample_jl(2, 6, seed).q) == 2
    assert np.linalg.matrix_rank(sample_jl(3, 3, seed=0).q) == 3


def test_jl_expected_gram_is_identity():
    mean = np.mean([sample_jl(16, 256, seed=s).q @ sample_jl(16, 256, seed=s).q.T
                    for s in range(200)], axis=0)
    np.testing.assert_allclose(np.diag(mean), 1.0)
    off = mean - np.diag(np.diag(mean))
    assert np.max(np.abs(off)) < 0.05


def test_jl_columns_scale_expected_cross_gram():
    # unit-norm columns: E[Q^T Q] = I
    mean = np.mean([sample_jl(16, 32, seed=s, scale="columns").q.T
                    @ sample_jl(16, 32, seed=s, scale="columns").q for s in range(400)], axis=0)
    np.testing.assert_allclose(np.diag(mean), 1.0)
    assert np.max(np.abs(mean - np.diag(np.diag(mean)))) < 0.1


def test_jl_defect_concentrates_with_width():
    wide = np.mean([orthogonality_defect(sample_jl(16, 1024, seed=s).q) for s in range(20)])
    narrow = np.mean([orthogonality_defect(sample_jl(16, 64, seed=s).q) for s in range(20)])
    assert wide < narrow


def test_jl_bjt_roundtrip_bit_identical(tmp_path):
    sk = sample_jl(8, 40, seed=9)
    io.save_bjt(tmp_path / "q.bjt", sk.q)
    assert io.load_bjt(tmp_path / "q.bjt").tobytes() == sk.q.tobytes()


def test_cayley_examples():
    np.testing.assert_allclose(cayley(Tensor(np.zeros((3, 3)))).data, np.eye(3))
    r = cayley(Tensor([[0.0, 2.0], [0.0, 0.0]])).data
    np.testing.assert_allclose(r, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-15)


def test_cayley_in_special_orthogonal_group():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = rng.integers(2, 9)
        r = cayley(Tensor(rng.normal(scale=3, size=(d, d)))).data
        assert np.linalg.norm(r @ r.T - np.eye(d)) < 1e-10
        assert np.linalg.det(r) > 0


def test_cayley_gradient():
    rng = np.random.default_rng(1)
    for _ in range(20):
        l = rng.uniform(-2, 2, size=(4, 4))
        w = Tensor(rng.normal(size=(4, 4)))
        assert check_gradient(lambda ts: T.sum(cayley(ts[0]) * w), [l]) < 1e-4


def test_cayley_errors():
    with pytest.raises(DimensionError):
        cayley(Tensor(np.zeros((2, 3))))
    with pytest.raises(LinAlgError):
        cayley(Tensor([[0.0, np.inf], [0.0, 0.0]]))


def test_jacobi_svd_matches_numpy():
    rng = np.random.default_rng(2)
    for shape in [(2, 5), (8, 64), (5, 5)]:
        g = rng.normal(size=shape)
        u, s, vt = jacobi_svd(g)
        np.testing.assert_allclose(u @ np.diag(s) @ vt, g, atol=1e-12)
        np.testing.assert_allclose(s, np.linalg.svd(g, compute_uv=False), rtol=1e-12)


def test_polar_project_properties():
    rng = np.random.default_rng(3)
    g = rng.normal(size=(4, 10))
    p = polar_project(g)
    assert np.linalg.norm(p @ p.T - np.eye(4)) < 1e-8
    np.testing.assert_allclose(polar_project(p), p, atol=1e-12)
    np.testing.assert_allclose(polar_project(3.7 * p), p, atol=1e-12)
    d0 = np.linalg.norm(g - p)
    for _ in range(50):
        v = polar_project(rng.normal(size=(4, 10)))
        assert d0 <= np.linalg.norm(g - v) + 1e-12


def test_polar_rank_deficient():
    with pytest.raises(LinAlgError):
        polar_project(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))


def test_distances_zero_on_manifold():
    p = polar_project(np.random.default_rng(4).normal(size=(3, 7)))
    assert stiefel_distance(p) < 1e-12
    assert orthogonality_defect(p) < 1e-12


def test_theorem2_trend_on_path():
    g = np.random.default_rng(5).normal(size=(4, 16))
    path = interpolation_path(g, 12)
    dist = [stiefel_distance(m) for m in path]
    defect = [orthogonality_defect(m) for m in path]
    assert np.all(np.diff(dist) < 0) and np.all(np.diff(defect) < 0)


def test_theorem1_examples():
    x = white_data(16, 400, seed=0)
    p = polar_project(np.random.default_rng(6).normal(size=(4, 16)))
    assert theorem1_check(p, x)[1] < 1e-8
    g = np.random.default_rng(7).normal(size=(4, 16))
    vals = np.array([theorem1_check(m, x) for m in interpolation_path(g, 10)])
    assert np.all(np.diff(vals[:, 0]) < 0) and np.all(np.diff(vals[:, 1]) < 0)
    assert theorem1_check(g, 2 * x)[1] == pytest.approx(4 * theorem1_check(g, x)[1])
    with pytest.raises(DimensionError):
        theorem1_check(g, x[:, :10])


def test_spearman_between_defect_and_distance():
    rng = np.random.default_rng(8)
    g = rng.normal(size=(8, 64))
    path = interpolation_path(g, 100)
    rho = scipy.stats.spearmanr([orthogonality_defect(m) for m in path],
                                [stiefel_distance(m) for m in path]).statistic
    assert rho > 0.99
