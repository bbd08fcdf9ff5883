import math

import numpy as np
import pytest

from bijecta import tensor as T
from bijecta.errors import ConfigError, ContractError, DimensionError, DomainError
from bijecta.flow import (ActNorm, FlowStack, InvertibleMix, RQSCoupling, SplineConfig,
                          dequantize_inverse, dequantize_preprocess, factor_schedule,
                          rqs_forward, rqs_inverse)
from bijecta.gradcheck import check_gradient
from bijecta.tensor import Tensor, no_grad
from conftest import dense_log_det, perturb


def random_knots(rng, n, d, k=4, scale=1.5):
    return (rng.normal(scale=scale, size=(n, d, k)), rng.normal(scale=scale, size=(n, d, k)),
            rng.normal(scale=scale, size=(n, d, k - 1)))


def test_identity_knots(rng):
    x = rng.uniform(-5, 5, size=(50, 3))
    y, lad = rqs_forward(Tensor(x), np.zeros((50, 3, 4)), np.zeros((50, 3, 4)), np.zeros((50, 3, 3)))
    np.testing.assert_allclose(y.data, x, atol=1e-12)
    np.testing.assert_allclose(lad.data, 0.0, atol=1e-12)


def test_spline_roundtrip(rng):
    x = rng.uniform(-4, 4, size=(10000, 1))
    knots = random_knots(rng, 10000, 1)
    y, lad = rqs_forward(Tensor(x), *knots)
    back, lad_inv = rqs_inverse(y, *knots)
    assert np.max(np.abs(back.data - x)) < 1e-8
    np.testing.assert_allclose(lad_inv.data, -lad.data, atol=1e-8)


def test_spline_log_det_matches_finite_differences(rng):
    x = rng.uniform(-2.9, 2.9, size=(500, 1))
    knots = random_knots(rng, 500, 1)
    eps = 1e-6
    yp = rqs_forward(Tensor(x + eps), *knots)[0].data
    ym = rqs_forward(Tensor(x - eps), *knots)[0].data
    lad = rqs_forward(Tensor(x), *knots)[1].data
    assert np.max(np.abs(np.log((yp - ym) / (2 * eps)) - lad)) < 1e-5


def test_spline_monotone_and_tails(rng):
    x = np.sort(rng.uniform(-5, 5, size=10000))[:, None]
    knots = tuple(np.broadcast_to(k[:1], (10000,) + k.shape[1:]) for k in random_knots(rng, 1, 1))
    y, lad = rqs_forward(Tensor(x), *knots, tail_bound=3.0)
    assert np.all(np.diff(y.data[:, 0]) > 0)
    assert np.all(np.isfinite(lad.data)) and np.all(np.exp(lad.data) > 0)
    outside = np.abs(x[:, 0]) > 3.0
    np.testing.assert_array_equal(y.data[outside], x[outside])


def test_spline_floors_respected(rng):
    uw = np.array([[[50.0, -50.0, -50.0, -50.0]]])
    ud = np.array([[[-50.0, -50.0, -50.0]]])
    x = np.linspace(-2.99, 2.99, 1001)[:, None]
    y, lad = rqs_forward(Tensor(x), np.broadcast_to(uw, (1001, 1, 4)),
                         np.broadcast_to(uw, (1001, 1, 4)), np.broadcast_to(ud, (1001, 1, 3)))
    # slopes never drop below the derivative floor
    assert np.all(np.exp(lad.data) > 0.9e-3)


def test_spline_nan_knots():
    with pytest.raises(DomainError):
        rqs_forward(Tensor([[0.0]]), np.full((1, 1, 4), np.nan), np.zeros((1, 1, 4)),
                    np.zeros((1, 1, 3)))


def test_spline_gradient(rng):
    for _ in range(20):
        x = rng.uniform(-2, 2, size=(3, 2))
        kn = random_knots(rng, 3, 2)

        def f(ts):
            y, lad = rqs_forward(ts[0], ts[1], ts[2], ts[3])
            return T.sum(y * y) + T.sum(lad)

        assert check_gradient(f, [x, *kn]) < 1e-4

        def g(ts):
            y, lad = rqs_inverse(ts[0], ts[1], ts[2], ts[3])
            return T.sum(y * y) + T.sum(lad)

        assert check_gradient(g, [x, *kn]) < 1e-4


def test_coupling_zero_conditioner_is_identity(rng):
    layer = RQSCoupling(5, 16, rng)
    x = rng.normal(size=(20, 5))
    y, ld = layer.forward(Tensor(x))
    np.testing.assert_allclose(y.data, x, atol=1e-12)
    np.testing.assert_allclose(ld.data, 0.0, atol=1e-12)


def test_coupling_log_det_matches_dense_jacobian(rng):
    layer = RQSCoupling(4, 16, rng)
    perturb(layer, rng, scale=0.5)
    x = rng.normal(size=(10, 4))
    with no_grad():
        ld = layer.forward(Tensor(x))[1].data
        fd = dense_log_det(lambda r: layer.forward(Tensor(r[None]))[0].data[0], x)
    assert np.max(np.abs(ld - fd)) < 1e-4
    back = layer.inverse(layer.forward(Tensor(x))[0])[0].data
    assert np.max(np.abs(back - x)) < 1e-8


def test_coupling_log_det_gradient_wrt_conditioner(rng):
    layer = RQSCoupling(4, 8, rng)
    perturb(layer, rng, scale=1.0)
    x = Tensor(rng.normal(size=(6, 4)))
    names = [n for n, _ in layer.named_parameters()]
    params = [p for _, p in layer.named_parameters()]
    for _ in range(20):
        i = int(rng.integers(len(params)))
        base = params[i].data.copy()

        def f(ts):
            params[i].data = ts[0].data
            saved = params[i]
            layer_param = ts[0]
            _set(layer, names[i], layer_param)
            out = T.sum(layer.forward(x)[1])
            _set(layer, names[i], saved)
            return out

        err = check_gradient(f, [base])
        params[i].data = base
        assert err < 1e-3, names[i]


def _set(module, dotted, value):
    obj = module
    parts = dotted.split(".")
    for part in parts[:-1]:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    setattr(obj, parts[-1], value)


def test_actnorm_initialisation(rng):
    layer = ActNorm(3)
    x = rng.normal(loc=[1.0, -2.0, 5.0], scale=[0.5, 3.0, 1.0], size=(256, 3))
    with pytest.raises(ContractError):
        layer.inverse(Tensor(x))
    y, ld = layer.forward(Tensor(x))
    np.testing.assert_allclose(y.data.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.data.var(0), 1.0, atol=1e-10)
    np.testing.assert_allclose(layer.inverse(y)[0].data, x, atol=1e-12)
    const = ActNorm(2)
    const.forward(Tensor(np.column_stack([np.zeros(10), np.arange(10.0)])))
    assert const.log_scale.data[0] == 0.0


def test_invertible_mix(rng):
    mix = InvertibleMix(6, rng)
    perturb(mix, rng, scale=0.2)
    x = rng.normal(size=(9, 6))
    y, ld = mix.forward(Tensor(x))
    np.testing.assert_allclose(y.data, x @ mix.weight().T, atol=1e-12)
    assert ld.data[0] == pytest.approx(np.linalg.slogdet(mix.weight())[1])
    np.testing.assert_allclose(mix.inverse(y)[0].data, x, atol=1e-10)
    for _ in range(20):
        w = rng.normal(size=(9, 6))
        assert check_gradient(lambda ts: T.sum(mix.inverse(ts[0])[0] * Tensor(w)), [y.data]) < 1e-4


def test_one_layer_identity_stack(rng):
    flow = FlowStack(6, n_layers=1, hidden=8, seed=0, identity_mix=True)
    for b in flow.blocks:
        b.actnorm.initialized = np.ones(())
    x = rng.normal(size=(7, 6))
    z, ld = flow.forward(Tensor(x))
    np.testing.assert_allclose(z.data, x, atol=1e-12)
    np.testing.assert_allclose(ld.data, 0.0, atol=1e-12)


def test_factor_schedule_dimension_accounting():
    for d in (2, 3, 7, 64, 1024):
        for n in (1, 2, 4, 8):
            widths, emitted = factor_schedule(d, n)
            assert sum(emitted) + (widths[-1] - emitted[-1]) == d
            assert all(w >= 2 for w in widths)
    assert factor_schedule(64, 4) == ([64, 32, 16, 8], [32, 16, 8, 0])


def test_stack_roundtrip_64(rng):
    flow = FlowStack(64, n_layers=4, hidden=32, seed=1)
    x = rng.uniform(0.05, 0.95, size=(512, 64))
    flow.initialize(x)
    perturb(flow, rng, scale=0.3)
    with no_grad():
        z, _ = flow.forward(Tensor(x))
        back, _ = flow.inverse(z)
    assert z.shape == (512, 64)
    assert np.max(np.abs(back.data - x)) < 1e-6


def test_stack_log_det_dense_jacobian(rng):
    flow = FlowStack(6, n_layers=2, hidden=16, seed=2)
    x = rng.normal(size=(64, 6))
    flow.initialize(x)
    perturb(flow, rng, scale=0.5)
    with no_grad():
        z, ld = flow.forward(Tensor(x[:8]))
        fd = dense_log_det(lambda r: flow.forward(Tensor(r[None]))[0].data[0], x[:8])
        per_block = 0
        active = Tensor(x[:8])
        for block, k in zip(flow.blocks, flow.emitted):
            active, l = block.forward(active)
            per_block = per_block + l.data
            if k:
                active = T.split(active, k)[1]
    assert np.max(np.abs(ld.data - fd)) < 1e-3
    np.testing.assert_allclose(ld.data, per_block, atol=1e-12)


def test_change_of_variables_quadrature(rng):
    flow = FlowStack(2, n_layers=2, hidden=8, seed=3)
    flow.initialize(rng.normal(size=(128, 2)))
    perturb(flow, rng, scale=0.3)
    g = np.linspace(-10, 10, 1601)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    mass = 0.0
    for chunk in np.array_split(pts, 32):
        with no_grad():
            z, ld = flow.forward(Tensor(chunk))
        mass += np.exp(-0.5 * np.sum(z.data ** 2, axis=1) - math.log(2 * math.pi) + ld.data).sum()
    mass *= (g[1] - g[0]) ** 2
    assert abs(mass - 1.0) < 1e-3


def test_stack_errors(rng):
    flow = FlowStack(4, n_layers=1, hidden=4)
    with pytest.raises(ContractError):
        flow.inverse(Tensor(np.zeros((1, 4))))
    with pytest.raises(DimensionError):
        flow.forward(Tensor(np.zeros((1, 5))))


def test_dequantize_examples(rng):
    img = np.zeros((3, 4, 4), dtype=np.uint8)
    x, ld = dequantize_preprocess(img)
    np.testing.assert_allclose(x, 0.05)
    assert x.shape == (3, 16)
    assert ld == pytest.approx(16 * (math.log(0.9) + math.log(1 / 32)))
    with pytest.raises(ConfigError):
        dequantize_preprocess(img, bits=0)
    with pytest.raises(ConfigError):
        dequantize_preprocess(img, bits=9)


def test_dequantize_log_det_is_affine_jacobian():
    # numerically differentiate levels -> x for one pixel
    base = dequantize_preprocess(np.array([[8]], dtype=np.uint8), noise=np.array([[0.2]]))[0]
    bump = dequantize_preprocess(np.array([[8]], dtype=np.uint8), noise=np.array([[0.3]]))[0]
    slope = (bump - base)[0, 0] / 0.1
    _, ld = dequantize_preprocess(np.zeros((1, 1), dtype=np.uint8))
    assert math.log(slope) == pytest.approx(ld)


def test_dequantize_roundtrip(rng):
    img = rng.integers(0, 256, size=(20, 8, 8)).astype(np.uint8)
    x, _ = dequantize_preprocess(img, noise=rng.uniform(0, 1, size=img.shape) * 0.999)
    np.testing.assert_array_equal(dequantize_inverse(x), (img >> 3).reshape(20, -1))
