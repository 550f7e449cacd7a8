import itertools
import math

import numpy as np
import pytest

from cstar.conv import to_cm, to_nchw
from cstar.errors import NumericError, ShapeError
from cstar.nn import (SGD, Architecture, AvgPoolGlobal, BatchNorm, ConvDense, ConvFactorized, Flatten,
                      Linear, MaxPool, Model, ReLU, cross_entropy, factorize, loss_and_grad,
                      mini_conv_net, sgd_step, softmax, step_decay)
from cstar.tucker import decompose, recover

from conftest import central_diff, direct_conv, rel_err

TINY = Architecture(in_channels=2, image_size=8, num_classes=3, stem_width=3, widths=(4, 5))


def _readout_check(model, x, mode, rng, n_idx=6, tol=1e-6):
    """Compare analytic grads of sum(R * logits) with central differences."""
    r = rng.standard_normal((x.shape[0], model.num_classes))

    def f():
        return float(np.sum(model.forward(x, mode) * r))

    model.forward(x, mode)
    dx = model.backward(r)
    grads = model.grads()
    worst = 0.0
    for lname, pname, p in model.parameters():
        for idx in itertools.islice(np.ndindex(p.shape), 0, None, max(1, p.size // n_idx)):
            worst = max(worst, rel_err(central_diff(f, p, idx), grads[lname][pname][idx], 1e-6))
    for idx in itertools.islice(np.ndindex(x.shape), 0, None, max(1, x.size // n_idx)):
        worst = max(worst, rel_err(central_diff(f, x, idx), dx[idx], 1e-6))
    assert worst < tol, worst


def _wrap(layers, in_shape, classes):
    return Model(layers, in_shape, classes)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_dense_conv_gradients(rng, stride, pad):
    conv = ConvDense(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), stride, pad, name="c")
    model = _wrap([conv, AvgPoolGlobal(name="g")], (2, 5, 5), 3)
    _readout_check(model, rng.standard_normal((2, 2, 5, 5)), "eval", rng)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0)])
def test_factorized_conv_gradients(rng, stride, pad):
    f = decompose(rng.standard_normal((4, 3, 3, 3)), 2, 2)
    conv = ConvFactorized(f, rng.standard_normal(4), stride, pad, name="c")
    feats = int(np.prod(conv.output_shape((3, 5, 5))))
    model = _wrap([conv, Flatten(name="f"), Linear(rng.standard_normal((3, feats)), name="fc")], (3, 5, 5), 3)
    _readout_check(model, rng.standard_normal((2, 3, 5, 5)), "eval", rng)


def test_linear_relu_maxpool_flatten_gradients(rng):
    layers = [ConvDense(rng.standard_normal((2, 1, 1, 1)), name="c"), ReLU(name="r"),
              MaxPool(2, name="p"), Flatten(name="f"), Linear(rng.standard_normal((3, 8)), name="fc")]
    model = _wrap(layers, (1, 4, 4), 3)
    # continuous inputs keep ties and kinks away from the difference stencil
    _readout_check(model, rng.standard_normal((3, 1, 4, 4)), "eval", rng)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(rng, mode):
    bn = BatchNorm(3, name="bn")
    bn.params["scale"][:] = rng.uniform(0.5, 2, 3)
    bn.params["shift"][:] = rng.standard_normal(3)
    bn.buffers["running_mean"][:] = rng.standard_normal(3)
    bn.buffers["running_var"][:] = rng.uniform(0.5, 2, 3)
    model = _wrap([bn, AvgPoolGlobal(name="g")], (3, 4, 4), 3)
    saved = {k: v.copy() for k, v in bn.buffers.items()}

    def restore():
        for k, v in saved.items():
            bn.buffers[k] = v.copy()

    # Training-mode forwards update running buffers; reset them so each FD probe sees the same state.
    orig = model.forward
    model.forward = lambda x, m="eval": (restore(), orig(x, m))[1]
    _readout_check(model, rng.standard_normal((4, 3, 4, 4)), mode, rng, tol=1e-5)


def test_full_model_gradients_with_factorized_block(rng):
    model = factorize(mini_conv_net(TINY, rng), {"block2.conv": (2, 3)})
    x = rng.uniform(0, 1, (3, 2, 8, 8))
    y = np.array([0, 1, 2])
    loss, grads, dx = loss_and_grad(model, x, y, mode="eval")
    f = lambda: loss_and_grad(model, x, y, mode="eval")[0]
    for lname, pname, p in model.parameters():
        idx = tuple(int(v) for v in np.unravel_index(p.size // 2, p.shape))
        assert rel_err(central_diff(f, p, idx), grads[lname][pname][idx], 1e-6) < 1e-5, (lname, pname)
    assert rel_err(central_diff(f, x, (1, 0, 3, 4)), dx[1, 0, 3, 4], 1e-6) < 1e-5


def test_conv_layer_matches_direct_oracle(rng):
    w, b = rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    x = rng.standard_normal((2, 3, 6, 6))
    conv = ConvDense(w, b, 2, 1, name="c")
    np.testing.assert_allclose(to_nchw(conv.forward(to_cm(x), False)), direct_conv(x, w, 2, 1, b), atol=1e-10)


def test_identity_1x1_conv(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    conv = ConvDense(np.eye(3)[:, :, None, None], name="c")
    np.testing.assert_array_equal(to_nchw(conv.forward(to_cm(x), False)), x)


def test_maxpool_matches_brute_force(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    for window, stride in ((2, 2), (3, 2), (2, 1)):
        pool = MaxPool(window, stride, name="p")
        got = to_nchw(pool.forward(to_cm(x), False))
        ho, wo = (7 - window) // stride + 1, (6 - window) // stride + 1
        want = np.empty((2, 3, ho, wo))
        for b, c, i, j in itertools.product(range(2), range(3), range(ho), range(wo)):
            want[b, c, i, j] = x[b, c, i * stride:i * stride + window, j * stride:j * stride + window].max()
        np.testing.assert_array_equal(got, want)


def test_maxpool_tie_routes_to_first(rng):
    pool = MaxPool(2, name="p")
    x = np.ones((1, 1, 2, 2))
    pool.forward(to_cm(x), False)
    dx = to_nchw(pool.backward(to_cm(np.full((1, 1, 1, 1), 5.0))))
    assert dx[0, 0, 0, 0] == 5.0 and dx.sum() == 5.0


def test_batchnorm_train_normalizes_and_updates_running(rng):
    bn = BatchNorm(3, momentum=0.1, name="bn")
    x = rng.standard_normal((8, 3, 4, 4)) * 3 + 2
    y = to_nchw(bn.forward(to_cm(x), True))
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    mean = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * mean, atol=1e-12)
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), atol=1e-12)
    # eval mode uses the running statistics, so the output is a fixed affine map
    e = to_nchw(bn.forward(to_cm(x), False))
    rm, rv = bn.buffers["running_mean"], bn.buffers["running_var"]
    np.testing.assert_allclose(e, (x - rm[None, :, None, None]) / np.sqrt(rv + 1e-5)[None, :, None, None])


def test_softmax_and_cross_entropy(rng):
    logits = rng.standard_normal((5, 4)) * 50
    p = softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)
    y = rng.integers(0, 4, 5)
    loss, d = cross_entropy(logits, y)
    ref = -np.mean([logits[n, y[n]] - np.log(np.sum(np.exp(logits[n] - logits[n].max()))) - logits[n].max()
                    for n in range(5)])
    assert abs(loss - ref) < 1e-10
    np.testing.assert_allclose(d.sum(axis=1), 0, atol=1e-12)
    assert cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))[0] == pytest.approx(math.log(7), abs=1e-12)
    with pytest.raises(NumericError):
        cross_entropy(np.array([[np.nan, 0.0]]), np.array([0]))


def test_zero_head_gives_log_c_loss(rng):
    model = mini_conv_net(TINY, rng)
    model.layer("fc").params["weight"][:] = 0
    x = rng.uniform(0, 1, (4, 2, 8, 8))
    loss, _, _ = loss_and_grad(model, x, np.array([0, 1, 2, 0]), mode="eval")
    assert loss == pytest.approx(math.log(3), abs=1e-12)


def test_sgd_step_examples():
    w = np.array([[1.0, -2.0]])
    model = Model([Linear(w.copy(), np.array([0.5]), name="fc")], (2,), 1)
    grads = {"fc": {"weight": np.array([[0.5, 1.0]]), "bias": np.array([2.0])}}
    sgd_step(model, grads, 0.1)
    np.testing.assert_allclose(model.layer("fc").params["weight"], [[0.95, -2.1]])
    np.testing.assert_allclose(model.layer("fc").params["bias"], [0.3])
    sgd_step(model, grads, 0.1, extra={"fc": {"weight": np.array([[-0.5, -1.0]])}})
    np.testing.assert_allclose(model.layer("fc").params["weight"], [[0.95, -2.1]])
    sgd_step(model, grads, 0.0)
    np.testing.assert_allclose(model.layer("fc").params["bias"], [0.1])
    with pytest.raises(ShapeError):
        sgd_step(model, {"fc": {"weight": np.zeros((2, 2))}}, 0.1)


def test_momentum_and_weight_decay():
    model = Model([Linear(np.array([[1.0]]), name="fc")], (1,), 1)
    opt = SGD(momentum=0.5, weight_decay=0.1)
    g = {"fc": {"weight": np.array([[1.0]]), "bias": np.array([0.0])}}
    opt.step(model, g, 1.0)  # v = 1 + 0.1*1 = 1.1; w = -0.1
    assert model.layer("fc").params["weight"][0, 0] == pytest.approx(-0.1)
    opt.step(model, g, 1.0)  # g = 1 - 0.01 = 0.99; v = 0.55 + 0.99 = 1.54; w = -1.64
    assert model.layer("fc").params["weight"][0, 0] == pytest.approx(-1.64)


def test_step_decay():
    lrs = [step_decay(0.1, e, 20) for e in range(20)]
    assert lrs[0] == lrs[4] == 0.1
    assert lrs[5] == pytest.approx(0.01) and lrs[10] == pytest.approx(1e-3) and lrs[19] == pytest.approx(1e-4)


def test_eval_is_deterministic_and_train_changes_buffers(rng):
    model = mini_conv_net(TINY, rng)
    x = rng.uniform(0, 1, (4, 2, 8, 8))
    a, b = model.forward(x), model.forward(x)
    np.testing.assert_array_equal(a, b)
    before = model.layer("stem.bn").buffers["running_mean"].copy()
    model.forward(x, "train")
    assert not np.array_equal(before, model.layer("stem.bn").buffers["running_mean"])
    with pytest.raises(ValueError):
        model.forward(x, "test")
    with pytest.raises(ShapeError):
        model.forward(x[:, :1])


def test_factorized_full_rank_matches_dense(rng):
    model = mini_conv_net(TINY, rng)
    ranks = {n: model.layer(n).weight_shape[:2] for n in model.compressible}
    fact = factorize(model, ranks)
    x = rng.uniform(0, 1, (5, 2, 8, 8))
    np.testing.assert_allclose(fact.forward(x), model.forward(x), atol=1e-6, rtol=0)
    assert fact.factorized and not model.factorized


def test_factorized_layer_equals_recovered_dense(rng):
    model = mini_conv_net(TINY, rng)
    fact = factorize(model, {"block1.conv": (2, 2), "block2.conv": (3, 2)})
    dense = fact.clone()
    for n in fact.compressible:
        layer = fact.layer(n)
        dense.replace(n, ConvDense(recover(layer.factors), layer.params["bias"].copy(),
                                   layer.stride, layer.padding))
    x = rng.uniform(0, 1, (3, 2, 8, 8))
    np.testing.assert_allclose(fact.forward(x), dense.forward(x), atol=1e-10)
    assert fact.param_count() < model.param_count()


def test_model_validation(rng):
    with pytest.raises(ShapeError):
        Model([Linear(np.zeros((3, 4)), name="fc")], (5,), 3)
    with pytest.raises(ValueError):
        Model([Linear(np.zeros((3, 4)), name="fc")], (4,), 3, compressible=["fc"])
    with pytest.raises(ValueError):
        Model([ReLU(name="a"), Linear(np.zeros((3, 4)), name="a")], (4,), 3)
    with pytest.raises(ValueError):
        factorize(factorize(mini_conv_net(TINY, rng), {"block1.conv": (2, 2)}), {"block1.conv": (2, 2)})
    with pytest.raises(ValueError):
        loss_and_grad(mini_conv_net(TINY, rng), np.zeros((1, 2, 8, 8)), np.array([3]))


def test_mini_conv_net_structure():
    model = mini_conv_net(Architecture(), np.random.default_rng(0))
    assert model.compressible == ["block1.conv", "block2.conv", "block3.conv"]
    assert model.forward(np.zeros((2, 3, 16, 16))).shape == (2, 10)
    with pytest.raises(ValueError):
        mini_conv_net(Architecture(widths=()))
