import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plaquestrat import nn_core as nn
from plaquestrat.errors import ParameterError, ShapeError, UsageError

from conftest import central_diff, max_rel_error


def brute_conv(x, w, b):
    """Triple-loop 'same' cross-correlation over a zero-padded copy."""
    h, wd, cin = x.shape
    k = w.shape[0]
    r = k // 2
    xp = np.zeros((h + 2 * r, wd + 2 * r, cin))
    xp[r : r + h, r : r + wd] = x
    out = np.zeros((h, wd, w.shape[3]))
    for i in range(h):
        for j in range(wd):
            for o in range(w.shape[3]):
                acc = 0.0
                for di in range(k):
                    for dj in range(k):
                        for c in range(cin):
                            acc += xp[i + di, j + dj, c] * w[di, dj, c, o]
                out[i, j, o] = acc + b[o]
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_zero_kernel_annihilates(rng):
    x = rng.normal(size=(7, 6, 3))
    y = nn.conv2d(x, np.zeros((5, 5, 3, 4)), np.zeros(4))
    assert y.shape == (7, 6, 4)
    assert np.all(y.data == 0)


def test_conv_centre_kernel_is_identity(rng):
    x = rng.normal(size=(6, 8, 1))
    w = np.zeros((5, 5, 1, 1))
    w[2, 2, 0, 0] = 1.0
    assert np.array_equal(nn.conv2d(x, w, np.zeros(1)).data, x)


def test_conv_centre_kernel_sums_channels(rng):
    x = rng.normal(size=(4, 4, 3))
    w = np.zeros((5, 5, 3, 1))
    w[2, 2, :, 0] = 1.0
    np.testing.assert_allclose(nn.conv2d(x, w, np.zeros(1)).data[..., 0], x.sum(axis=-1), rtol=0, atol=1e-15)


def test_conv_ones_kernel_on_3x3():
    x = np.arange(1.0, 10.0).reshape(3, 3, 1)
    y = nn.conv2d(x, np.ones((5, 5, 1, 1)), np.zeros(1)).data[..., 0]
    expected = brute_conv(x, np.ones((5, 5, 1, 1)), np.zeros(1))[..., 0]
    assert np.array_equal(y, expected)
    assert y[1, 1] == 45.0
    # each window covers the whole 3x3 image here
    assert np.all(y == 45.0)


@pytest.mark.parametrize("h,w,cin,cout", [(1, 1, 1, 1), (3, 5, 2, 2), (8, 8, 2, 3), (8, 7, 1, 2)])
def test_conv_matches_brute_force(rng, h, w, cin, cout):
    x = rng.integers(-4, 5, size=(h, w, cin)).astype(float)
    k = rng.integers(-3, 4, size=(5, 5, cin, cout)).astype(float)
    b = rng.integers(-2, 3, size=cout).astype(float)
    # integer-valued inputs make every partial sum exact
    assert np.array_equal(nn.conv2d(x, k, b).data, brute_conv(x, k, b))


def test_conv_float_inputs_close_to_brute_force(rng):
    x, k, b = rng.normal(size=(8, 8, 2)), rng.normal(size=(5, 5, 2, 3)), rng.normal(size=3)
    np.testing.assert_allclose(nn.conv2d(x, k, b).data, brute_conv(x, k, b), rtol=1e-13, atol=1e-13)


def test_conv_batch_equals_per_image(rng):
    x, k, b = rng.normal(size=(3, 6, 5, 2)), rng.normal(size=(5, 5, 2, 2)), rng.normal(size=2)
    batched = nn.conv2d(x, k, b).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], nn.conv2d(x[i], k, b).data, rtol=1e-14, atol=1e-14)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        nn.conv2d(np.zeros((4, 4, 2)), np.zeros((5, 5, 3, 1)), np.zeros(1))


# ---------------------------------------------------------------- relu / pool / dense / softmax


def test_relu_values():
    assert nn.relu(np.array([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert np.all(nn.relu(-np.arange(1.0, 6.0)).data == 0)


def test_relu_gradient():
    x = nn.Tensor([-1.0, 2.0], requires_grad=True)
    nn.backward(nn.relu(x).sum())
    assert x.grad.tolist() == [0.0, 1.0]
    z = nn.Tensor([0.0], requires_grad=True)
    nn.backward(nn.relu(z).sum())
    assert z.grad.tolist() == [0.0]


def test_relu_gradient_matches_finite_difference():
    x = np.array([-1.0, 2.0])
    xt = nn.Tensor(x, requires_grad=True)
    nn.backward(nn.relu(xt).sum())
    fd = central_diff(lambda: float(np.maximum(x, 0).sum()), x)
    assert fd.tolist() == pytest.approx([0.0, 1.0], abs=1e-9)
    assert max_rel_error(xt.grad, fd) < 1e-5


def test_avg_pool_constant():
    x = np.full((7, 5, 2), 3.25)
    y = nn.avg_pool(x).data
    assert y.shape == (3, 2, 2)
    assert np.all(y == 3.25)


def test_avg_pool_3x3():
    x = np.arange(1.0, 10.0).reshape(3, 3, 1)
    assert nn.avg_pool(x).data.tolist() == [[[5.0]]]


def test_avg_pool_ragged_edges(rng):
    x = rng.normal(size=(4, 4, 1))
    y = nn.avg_pool(x).data[..., 0]
    assert y.shape == (2, 2)
    # pixel-wise oracle: mean of the in-bounds members of each window
    for oi in range(2):
        for oj in range(2):
            members = [x[i, j, 0] for i in range(4) for j in range(4) if i // 3 == oi and j // 3 == oj]
            assert y[oi, oj] == pytest.approx(sum(members) / len(members), abs=1e-15)
    assert y[1, 1] == x[3, 3, 0]


def test_dense_examples():
    x = np.array([1.0, 1.0])
    assert nn.dense(x, [[1, 2], [3, 4]], [0, 1]).data.tolist() == [3.0, 8.0]
    v = np.array([0.3, -2.0, 5.0])
    assert nn.dense(v, np.eye(3), np.zeros(3)).data.tolist() == v.tolist()
    assert nn.dense(v, np.zeros((2, 3)), [7.0, -1.0]).data.tolist() == [7.0, -1.0]
    with pytest.raises(ShapeError):
        nn.dense(v, np.zeros((2, 4)), np.zeros(2))


def test_softmax_examples():
    assert nn.softmax([0.0, 0.0]).data.tolist() == [0.5, 0.5]
    np.testing.assert_allclose(nn.softmax([math.log(2.0), 0.0]).data, [2 / 3, 1 / 3], rtol=0, atol=1e-15)
    big = nn.softmax([1000.0, 0.0]).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
def test_softmax_sums_to_one(logits):
    p = nn.softmax(np.array(logits)).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)


# ---------------------------------------------------------------- dropout


def test_dropout_identity_cases(rng):
    x = rng.normal(size=(5, 4))
    assert np.array_equal(nn.dropout(x, 0.0, nn.TRAIN, rng).data, x)
    for rate in (0.0, 0.3, 0.9):
        assert np.array_equal(nn.dropout(x, rate, nn.INFER, None).data, x)


def test_dropout_scaling_preserves_mean(rng):
    y = nn.dropout(np.ones(100_000), 0.5, nn.TRAIN, rng).data
    assert 0.98 <= y.mean() <= 1.02
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_dropout_rejects_rate_one(rng):
    with pytest.raises(ParameterError):
        nn.dropout(np.ones(3), 1.0, nn.TRAIN, rng)


# ---------------------------------------------------------------- loss


def test_weighted_bce_examples():
    assert float(nn.weighted_bce([0.0, 1.0], 1, 5.0).data) == pytest.approx(0.0, abs=1e-11)
    assert float(nn.weighted_bce([0.5, 0.5], 0, 3.0).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(nn.weighted_bce([0.2, 0.8], 1, 3.0).data) == pytest.approx(-3 * math.log(0.8), abs=1e-12)
    assert -3 * math.log(0.8) == pytest.approx(0.669431, abs=1e-6)


def test_weighted_bce_unit_weight_is_plain_bce(rng):
    p = rng.uniform(0.05, 0.95, 6)
    probs = np.stack([1 - p, p], axis=1)
    y = np.array([0, 1, 1, 0, 1, 0])
    plain = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert float(nn.weighted_bce(probs, y, 1.0).data) == pytest.approx(plain, rel=1e-14)


def test_weighted_bce_clips_zero_probability():
    loss = float(nn.weighted_bce([1.0, 0.0], 1, 1.0).data)
    assert loss == pytest.approx(-math.log(1e-12))


# ---------------------------------------------------------------- backward


def test_backward_sum_and_square():
    x = nn.Tensor([1.0, 2.0, -3.0], requires_grad=True)
    nn.backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x = nn.Tensor([1.0, 2.0], requires_grad=True)
    nn.backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    x = nn.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        nn.backward(x * 2.0)


def test_graph_visits_shared_node_once():
    x = nn.Tensor([3.0], requires_grad=True)
    y = x * x
    z = (y + y).sum()  # dz/dx = 4x
    graph = nn.backward(z)
    assert x.grad.tolist() == [12.0]
    assert len({id(n) for n in graph.nodes}) == len(graph.nodes)
    pos = {id(n): i for i, n in enumerate(graph.nodes)}
    for node in graph.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]


def _check_primitive(build, inputs, tol=1e-5, seed=0):
    """Scalarise ``build(*tensors)`` against a fixed random projection and
    compare reverse-mode gradients with central differences."""
    tensors = [nn.Tensor(a, requires_grad=True) for a in inputs]
    out = build(*tensors)
    proj = np.random.default_rng(seed).normal(size=out.shape)
    nn.backward(nn.tensor_sum(nn.mul(out, proj)))

    def scalar():
        return float(np.sum(build(*[nn.Tensor(a) for a in inputs]).data * proj))

    for t, a in zip(tensors, inputs):
        fd = central_diff(scalar, a)
        err = max_rel_error(t.grad, fd)
        assert err < tol, err


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + 0.1, x - 0.1)


@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    _check_primitive(nn.conv2d, [rng.normal(size=(6, 5, 2)), rng.normal(size=(5, 5, 2, 3)), rng.normal(size=3)])
    _check_primitive(nn.conv2d, [rng.normal(size=(2, 4, 4, 1)), rng.normal(size=(5, 5, 1, 2)), rng.normal(size=2)])
    _check_primitive(nn.relu, [_away_from_zero(rng, (4, 5))])
    _check_primitive(nn.avg_pool, [rng.normal(size=(7, 8, 2))])
    _check_primitive(nn.avg_pool, [rng.normal(size=(2, 4, 4, 3))])
    _check_primitive(nn.dense, [rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)])
    _check_primitive(nn.dense, [rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)])
    _check_primitive(nn.softmax, [rng.normal(size=(5, 2))])
    _check_primitive(nn.sum_squares, [rng.normal(size=(3, 3))])
    _check_primitive(lambda x: nn.dropout(x, 0.4, nn.TRAIN, np.random.default_rng(99)), [rng.normal(size=(6, 3))])
    labels = rng.integers(0, 2, 5)
    _check_primitive(lambda z: nn.weighted_bce(nn.softmax(z), labels, 2.5), [rng.normal(size=(5, 2))])


def test_infer_pass_is_bitwise_repeatable(rng):
    x, k, b = rng.normal(size=(9, 9, 2)), rng.normal(size=(5, 5, 2, 2)), rng.normal(size=2)

    def run():
        h = nn.dropout(nn.relu(nn.conv2d(x, k, b)), 0.5, nn.INFER, None)
        return nn.avg_pool(h).data.tobytes()

    assert run() == run()


def test_forward_backward_values_finite(rng):
    x = nn.Tensor(rng.normal(size=(2, 7, 7, 1)) * 50, requires_grad=True)
    k = nn.Tensor(rng.normal(size=(5, 5, 1, 2)), requires_grad=True)
    logits = nn.dense(nn.flatten(nn.avg_pool(nn.relu(nn.conv2d(x, k, np.zeros(2))))), rng.normal(size=(2, 18)),
                      np.zeros(2))
    loss = nn.weighted_bce(nn.softmax(logits), [0, 1], 3.0)
    nn.backward(loss)
    assert np.isfinite(loss.data) and np.all(np.isfinite(x.grad)) and np.all(np.isfinite(k.grad))
