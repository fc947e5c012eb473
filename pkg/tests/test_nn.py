import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeppt.nn import (
    SCORE_CONFIG,
    TRACKER_CONFIG,
    AdamState,
    ConfigurationError,
    ConvLayer,
    DenseLayer,
    NetworkParams,
    ShapeError,
    TrainConfig,
    adam_update,
    conv2d_forward,
    conv_topology,
    cross_entropy,
    dense_forward,
    init_conv_stack,
    lr_schedule,
    network_backward,
    network_forward,
    relu,
    relu_backward,
    softmax,
)
from oracles import (
    central_differences,
    naive_conv2d,
    naive_dense,
    relative_error,
    softmax64,
    tiny_net_loss,
)


# --- conv2d_forward -------------------------------------------------------

def test_conv_all_ones():
    out = conv2d_forward(np.ones((1, 3, 3, 1)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_center_impulse_is_crop(rng):
    x = rng.standard_normal((2, 6, 7, 1))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = conv2d_forward(x, k, np.zeros(1))
    np.testing.assert_array_equal(out[..., 0], x[:, 1:-1, 1:-1, 0])


def test_conv_matches_naive_oracle(rng):
    x = rng.standard_normal((1, 5, 5, 2)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    diff = np.abs(conv2d_forward(x, w, b) - naive_conv2d(x, w, b)).max()
    assert diff < 1e-6


@pytest.mark.parametrize(
    "x_shape, w_shape",
    [((1, 5, 5, 2), (3, 3, 3, 3)), ((1, 2, 5, 1), (1, 1, 3, 3)), ((5, 5, 1), (1, 1, 3, 3))],
)
def test_conv_rejects_bad_shapes(x_shape, w_shape):
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros(x_shape), np.zeros(w_shape), np.zeros(w_shape[0]))


# --- relu / dense / softmax / cross_entropy -----------------------------

def test_relu_values():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert not relu(-np.abs(np.arange(1.0, 7.0))).any()


def test_relu_backward_finite_differences(rng):
    x = rng.standard_normal(50)
    x = x[np.abs(x) > 1e-2]  # keep clear of the kink for h = 1e-3
    up = rng.standard_normal(x.shape)
    h = 1e-3
    fd = np.array([
        (np.dot(up, relu(x + h * e)) - np.dot(up, relu(x - h * e))) / (2 * h)
        for e in np.eye(x.size)
    ])
    np.testing.assert_allclose(relu_backward(x, up), fd, rtol=1e-6, atol=1e-9)


def test_dense_identity_and_bias(rng):
    x = rng.standard_normal(6)
    np.testing.assert_array_equal(dense_forward(x, np.eye(6), np.zeros(6)), x)
    b = rng.standard_normal(4)
    np.testing.assert_array_equal(dense_forward(np.zeros(6), rng.standard_normal((4, 6)), b), b)


def test_dense_matches_naive_oracle(rng):
    x = rng.standard_normal(8).astype(np.float32)
    w = rng.standard_normal((4, 8)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    assert np.abs(dense_forward(x, w, b) - naive_dense(x, w, b)).max() < 1e-6


def test_dense_length_mismatch():
    with pytest.raises(ShapeError):
        dense_forward(np.zeros(5), np.zeros((4, 6)), np.zeros(4))


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.5, 1e4])
def test_softmax_constant_is_uniform(c):
    np.testing.assert_allclose(softmax(np.full(4, c)), [0.25] * 4)


def test_softmax_no_overflow():
    p = softmax(np.array([1000.0, 0.0]))
    assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(p))


def test_softmax_random_1369_vs_float64_oracle(rng):
    v = (rng.standard_normal(1369) * 5).astype(np.float32)
    p = softmax(v)
    assert abs(float(p.sum(dtype=np.float64)) - 1.0) < 1e-6
    assert np.abs(p - softmax64(v)).max() < 1e-6


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax(np.array([1.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40))
def test_softmax_properties(values):
    v = np.array(values)
    p = softmax(v)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) < 1e-6
    assert v[np.argmax(p)] == v.max()


def test_cross_entropy_uniform_one_hot():
    k = 1369
    target = np.zeros(k)
    target[100] = 1.0
    loss, grad = cross_entropy(np.full(k, 1.0 / k), target)
    assert loss == pytest.approx(math.log(1369), rel=1e-12)
    assert math.log(1369) == pytest.approx(7.2219, abs=1e-4)
    np.testing.assert_array_equal(grad, np.full(k, 1.0 / k) - target)


def test_cross_entropy_target_equals_pred(rng):
    t = softmax64(rng.standard_normal(10))
    loss, _ = cross_entropy(t, t)
    assert loss == pytest.approx(-np.sum(t * np.log(t)))
    one_hot = np.eye(5)[2]
    assert cross_entropy(one_hot, one_hot)[0] == 0.0


def test_cross_entropy_gradient_finite_differences(rng):
    scores = rng.standard_normal(12)
    target = softmax64(rng.standard_normal(12))
    _, grad = cross_entropy(softmax(scores), target)

    def f(s):
        return -np.sum(target * np.log(softmax64(s)))

    h = 1e-3
    fd = np.array([(f(scores + h * e) - f(scores - h * e)) / (2 * h) for e in np.eye(12)])
    assert relative_error(grad, fd).max() < 1e-4


def test_cross_entropy_errors():
    with pytest.raises(ShapeError):
        cross_entropy(np.full(3, 1 / 3), np.full(4, 0.25))
    with pytest.raises(ValueError):
        cross_entropy(np.full(3, 1 / 3), np.array([0.5, 0.5, 0.5]))


# --- network_forward ------------------------------------------------------

@pytest.mark.parametrize("size, out", [(19, 1), (55, 37)])
def test_nine_layer_shape_law(size, out):
    params = NetworkParams(conv=init_conv_stack(random_state=0))
    y = network_forward(params, np.zeros((1, size, size, 1), np.float32), conv_topology(9))
    assert y.shape == (1, out, out, 128)


def test_zero_weights_give_zero_features(rng):
    params = NetworkParams(conv=init_conv_stack(random_state=0))
    for layer in params.conv:
        layer.weight[...] = 0
    y = network_forward(params, rng.random((2, 19, 19, 1)).astype(np.float32), conv_topology(9))
    assert not y.any()


def test_chain_mismatch_is_configuration_error():
    params = NetworkParams(conv=init_conv_stack((1, 4), random_state=0),
                           heads={"h": [DenseLayer(np.zeros((2, 5)), np.zeros(2))]})
    with pytest.raises(ConfigurationError):
        network_forward(params, np.zeros((1, 5, 5, 1)), ["conv:0", "flatten", "dense:h:0"])
    with pytest.raises(ConfigurationError):
        NetworkParams(conv=[ConvLayer(np.zeros((4, 1, 3, 3)), np.zeros(4)),
                            ConvLayer(np.zeros((4, 3, 3, 3)), np.zeros(4))])


# --- network_backward -----------------------------------------------------

TINY_TOPOLOGY = ["conv:0", "relu", "conv:1", "flatten", "dense:tiny:0"]


def make_tiny(seed):
    """2 conv + 1 dense, 354 parameters, float64."""
    rng = np.random.default_rng(seed)
    params = NetworkParams(
        conv=[
            ConvLayer(rng.standard_normal((3, 2, 3, 3)) * 0.5, rng.standard_normal(3) * 0.1),
            ConvLayer(rng.standard_normal((4, 3, 3, 3)) * 0.5, rng.standard_normal(4) * 0.1),
        ],
        heads={"tiny": [DenseLayer(rng.standard_normal((5, 36)) * 0.3, rng.standard_normal(5) * 0.1)]},
    )
    x = rng.standard_normal((2, 7, 7, 2))
    target = np.array([softmax64(r) for r in rng.standard_normal((2, 5)) * 2])
    return params, x, target


def analytic_tiny_grads(params, x, target, frozen=()):
    logits, cache = network_forward(params, x, TINY_TOPOLOGY, keep_cache=True)
    _, g = cross_entropy(softmax(logits), target)
    grads, _ = network_backward(params, cache, g, frozen=frozen)
    return grads


def test_tiny_net_parameter_count():
    params, _, _ = make_tiny(0)
    assert sum(a.size for a in params.named_arrays().values()) <= 500


def test_backward_matches_finite_differences():
    params, x, target = make_tiny(3)
    grads = analytic_tiny_grads(params, x, target)
    arrays = {k: v.copy() for k, v in params.named_arrays().items()}
    fd = central_differences(lambda a: tiny_net_loss(a, x, target), arrays)
    assert set(grads) == set(fd)
    for name in fd:
        assert relative_error(grads[name], fd[name]).max() < 1e-4, name


def test_zero_loss_gradient_gives_zero_grads():
    params, x, _ = make_tiny(1)
    logits, cache = network_forward(params, x, TINY_TOPOLOGY, keep_cache=True)
    grads, _ = network_backward(params, cache, np.zeros_like(logits))
    assert all(not g.any() for g in grads.values())


def test_frozen_conv_omits_conv_grads_and_head_matches_fd():
    params, x, target = make_tiny(4)
    grads = analytic_tiny_grads(params, x, target, frozen=("conv",))
    assert set(grads) == {"tiny.0.weight", "tiny.0.bias"}
    arrays = {k: v.copy() for k, v in params.named_arrays().items()}
    fd = central_differences(lambda a: tiny_net_loss(a, x, target), arrays,
                             names=["tiny.0.weight", "tiny.0.bias"])
    for name in fd:
        assert relative_error(grads[name], fd[name]).max() < 1e-4


def test_backward_without_cache():
    with pytest.raises(RuntimeError):
        network_backward(NetworkParams(), None, np.zeros(1))


def test_input_gradient_matches_fd(rng):
    params, x, target = make_tiny(5)
    logits, cache = network_forward(params, x, TINY_TOPOLOGY, keep_cache=True)
    _, g = cross_entropy(softmax(logits), target)
    _, gx = network_backward(params, cache, g, need_input_grad=True)
    arrays = {k: v.copy() for k, v in params.named_arrays().items()}
    holder = {"x": x.copy()}
    fd = central_differences(lambda a: tiny_net_loss(arrays, a["x"], target), holder)["x"]
    assert relative_error(gx, fd).max() < 1e-4


# --- optimizer ------------------------------------------------------------

def test_lr_schedule_reference_values():
    assert lr_schedule(TRACKER_CONFIG, 0, 0) == 1e-2
    it = 5000
    per_iter = 1e-2 / (1 + 1e-7 * it)
    assert lr_schedule(TRACKER_CONFIG, 150, it) == pytest.approx(per_iter * 0.2)
    assert lr_schedule(TRACKER_CONFIG, 149, it) == pytest.approx(per_iter)
    per_iter = 1e-3 / (1 + 1e-7 * it)
    assert lr_schedule(SCORE_CONFIG, 180, it) == pytest.approx(per_iter * 0.01)


def test_table_configs():
    t = TRACKER_CONFIG
    assert (t.lr, t.lr_decay, t.weight_decay, t.momentum, t.step_factor) == (1e-2, 1e-7, 1e-4, 0.9, 0.2)
    s = SCORE_CONFIG
    assert (s.lr, s.lr_decay, s.weight_decay, s.momentum, s.step_factor) == (1e-3, 1e-7, 1e-5, 0.85, 0.1)
    assert t.step_every == s.step_every == 30 and t.step_start == s.step_start == 120


@pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(epochs=0), dict(batch_size=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


@pytest.mark.parametrize("g", [0.37, -2.5])
def test_adam_first_step_is_lr_sign(g):
    params = {"p": np.zeros(1)}
    cfg = TrainConfig(lr=1e-2, lr_decay=0.0, weight_decay=0.0, momentum=0.9)
    adam_update(params, {"p": np.array([g])}, AdamState(), cfg, epoch=0)
    assert params["p"][0] == pytest.approx(-1e-2 * np.sign(g), rel=1e-6)


def test_adam_zero_gradient_no_change():
    params = {"p": np.array([1.0, -2.0])}
    cfg = TrainConfig(weight_decay=0.0)
    adam_update(params, {"p": np.zeros(2)}, AdamState(), cfg, epoch=0)
    np.testing.assert_array_equal(params["p"], [1.0, -2.0])


def test_adam_two_steps_hand_recurrence():
    cfg = TrainConfig(lr=0.1, lr_decay=0.01, weight_decay=0.5, momentum=0.9)
    p = np.array([1.0, -0.5, 2.0])
    g1 = np.array([0.2, -0.1, 0.0])
    g2 = np.array([-0.3, 0.4, 0.1])
    # hand-evaluated recurrence
    expected = p.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate([g1, g2], start=1):
        lr = 0.1 / (1 + 0.01 * (t - 1))
        ge = g + 0.5 * expected
        m = 0.9 * m + 0.1 * ge
        v = 0.999 * v + 0.001 * ge * ge
        expected = expected - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    params = {"p": p.copy()}
    state = AdamState()
    adam_update(params, {"p": g1}, state, cfg, epoch=0)
    adam_update(params, {"p": g2}, state, cfg, epoch=0)
    assert state.step == 2
    assert np.abs(params["p"] - expected).max() < 1e-7


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_update({"p": np.zeros(2)}, {"p": np.zeros(3)}, AdamState(), TrainConfig(), 0)
