import math

import numpy as np
import pytest

from deeppt.datasets import make_synthetic_translations
from deeppt.nn import (
    ConfigurationError,
    NetworkParams,
    ShapeError,
    TrainConfig,
    conv_topology,
    init_conv_stack,
    network_forward,
)
from deeppt.tracker import (
    DeepPTTracker,
    _batch_step,
    build_target_batch,
    build_target_distribution,
    correlate,
    extract_search_features,
    extract_template_features,
    normalize_patches,
    predict_displacement,
    train_tracker,
    tracker_loss,
)
from oracles import central_differences, gaussian_kernel_value, relative_error

SMALL = (1, 4, 4, 4, 4, 4, 4, 4, 4, 6)


def small_params(seed=0, dtype=np.float32, widths=SMALL):
    return NetworkParams(conv=init_conv_stack(widths, random_state=seed, dtype=dtype))


def test_normalization_zero_mean(rng):
    p = normalize_patches(rng.integers(0, 256, (3, 19, 19)))
    assert p.shape == (3, 19, 19, 1)
    assert np.allclose(p.mean(axis=(1, 2, 3)), 0, atol=1e-6)
    assert np.all(np.abs(p) <= 1)


def test_feature_shapes(rng):
    params = small_params()
    assert extract_template_features(params, rng.integers(0, 256, (19, 19))).shape == (6,)
    assert extract_search_features(params, rng.integers(0, 256, (2, 55, 55))).shape == (2, 37, 37, 6)
    with pytest.raises(ShapeError):
        extract_template_features(params, np.zeros((20, 20)))


def test_zero_weights_give_zero_features(rng):
    params = small_params()
    for layer in params.conv:
        layer.weight[:] = 0
    assert np.all(extract_template_features(params, rng.integers(0, 256, (19, 19))) == 0)
    assert np.all(extract_search_features(params, rng.integers(0, 256, (55, 55))) == 0)


def test_template_feature_is_network_forward(rng):
    params = small_params(3)
    patch = rng.integers(0, 256, (19, 19))
    direct = network_forward(params, normalize_patches(patch[None]), conv_topology(9))
    assert np.array_equal(extract_template_features(params, patch), direct[0, 0, 0])


def test_template_features_deterministic(rng):
    patch = rng.integers(0, 256, (19, 19))
    a = extract_template_features(small_params(7), patch)
    b = extract_template_features(small_params(7), patch)
    assert a.tobytes() == b.tobytes()


def test_crop_consistency(rng):
    # without per-patch mean subtraction, cell (18+dy, 18+dx) sees exactly the crop
    params = small_params(1, np.float64)
    for _ in range(10):
        search = rng.random((55, 55))
        dx, dy = rng.integers(-18, 19, 2)
        crop = search[18 + dy:18 + dy + 19, 18 + dx:18 + dx + 19]
        topo = conv_topology(9)
        fmap = network_forward(params, search[None, :, :, None], topo)[0]
        feat = network_forward(params, crop[None, :, :, None], topo)[0, 0, 0]
        assert np.max(np.abs(fmap[18 + dy, 18 + dx] - feat)) < 1e-5


def test_center_cell_matches_central_crop_features(rng):
    params = small_params(2, np.float64)
    search = rng.integers(0, 256, (55, 55))
    crop = search[18:37, 18:37]
    center = crop.astype(np.float64)
    # identical normalization inputs: subtract the crop mean from both
    s_in = (search / 255.0 - (center / 255.0).mean())[None, :, :, None]
    c_in = (center / 255.0 - (center / 255.0).mean())[None, :, :, None]
    topo = conv_topology(9)
    a = network_forward(params, s_in, topo)[0, 18, 18]
    b = network_forward(params, c_in, topo)[0, 0, 0]
    assert np.max(np.abs(a - b)) < 1e-9


def test_correlate_matches_loop_oracle(rng):
    t = rng.standard_normal(8)
    s = rng.standard_normal((37, 37, 8))
    expect = np.array([[sum(t[k] * s[r, c, k] for k in range(8)) for c in range(37)]
                       for r in range(37)])
    assert np.max(np.abs(correlate(t, s) - expect)) < 1e-5
    batch = correlate(np.stack([t, t]), np.stack([s, s]))
    assert batch.shape == (2, 37, 37)
    assert np.allclose(batch[1], expect)


def test_correlate_geometry():
    assert np.all(correlate(np.zeros(4), np.ones((37, 37, 4))) == 0)
    t = np.array([1.0, 0, 0, 0])
    s = np.zeros((37, 37, 4))
    s[..., 1] = 1.0
    s[7, 30] = t
    score = correlate(t, s)
    assert np.unravel_index(np.argmax(score), score.shape) == (7, 30)
    with pytest.raises(ShapeError):
        correlate(np.zeros(3), s)


def test_argmax_convention():
    score = np.zeros((37, 37))
    score[18, 18] = 1
    assert tuple(predict_displacement(score)) == (0, 0)
    score = np.zeros((37, 37))
    score[0, 0] = 1
    assert tuple(predict_displacement(score)) == (-18, -18)
    score = np.zeros((37, 37))
    score[5, 5] = score[9, 9] = 2
    assert tuple(predict_displacement(score)) == (-13, -13)
    score = np.zeros((37, 37))
    score[2, 30] = 5  # row 2 -> dy -16, col 30 -> dx 12
    assert tuple(predict_displacement(score)) == (12, -16)


def test_argmax_invariant_under_monotone_maps(rng):
    score = rng.standard_normal((5, 37, 37))
    base = predict_displacement(score)
    for f in (np.exp, lambda x: 3 * x + 1, np.arctan):
        assert np.array_equal(predict_displacement(f(score)), base)


def test_target_values():
    t = build_target_distribution((0, 0))
    z = sum(gaussian_kernel_value(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1))
    assert math.isclose(t[18, 18], 1 / z, rel_tol=1e-12)
    # the commonly quoted 0.20416 is a loose rounding of 1/4.89764 = 0.204180
    assert math.isclose(t[18, 18], 0.20416, abs_tol=1e-4)
    assert math.isclose(t[17, 17], 0.07511, abs_tol=1e-5)
    assert math.isclose(t[17, 18], 0.12384, abs_tol=1e-5)
    assert np.count_nonzero(t) == 9


def test_target_truncation_at_corner():
    t = build_target_distribution((-18, -18))
    assert np.count_nonzero(t) == 4
    assert np.count_nonzero(t[:2, :2]) == 4
    z = sum(gaussian_kernel_value(i, j) for i in (0, 1) for j in (0, 1))
    assert math.isclose(t[0, 0], 1 / z, rel_tol=1e-12)


def test_target_sums_to_one():
    for dx in range(-18, 19, 3):
        for dy in (-18, -5, 0, 17, 18):
            assert abs(build_target_distribution((dx, dy)).sum() - 1) < 1e-6
    with pytest.raises(ValueError):
        build_target_distribution((19, 0))


def test_loss_uniform_scores():
    loss, _ = tracker_loss(np.zeros((37, 37)), build_target_distribution((3, -2)))
    assert math.isclose(loss, math.log(1369), rel_tol=1e-6)


def test_loss_at_target_log_is_entropy():
    t = build_target_distribution((4, 4))
    score = np.where(t > 0, np.log(np.where(t > 0, t, 1)), -1e4)
    loss, grad = tracker_loss(score, t)
    entropy = -np.sum(t[t > 0] * np.log(t[t > 0]))
    assert math.isclose(loss, entropy, rel_tol=1e-9)
    assert np.max(np.abs(grad)) < 1e-9


def test_loss_gradient_fd(rng):
    t = build_target_distribution((-7, 11))
    score = rng.standard_normal((37, 37))
    _, grad = tracker_loss(score, t)
    idx = [tuple(rng.integers(0, 37, 2)) for _ in range(30)] + [(29, 11), (28, 11)]
    for i in idx:
        up, dn = score.copy(), score.copy()
        up[i] += 1e-3
        dn[i] -= 1e-3
        fd = (tracker_loss(up, t)[0] - tracker_loss(dn, t)[0]) / 2e-3
        assert relative_error(grad[i], fd, floor=1e-6) < 1e-4


def test_two_branch_gradient_fd(rng):
    widths = (1, 2, 2, 2, 2, 2, 2, 2, 2, 3)
    params = small_params(4, np.float64, widths)
    # zero biases put dead-channel units exactly on a ReLU kink
    for layer in params.conv:
        layer.bias[:] = rng.uniform(-0.1, 0.1, layer.bias.shape)
    s = make_synthetic_translations(2, seed=9)
    targets = build_target_batch(s.displacements, np.float64)
    _, grads = _batch_step(params, s.templates, s.searches, targets)
    names = list(params.named_arrays())

    def loss_fn(arrays):
        p = params.copy()
        for n, a in arrays.items():
            p.set_array(n, a)
        return _batch_step(p, s.templates, s.searches, targets)[0]

    # h=1e-3 crosses ReLU kinks somewhere on the 37x37 search map
    fd = central_differences(loss_fn, params.named_arrays(), h=1e-6, names=names)
    for n in names:
        assert np.max(relative_error(grads[n], fd[n], floor=1e-4)) < 1e-4, n


def test_train_tracker_deterministic_one_sample():
    s = make_synthetic_translations(1, seed=2)
    cfg = TrainConfig(lr=1e-2, lr_decay=1e-7, weight_decay=1e-4, momentum=0.9,
                      step_factor=0.2, step_every=30, step_start=120, epochs=2,
                      batch_size=64, seed=5)
    a, la = train_tracker(s, cfg, widths=SMALL)
    b, lb = train_tracker(s, cfg, widths=SMALL)
    assert la == lb
    for n, arr in a.named_arrays().items():
        assert arr.tobytes() == b.named_arrays()[n].tobytes()


def test_train_tracker_rejects_empty():
    s = make_synthetic_translations(1, seed=2).subset(np.array([], dtype=int))
    with pytest.raises(ConfigurationError):
        train_tracker(s, TrainConfig(1e-2, 0, 0, 0.9, 0.2, 30, 120, epochs=1))


def test_estimator_api():
    est = DeepPTTracker(conv_widths=SMALL, epochs=1, random_state=0)
    assert est.get_params()["conv_widths"] == SMALL
    s = make_synthetic_translations(8, seed=1)
    est.fit(s)
    assert est.predict(s).shape == (8, 2)
    assert est.decision_function(s).shape == (8, 37, 37)
    assert est.transform(s.templates).shape == (8, 6)
    assert 0.0 <= est.score(s) <= 1.0
    with pytest.raises(ConfigurationError):
        DeepPTTracker(conv_widths=(1, 4, 4)).fit(s)


def test_shallow_stack_rejected_at_feature_extraction(rng):
    params = NetworkParams(conv=init_conv_stack((1, 4, 4), random_state=0))
    with pytest.raises(ConfigurationError):
        extract_template_features(params, rng.integers(0, 256, (19, 19)))
