"""Two-branch correlation tracker.

A shared stack of valid 3x3 convolutions maps the 19x19 template patch to
one feature vector and the 55x55 search patch to a 37x37 grid of feature
vectors. Their per-cell dot products form the score map whose argmax is
the predicted displacement. Score map cell ``(r, c)`` corresponds to
displacement ``(dx, dy) = (c - 18, r - 18)``.
"""
import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datasets import SEARCH_SIZE, TEMPLATE_SIZE, WINDOW_RADIUS, TrackingSamples
from .nn import (
    DEFAULT_CONV_WIDTHS,
    AdamState,
    ConfigurationError,
    NetworkParams,
    ShapeError,
    TrainConfig,
    adam_update,
    conv_topology,
    cross_entropy,
    init_conv_stack,
    network_backward,
    network_forward,
    softmax,
)
from .validation import check_patches, check_tracking_samples

log = logging.getLogger(__name__)

GRID = 2 * WINDOW_RADIUS + 1  # 37
TARGET_SIGMA = 1.0
INFERENCE_BATCH = 64


def normalize_patches(patches, dtype=np.float32):
    """Scale to [0, 1], subtract each patch's mean, add a channel axis."""
    p = np.asarray(patches, dtype=np.float64) / 255.0
    p -= p.mean(axis=(-2, -1), keepdims=True)
    return p.astype(dtype)[..., None]


def _branch(params):
    return conv_topology(len(params.conv))


def extract_template_features(params, patches):
    """Conv-stack features of 19x19 patches: (N, C), or (C,) for a single patch."""
    single = np.ndim(patches) == 2
    patches = check_patches(patches, TEMPLATE_SIZE)
    out = network_forward(params, normalize_patches(patches), _branch(params))
    if out.shape[1:3] != (1, 1):
        raise ConfigurationError(f"conv stack maps 19x19 to {out.shape[1:3]}, expected 1x1")
    feats = out[:, 0, 0, :]
    return feats[0] if single else feats


def extract_search_features(params, patches):
    """Conv-stack feature maps of 55x55 patches: (N, 37, 37, C)."""
    single = np.ndim(patches) == 2
    patches = check_patches(patches, SEARCH_SIZE)
    out = network_forward(params, normalize_patches(patches), _branch(params))
    if out.shape[1:3] != (GRID, GRID):
        raise ConfigurationError(f"conv stack maps 55x55 to {out.shape[1:3]}, expected 37x37")
    return out[0] if single else out


def correlate(template, search):
    """Score map ``score[r, c] = dot(template, search[r, c])``, batched or single."""
    template = np.asarray(template)
    search = np.asarray(search)
    if search.shape[-1] != template.shape[-1] or search.shape[-3:-1] != (GRID, GRID):
        raise ShapeError(f"cannot correlate template {template.shape} with search {search.shape}")
    if template.ndim == 1:
        return search @ template
    return np.einsum("nc,nhwc->nhw", template, search)


def predict_displacement(score):
    """Integer ``(dx, dy)`` of the score-map argmax; ties go to the first row-major cell.

    Accepts one (37, 37) map or a batch (N, 37, 37) and returns (2,) or (N, 2).
    """
    score = np.asarray(score)
    flat = score.reshape(-1, GRID * GRID)
    idx = np.argmax(flat, axis=1)  # first occurrence
    r, c = np.divmod(idx, GRID)
    d = np.stack([c - WINDOW_RADIUS, r - WINDOW_RADIUS], axis=1)
    return d[0] if score.ndim == 2 else d


def build_target_distribution(gt, sigma=TARGET_SIGMA):
    """37x37 target: a 3x3 Gaussian at the ground-truth cell, clipped and renormalised."""
    dx, dy = (int(v) for v in gt)
    if abs(dx) > WINDOW_RADIUS or abs(dy) > WINDOW_RADIUS:
        raise ValueError(f"ground truth {gt} outside the +-{WINDOW_RADIUS} window")
    target = np.zeros((GRID, GRID))
    r0, c0 = dy + WINDOW_RADIUS, dx + WINDOW_RADIUS
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            r, c = r0 + i, c0 + j
            if 0 <= r < GRID and 0 <= c < GRID:
                target[r, c] = np.exp(-(i * i + j * j) / (2.0 * sigma * sigma))
    return target / target.sum()


def build_target_batch(displacements, dtype=np.float32):
    return np.stack([build_target_distribution(d) for d in displacements]).astype(dtype)


def tracker_loss(score, target):
    """Softmax over all 1369 cells, then cross-entropy against ``target``.

    Returns ``(loss, grad)`` with ``grad = softmax(score) - target`` shaped
    like ``score``. Batched inputs give one loss per map.
    """
    score = np.asarray(score)
    target = np.asarray(target)
    if score.shape != target.shape or score.shape[-2:] != (GRID, GRID):
        raise ShapeError(f"score {score.shape} and target {target.shape} must both be 37x37")
    flat = score.reshape(-1, GRID * GRID)
    loss, grad = cross_entropy(softmax(flat, axis=-1), target.reshape(flat.shape).astype(flat.dtype))
    grad = grad.reshape(score.shape)
    return (loss[0] if score.ndim == 2 else loss), grad


def _batch_step(params, templates, searches, targets):
    """Forward + backward for one mini-batch; returns mean loss and grads."""
    topo = _branch(params)
    t_in = normalize_patches(templates)
    s_in = normalize_patches(searches)
    t_out, t_cache = network_forward(params, t_in, topo, keep_cache=True)
    s_out, s_cache = network_forward(params, s_in, topo, keep_cache=True)
    t_feat = t_out[:, 0, 0, :]
    score = np.einsum("nc,nhwc->nhw", t_feat, s_out)
    loss, g_score = tracker_loss(score, targets)
    n = len(templates)
    g_score /= n
    g_t = np.einsum("nhw,nhwc->nc", g_score, s_out)[:, None, None, :]
    g_s = g_score[..., None] * t_feat[:, None, None, :]
    grads, _ = network_backward(params, t_cache, g_t)
    grads_s, _ = network_backward(params, s_cache, g_s)
    for k, g in grads_s.items():
        grads[k] = grads[k] + g
    return float(loss.mean()), grads


def train_tracker(samples, config, params=None, widths=DEFAULT_CONV_WIDTHS, callback=None):
    """Train the shared conv stack on tracking samples.

    Returns the trained params and the per-epoch mean loss.
    """
    if len(samples) == 0:
        raise ConfigurationError("no training samples")
    if params is None:
        params = NetworkParams(conv=init_conv_stack(widths, random_state=config.seed))
    rng = np.random.default_rng(config.seed)
    targets = build_target_batch(samples.displacements)
    state = AdamState()
    losses = []
    n = len(samples)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            loss, grads = _batch_step(
                params, samples.templates[idx], samples.searches[idx], targets[idx]
            )
            adam_update(params, grads, state, config, epoch)
            total += loss * len(idx)
        losses.append(total / n)
        log.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, losses[-1])
        if callback is not None:
            callback(epoch, losses[-1])
    return params, losses


def score_maps(params, templates, searches, batch_size=INFERENCE_BATCH):
    """Score maps (N, 37, 37) for paired template/search patches."""
    templates = check_patches(templates, TEMPLATE_SIZE)
    searches = check_patches(searches, SEARCH_SIZE)
    if len(templates) != len(searches):
        raise ValueError("templates and searches differ in length")
    out = np.empty((len(templates), GRID, GRID), dtype=np.float32)
    for s in range(0, len(templates), batch_size):
        t = extract_template_features(params, templates[s:s + batch_size])
        f = extract_search_features(params, searches[s:s + batch_size])
        out[s:s + batch_size] = correlate(t, f)
    return out


class DeepPTTracker(BaseEstimator):
    """Correlation tracker with a learned 9-layer conv stack.

    Parameters
    ----------
    conv_widths : tuple of int
        Channel widths of the conv stack, input channel first. Nine layers
        are needed for the 19 -> 1 and 55 -> 37 shape law.
    lr, lr_decay, weight_decay, momentum, step_factor, step_every, step_start
        Optimizer settings, see :class:`deeppt.nn.TrainConfig`.
    epochs, batch_size : int
    random_state : int
        Seeds both initialisation and shuffling.

    Attributes
    ----------
    params_ : NetworkParams
    loss_curve_ : list of float
        Mean training loss per epoch.
    """

    def __init__(self, conv_widths=DEFAULT_CONV_WIDTHS, lr=1e-2, lr_decay=1e-7,
                 weight_decay=1e-4, momentum=0.9, step_factor=0.2, step_every=30,
                 step_start=120, epochs=200, batch_size=64, random_state=0):
        self.conv_widths = conv_widths
        self.lr = lr
        self.lr_decay = lr_decay
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.step_factor = step_factor
        self.step_every = step_every
        self.step_start = step_start
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def train_config(self):
        return TrainConfig(
            lr=self.lr, lr_decay=self.lr_decay, weight_decay=self.weight_decay,
            momentum=self.momentum, step_factor=self.step_factor,
            step_every=self.step_every, step_start=self.step_start,
            epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state,
        )

    @classmethod
    def from_params(cls, params, **kwargs):
        est = cls(conv_widths=params.conv_widths, **kwargs)
        est.params_ = params
        est.loss_curve_ = []
        return est

    def fit(self, X, y=None, callback=None):
        X = check_tracking_samples(X)
        if len(self.conv_widths) != 10:
            raise ConfigurationError("the tracker needs exactly nine conv layers")
        self.params_, self.loss_curve_ = train_tracker(
            X, self.train_config(), widths=tuple(self.conv_widths), callback=callback
        )
        return self

    def decision_function(self, X):
        """Score maps (N, 37, 37)."""
        check_is_fitted(self, "params_")
        X = check_tracking_samples(X)
        return score_maps(self.params_, X.templates, X.searches)

    def predict(self, X):
        """Predicted ``(dx, dy)`` per sample, shape (N, 2)."""
        return predict_displacement(self.decision_function(X))

    def transform(self, X):
        """Template features (N, C) for 19x19 patches."""
        check_is_fitted(self, "params_")
        X = check_patches(X, TEMPLATE_SIZE)
        return np.concatenate([
            extract_template_features(self.params_, X[s:s + INFERENCE_BATCH])
            for s in range(0, len(X), INFERENCE_BATCH)
        ]) if len(X) else np.empty((0, self.params_.conv_widths[-1]), np.float32)

    def score(self, X, y=None, threshold=1.0):
        """Fraction of samples localised within ``threshold`` pixels."""
        X = check_tracking_samples(X)
        err = np.linalg.norm(self.predict(X) - X.displacements, axis=1)
        return float(np.mean(err <= threshold))


def as_samples(templates, searches, displacements=None):
    n = len(templates)
    if displacements is None:
        displacements = np.zeros((n, 2), dtype=np.int64)
    return TrackingSamples(np.asarray(templates, np.uint8), np.asarray(searches, np.uint8),
                           np.asarray(displacements, np.int64))
