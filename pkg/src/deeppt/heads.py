"""Fully connected heads on top of the frozen tracker.

* tracking-score head: vectorised 37x37 score map -> match / no-match
* detector head: 128-d template feature -> trackable / not trackable

Both are small ReLU MLPs ending in a two-way softmax. Training them never
touches the conv stack.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .nn import (
    SCORE_CONFIG,
    AdamState,
    ConfigurationError,
    NetworkParams,
    TrainConfig,
    adam_update,
    cross_entropy,
    head_topology,
    init_dense_stack,
    network_backward,
    network_forward,
    softmax,
)
from .tracker import GRID, DeepPTTracker, extract_template_features, score_maps
from .validation import check_features

log = logging.getLogger(__name__)

SCORE_HEAD = "score"
DETECTOR_HEAD = "detector"
SCORE_HIDDEN = (512, 256)
DETECTOR_HIDDEN = (64,)
DETECTOR_CONFIG = SCORE_CONFIG
CORRECT_TRACK_PX = 3.0


class DegenerateLabelsWarning(UserWarning):
    """Training labels contain a single class."""


def head_probabilities(layers, X, name="head"):
    """Two-class softmax probabilities (N, 2) of a dense stack."""
    params = NetworkParams(heads={name: layers})
    logits = network_forward(params, X, head_topology(name, len(layers)))
    return softmax(logits, axis=-1)


def fit_dense_head(X, y, hidden, config, name="head", layers=None, callback=None):
    """Two-class cross-entropy training of a ReLU MLP; returns (layers, loss curve)."""
    X = check_features(X)
    y = np.asarray(y).astype(np.int64).ravel()
    if len(X) != len(y):
        raise ValueError("X and y have different lengths")
    if len(X) == 0:
        raise ConfigurationError("no training examples")
    if len(np.unique(y)) < 2:
        warnings.warn("training labels contain a single class", DegenerateLabelsWarning,
                      stacklevel=2)
    dtype = X.dtype
    if layers is None:
        layers = init_dense_stack((X.shape[1], *hidden, 2), random_state=config.seed,
                                  dtype=dtype)
    params = NetworkParams(heads={name: layers})
    topo = head_topology(name, len(layers))
    onehot = np.eye(2, dtype=dtype)[y]
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for s in range(0, len(X), config.batch_size):
            idx = np.sort(order[s:s + config.batch_size])
            logits, cache = network_forward(params, X[idx], topo, keep_cache=True)
            loss, g = cross_entropy(softmax(logits, axis=-1), onehot[idx])
            grads, _ = network_backward(params, cache, g / len(idx))
            adam_update(params, grads, state, config, epoch)
            total += float(loss.sum())
        losses.append(total / len(X))
        if callback is not None:
            callback(epoch, losses[-1])
    return params.heads[name], losses


class _DenseHeadClassifier(ClassifierMixin, BaseEstimator):
    _head_name = "head"
    _n_features = None

    def __init__(self, hidden_layer_sizes=(), lr=1e-3, lr_decay=1e-7, weight_decay=1e-5,
                 momentum=0.85, step_factor=0.1, step_every=30, step_start=120,
                 epochs=200, batch_size=64, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
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
    def from_layers(cls, layers, **kwargs):
        est = cls(**kwargs)
        est.layers_ = layers
        est.classes_ = np.array([0, 1])
        est.loss_curve_ = []
        return est

    def fit(self, X, y):
        X = check_features(X, self._n_features)
        self.layers_, self.loss_curve_ = fit_dense_head(
            X, y, tuple(self.hidden_layer_sizes), self.train_config(), self._head_name
        )
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "layers_")
        X = check_features(X, self.layers_[0].weight.shape[1])
        return head_probabilities(self.layers_, X.astype(self.layers_[0].weight.dtype),
                                  self._head_name)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class TrackingScoreClassifier(_DenseHeadClassifier):
    """Match probability from a vectorised 37x37 score map (1369 -> 512 -> 256 -> 2)."""

    _head_name = SCORE_HEAD
    _n_features = GRID * GRID

    def __init__(self, hidden_layer_sizes=SCORE_HIDDEN, lr=1e-3, lr_decay=1e-7,
                 weight_decay=1e-5, momentum=0.85, step_factor=0.1, step_every=30,
                 step_start=120, epochs=200, batch_size=64, random_state=0):
        super().__init__(hidden_layer_sizes, lr, lr_decay, weight_decay, momentum,
                         step_factor, step_every, step_start, epochs, batch_size,
                         random_state)


class TrackabilityClassifier(_DenseHeadClassifier):
    """Trackability probability from a template feature (128 -> 64 -> 2)."""

    _head_name = DETECTOR_HEAD

    def __init__(self, hidden_layer_sizes=DETECTOR_HIDDEN, lr=1e-3, lr_decay=1e-7,
                 weight_decay=1e-5, momentum=0.85, step_factor=0.1, step_every=30,
                 step_start=120, epochs=200, batch_size=64, random_state=0):
        super().__init__(hidden_layer_sizes, lr, lr_decay, weight_decay, momentum,
                         step_factor, step_every, step_start, epochs, batch_size,
                         random_state)


def match_score(head_layers, score):
    """Class-1 probability of the tracking-score head; scalar for one map."""
    score = np.asarray(score)
    single = score.ndim == 2
    X = score.reshape(1 if single else len(score), -1)
    p = head_probabilities(head_layers, X.astype(head_layers[0].weight.dtype))[:, 1]
    return float(p[0]) if single else p


def trackability_score(head_layers, feat):
    """Class-1 probability of the detector head; scalar for one feature."""
    feat = np.asarray(feat)
    single = feat.ndim == 1
    X = feat[None] if single else feat
    p = head_probabilities(head_layers, X.astype(head_layers[0].weight.dtype))[:, 1]
    return float(p[0]) if single else p


def train_score_head(params, templates, searches, labels, config=SCORE_CONFIG,
                     hidden=SCORE_HIDDEN, callback=None):
    """Fit ``params.heads["score"]`` on score maps of labelled patch pairs.

    The conv stack is only read: score maps are computed once with the
    current conv weights and the head is trained on them.
    """
    maps = score_maps(params, templates, searches)
    layers, losses = fit_dense_head(maps.reshape(len(maps), -1), labels, hidden, config,
                                    SCORE_HEAD, callback=callback)
    params.heads[SCORE_HEAD] = layers
    return layers, losses


@dataclass
class LabeledPoints:
    """Detector training labels: one row per kept tracking sample."""

    sample_index: np.ndarray  # (M,) index into the source samples
    positions: np.ndarray  # (M, 2) frame-t (x, y)
    labels: np.ndarray  # (M,) 1 = tracked within tolerance

    def __len__(self):
        return len(self.labels)


def _predictor(tracker):
    if isinstance(tracker, NetworkParams):
        return DeepPTTracker.from_params(tracker)
    if not hasattr(tracker, "predict"):
        raise TypeError("tracker must be NetworkParams or provide predict(samples)")
    return tracker


def generate_detector_labels(tracker, samples, tolerance=CORRECT_TRACK_PX, random_state=0):
    """Label samples by whether the tracker lands within ``tolerance`` px,
    then subsample the majority class down to the minority count."""
    if len(samples) == 0:
        raise ConfigurationError("no samples to label")
    pred = np.asarray(_predictor(tracker).predict(samples))
    err = np.linalg.norm(pred - samples.displacements, axis=1)
    labels = (err <= tolerance).astype(np.int64)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    log.info("detector labels: %d positive, %d negative before balancing", len(pos), len(neg))
    if len(pos) == 0 or len(neg) == 0:
        warnings.warn("tracker results are single-class; returning all points unbalanced",
                      DegenerateLabelsWarning, stacklevel=2)
        keep = np.arange(len(samples))
    else:
        rng = np.random.default_rng(random_state)
        m = min(len(pos), len(neg))
        keep = np.sort(np.concatenate([
            pos if len(pos) == m else rng.choice(pos, m, replace=False),
            neg if len(neg) == m else rng.choice(neg, m, replace=False),
        ]))
    return LabeledPoints(keep, samples.positions[keep], labels[keep])


def train_detector_head(params, templates, labels, config=DETECTOR_CONFIG,
                        hidden=DETECTOR_HIDDEN, callback=None):
    """Fit ``params.heads["detector"]`` on frozen template features."""
    feats = extract_template_features(params, templates)
    if feats.ndim == 1:
        feats = feats[None]
    layers, losses = fit_dense_head(feats, labels, hidden, config, DETECTOR_HEAD,
                                    callback=callback)
    params.heads[DETECTOR_HEAD] = layers
    return layers, losses


def make_score_pairs(samples, seed=0):
    """Matching pairs (each sample's own template/search) plus as many
    non-matching pairs (template re-paired with another sample's search)."""
    n = len(samples)
    if n < 2:
        raise ConfigurationError("need at least two samples to form non-matching pairs")
    rng = np.random.default_rng(seed)
    shift = rng.integers(1, n, size=n)
    other = (np.arange(n) + shift) % n
    templates = np.concatenate([samples.templates, samples.templates])
    searches = np.concatenate([samples.searches, samples.searches[other]])
    labels = np.concatenate([np.ones(n, np.int64), np.zeros(n, np.int64)])
    return templates, searches, labels
