"""Parameter containers and a fixed layer-stack executor.

A topology is a sequence of layer tokens executed in order::

    "conv:<i>"            conv layer i of ``NetworkParams.conv``
    "relu"                elementwise max(0, x)
    "flatten"             (N, H, W, C) -> (N, H * W * C)
    "dense:<head>:<j>"    dense layer j of head ``<head>``
    "softmax"             softmax over the last axis

There is no autodiff graph: :func:`network_backward` walks the cached
activations of one :func:`network_forward` call in reverse.
"""
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .layers import ShapeError

# tracker conv stack channel widths (input first)
DEFAULT_CONV_WIDTHS = (1, 16, 16, 32, 32, 64, 64, 96, 96, 128)


class ConfigurationError(ValueError):
    """Raised when a topology or parameter set does not chain consistently."""


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out, in, 3, 3)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (3, 3):
            raise ShapeError(f"conv kernels must be (out, in, 3, 3), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("conv bias length must equal out-channels")

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"dense weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )


@dataclass
class NetworkParams:
    """All learnable arrays: the shared conv stack plus named dense heads."""

    conv: list = field(default_factory=list)
    heads: dict = field(default_factory=dict)

    def __post_init__(self):
        for prev, nxt in zip(self.conv, self.conv[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ConfigurationError(
                    f"conv widths do not chain: {prev.out_channels} -> {nxt.in_channels}"
                )
        for name, stack in self.heads.items():
            for prev, nxt in zip(stack, stack[1:]):
                if prev.weight.shape[0] != nxt.weight.shape[1]:
                    raise ConfigurationError(f"head {name!r} widths do not chain")

    @property
    def conv_widths(self):
        if not self.conv:
            return ()
        return (self.conv[0].in_channels,) + tuple(c.out_channels for c in self.conv)

    def named_arrays(self):
        """Ordered mapping ``name -> array`` (views, not copies)."""
        out = {}
        for i, layer in enumerate(self.conv):
            out[f"conv.{i}.weight"] = layer.weight
            out[f"conv.{i}.bias"] = layer.bias
        for head, stack in self.heads.items():
            for j, layer in enumerate(stack):
                out[f"{head}.{j}.weight"] = layer.weight
                out[f"{head}.{j}.bias"] = layer.bias
        return out

    def set_array(self, name, value):
        layer = self._layer(name)
        attr = name.rsplit(".", 1)[1]
        current = getattr(layer, attr)
        if current.shape != value.shape:
            raise ShapeError(f"{name}: expected shape {current.shape}, got {value.shape}")
        setattr(layer, attr, value)

    def _layer(self, name):
        group, idx, _ = name.rsplit(".", 2)
        if group == "conv":
            return self.conv[int(idx)]
        return self.heads[group][int(idx)]

    def copy(self):
        return NetworkParams(
            conv=[ConvLayer(c.weight.copy(), c.bias.copy()) for c in self.conv],
            heads={
                k: [DenseLayer(d.weight.copy(), d.bias.copy()) for d in v]
                for k, v in self.heads.items()
            },
        )

    def astype(self, dtype):
        return NetworkParams(
            conv=[ConvLayer(c.weight.astype(dtype), c.bias.astype(dtype)) for c in self.conv],
            heads={
                k: [DenseLayer(d.weight.astype(dtype), d.bias.astype(dtype)) for d in v]
                for k, v in self.heads.items()
            },
        )


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_conv_stack(widths=DEFAULT_CONV_WIDTHS, random_state=None, dtype=np.float32):
    """He-normal kernels and zero biases for a chain of 3x3 conv layers."""
    rng = np.random.default_rng(random_state)
    return [
        ConvLayer(
            _he_normal(rng, (c_out, c_in, 3, 3), 9 * c_in, dtype),
            np.zeros(c_out, dtype=dtype),
        )
        for c_in, c_out in zip(widths[:-1], widths[1:])
    ]


def init_dense_stack(widths, random_state=None, dtype=np.float32):
    rng = np.random.default_rng(random_state)
    return [
        DenseLayer(_he_normal(rng, (n_out, n_in), n_in, dtype), np.zeros(n_out, dtype=dtype))
        for n_in, n_out in zip(widths[:-1], widths[1:])
    ]


def conv_topology(n_layers, relu_last=False):
    """conv/ReLU alternation; the last conv stays linear unless ``relu_last``."""
    tokens = []
    for i in range(n_layers):
        tokens.append(f"conv:{i}")
        if i < n_layers - 1 or relu_last:
            tokens.append("relu")
    return tokens


def head_topology(name, n_layers, softmax=False):
    tokens = []
    for j in range(n_layers):
        tokens.append(f"dense:{name}:{j}")
        if j < n_layers - 1:
            tokens.append("relu")
    if softmax:
        tokens.append("softmax")
    return tokens


@dataclass
class ForwardCache:
    topology: list
    inputs: list  # input to each step
    outputs: list  # softmax outputs; None for other steps


def _parse(token):
    kind, *rest = token.split(":")
    return kind, rest


def network_forward(params, x, topology, keep_cache=False):
    """Run ``x`` through ``topology``.

    Returns the output, or ``(output, cache)`` when ``keep_cache`` is set.
    """
    topology = list(topology)
    inputs, outputs = [], []
    h = x
    for token in topology:
        kind, rest = _parse(token)
        if keep_cache:
            inputs.append(h)
        try:
            if kind == "conv":
                layer = params.conv[int(rest[0])]
                h = layers.conv2d_forward(h, layer.weight, layer.bias)
            elif kind == "relu":
                h = layers.relu(h)
            elif kind == "flatten":
                h = h.reshape(h.shape[0], -1)
            elif kind == "dense":
                layer = params.heads[rest[0]][int(rest[1])]
                h = layers.dense_forward(h, layer.weight, layer.bias)
            elif kind == "softmax":
                h = layers.softmax(h, axis=-1)
            else:
                raise ConfigurationError(f"unknown layer token {token!r}")
        except (ShapeError, IndexError, KeyError) as exc:
            raise ConfigurationError(f"topology step {token!r} failed: {exc}") from exc
        if keep_cache:
            outputs.append(h if kind == "softmax" else None)
    if keep_cache:
        return h, ForwardCache(topology, inputs, outputs)
    return h


def network_backward(params, cache, grad_out, frozen=(), need_input_grad=False):
    """Backpropagate ``grad_out`` through a cached forward pass.

    Parameters
    ----------
    frozen : iterable of str
        Name prefixes (e.g. ``"conv"``) whose gradients are not computed.
        Frozen layers still pass gradients through to earlier layers when
        those are trainable or an input gradient is requested.

    Returns
    -------
    grads : dict
        ``name -> gradient`` for every trainable parameter touched.
    grad_input : ndarray or None
    """
    if cache is None:
        raise RuntimeError("network_backward needs the cache of a forward pass")
    frozen = tuple(frozen)

    def is_frozen(name):
        return any(name == p or name.startswith(p + ".") for p in frozen)

    topology = cache.topology
    trainable = [
        k for k, token in enumerate(topology)
        if (name := _param_prefix(*_parse(token))) is not None and not is_frozen(name)
    ]
    if need_input_grad:
        stop = 0
    elif trainable:
        stop = trainable[0]
    else:
        return {}, None

    grads = {}
    g = grad_out
    for k in range(len(topology) - 1, stop - 1, -1):
        kind, rest = _parse(topology[k])
        x_in = cache.inputs[k]
        want_input = need_input_grad or k > stop
        prefix = _param_prefix(kind, rest)
        if kind == "conv":
            layer = params.conv[int(rest[0])]
            if is_frozen(prefix):
                gx = layers.conv2d_backward(x_in, layer.weight, g)[0] if want_input else None
            else:
                gx, gw, gb = layers.conv2d_backward(x_in, layer.weight, g, want_input)
                grads[prefix + ".weight"] = gw
                grads[prefix + ".bias"] = gb
            g = gx
        elif kind == "dense":
            layer = params.heads[rest[0]][int(rest[1])]
            gx, gw, gb = layers.dense_backward(x_in, layer.weight, g, want_input)
            if not is_frozen(prefix):
                grads[prefix + ".weight"] = gw
                grads[prefix + ".bias"] = gb
            g = gx
        elif kind == "relu":
            g = layers.relu_backward(x_in, g)
        elif kind == "flatten":
            g = g.reshape(x_in.shape)
        elif kind == "softmax":
            g = layers.softmax_backward(cache.outputs[k], g)
    return grads, (g if need_input_grad else None)


def _param_prefix(kind, rest):
    if kind == "conv":
        return f"conv.{rest[0]}"
    if kind == "dense":
        return f"{rest[0]}.{rest[1]}"
    return None
