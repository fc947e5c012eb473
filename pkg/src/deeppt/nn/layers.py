"""Layer primitives with explicit forward/backward passes.

Feature tensors are numpy arrays in (batch, height, width, channels)
order; convolution kernels are stored as (out, in, 3, 3). Functions are
dtype-preserving: float32 for training and inference, float64 when
gradient checks need it.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KERNEL_SIZE = 3


class ShapeError(ValueError):
    """Raised when an input does not have the extents a layer expects."""


def _im2col(x):
    # (N, H, W, C) -> (N * H' * W', 9 * C), column order (ky, kx, c)
    n, h, w, c = x.shape
    win = sliding_window_view(x, (KERNEL_SIZE, KERNEL_SIZE), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(n * (h - 2) * (w - 2), KERNEL_SIZE * KERNEL_SIZE * c)


def _kernel_matrix(weight):
    # (O, C, 3, 3) -> (9 * C, O), row order (ky, kx, c) to match _im2col
    o, c = weight.shape[:2]
    return weight.transpose(2, 3, 1, 0).reshape(KERNEL_SIZE * KERNEL_SIZE * c, o)


def conv2d_forward(x, weight, bias):
    """Valid 3x3 convolution (cross-correlation), stride 1, no padding.

    Parameters
    ----------
    x : ndarray of shape (N, H, W, C)
    weight : ndarray of shape (O, C, 3, 3)
    bias : ndarray of shape (O,)

    Returns
    -------
    ndarray of shape (N, H - 2, W - 2, O)
    """
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D (N, H, W, C), got shape {x.shape}")
    if weight.shape[1:] != (x.shape[3], KERNEL_SIZE, KERNEL_SIZE):
        raise ShapeError(
            f"kernel {weight.shape} does not accept {x.shape[3]} input channels"
        )
    n, h, w, _ = x.shape
    if h < KERNEL_SIZE or w < KERNEL_SIZE:
        raise ShapeError(f"spatial extents {(h, w)} smaller than the 3x3 kernel")
    out = _im2col(x) @ _kernel_matrix(weight)
    out += bias
    return out.reshape(n, h - 2, w - 2, weight.shape[0])


def conv2d_backward(x, weight, grad_out, need_input_grad=True):
    """Gradients of :func:`conv2d_forward`.

    Returns ``(grad_x, grad_weight, grad_bias)``; ``grad_x`` is None when
    ``need_input_grad`` is False.
    """
    n, h, w, c = x.shape
    o = weight.shape[0]
    g2 = grad_out.reshape(-1, o)
    grad_w = _im2col(x).T @ g2
    grad_weight = grad_w.reshape(KERNEL_SIZE, KERNEL_SIZE, c, o).transpose(3, 2, 0, 1)
    grad_bias = g2.sum(axis=0)
    grad_x = None
    if need_input_grad:
        pad = KERNEL_SIZE - 1
        padded = np.pad(grad_out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        # full correlation with the flipped kernel, channels swapped
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        grad_x = (_im2col(padded) @ _kernel_matrix(flipped)).reshape(n, h, w, c)
    return grad_x, np.ascontiguousarray(grad_weight), grad_bias


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def dense_forward(x, weight, bias):
    """Affine map ``weight @ x + bias`` applied to each row of ``x``.

    ``x`` may be a single vector of length ``in`` or a batch (N, in).
    """
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"dense layer expects {weight.shape[1]} inputs, got {x.shape[-1]}"
        )
    return x @ weight.T + bias


def dense_backward(x, weight, grad_out, need_input_grad=True):
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_out)
    grad_weight = g2.T @ x2
    grad_bias = g2.sum(axis=0)
    grad_x = grad_out @ weight if need_input_grad else None
    return grad_x, grad_weight, grad_bias


def softmax(scores, axis=-1):
    """Numerically stable softmax along ``axis``."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ShapeError("softmax of an empty vector")
    if not np.all(np.isfinite(scores)):
        raise ValueError("softmax input contains non-finite values")
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs, grad_out, axis=-1):
    return probs * (grad_out - (grad_out * probs).sum(axis=axis, keepdims=True))


def cross_entropy(pred, target, axis=-1):
    """Cross-entropy ``-sum(target * log(pred))`` and its gradient w.r.t. logits.

    ``pred`` must be a softmax output; the returned gradient is with
    respect to the pre-softmax scores, i.e. ``pred - target``. Batched
    inputs return one loss per row.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    sums = target.sum(axis=axis)
    if np.any(target < 0) or not np.allclose(sums, 1.0, atol=1e-5):
        raise ValueError("target is not a probability distribution")
    tiny = np.finfo(pred.dtype).tiny
    # zero-weight terms drop out even if pred underflowed to 0
    terms = np.where(target > 0, target * np.log(np.maximum(pred, tiny)), 0.0)
    loss = -terms.sum(axis=axis)
    return loss, pred - target
