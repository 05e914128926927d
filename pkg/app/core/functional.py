"""Forward and backward primitives of the tensor engine.

Every forward function is pure: it returns a fresh array and never mutates its
inputs. Backward functions take the upstream gradient plus whatever the forward
pass needs to be replayed (inputs, pooling indices) and return gradients with
respect to each input, in the same order as the forward signature.
"""

import logging
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import DimensionError, LabelRangeError, NonFiniteError

logger = logging.getLogger(__name__)

Tensor = np.ndarray


def as_tensor(values, name: str = "tensor") -> Tensor:
    """Convert values to a float64 array and reject NaN/Inf."""
    array = np.asarray(values, dtype=np.float64)
    check_finite(array, name)
    return array


def check_finite(array: Tensor, name: str = "tensor") -> None:
    """Raise NonFiniteError if the array holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name} contains non-finite values")


def dense_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = x @ w + b for x of shape (batch, in) and w of shape (in, out)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"dense expects x[batch,in], w[in,out], b[out]; got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise DimensionError(f"dense shapes do not conform: x{x.shape} w{w.shape} b{b.shape}")
    check_finite(x, "dense input")
    return x @ w + b


def dense_backward(dy: Tensor, x: Tensor, w: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of the affine map with respect to x, w and b."""
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0.0)


def relu_backward(dy: Tensor, x: Tensor) -> Tensor:
    return dy * (x > 0)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv_windows(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    """Strided view of shape (batch, cin, h', w', kh, kw) over the zero-padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv2d_forward(x: Tensor, k: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding.

    Args:
        x: Input of shape (batch, cin, h, w)
        k: Kernel of shape (cout, cin, kh, kw)
        b: Bias of shape (cout,)
        stride: Positive step between windows
        padding: Zero padding added to each spatial border

    Returns:
        Output of shape (batch, cout, h', w') with h' = floor((h + 2p - kh) / stride) + 1
    """
    if x.ndim != 4 or k.ndim != 4 or b.ndim != 1:
        raise DimensionError(
            f"conv2d expects x[b,c,h,w], k[o,c,kh,kw], b[o]; got {x.shape}, {k.shape}, {b.shape}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} or padding {padding}")
    cout, cin, kh, kw = k.shape
    if x.shape[1] != cin or b.shape[0] != cout:
        raise DimensionError(f"conv2d channels do not conform: x{x.shape} k{k.shape} b{b.shape}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {x.shape[2]}x{x.shape[3]} (padding {padding})"
        )
    check_finite(x, "conv2d input")
    windows = _conv_windows(x, kh, kw, stride, padding)
    out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv2d_backward(
    dy: Tensor, x: Tensor, k: Tensor, stride: int = 1, padding: int = 0
) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of conv2d_forward with respect to x, k and b."""
    _, _, kh, kw = k.shape
    windows = _conv_windows(x, kh, kw, stride, padding)
    out_h, out_w = dy.shape[2], dy.shape[3]

    db = dy.sum(axis=(0, 2, 3))
    dk = np.tensordot(dy, windows, axes=([0, 2, 3], [0, 2, 3]))

    # (batch, h', w', cin, kh, kw)
    dwin = np.tensordot(dy, k, axes=([1], [0]))
    n, c, h, w = x.shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return dx, dk, db


def max_pool2d_forward(x: Tensor, size: int = 2) -> Tuple[Tensor, Tensor]:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Returns:
        Tuple of (pooled output, argmax index within each window)
    """
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh < 1 or ow < 1:
        raise DimensionError(f"max pool window {size} larger than input {h}x{w}")
    windows = (
        x[:, :, :oh * size, :ow * size]
        .reshape(n, c, oh, size, ow, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, size * size)
    )
    index = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]
    return out, index


def max_pool2d_backward(dy: Tensor, index: Tensor, input_shape: Sequence[int], size: int = 2) -> Tensor:
    n, c, h, w = input_shape
    oh, ow = dy.shape[2], dy.shape[3]
    dwin = np.zeros((n, c, oh, ow, size * size))
    np.put_along_axis(dwin, index[..., None], dy[..., None], axis=-1)
    dx = np.zeros((n, c, h, w))
    dx[:, :, :oh * size, :ow * size] = (
        dwin.reshape(n, c, oh, ow, size, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh * size, ow * size)
    )
    return dx


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (batch, c, h, w) -> (batch, c)."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global average pooling expects (batch, c, h>=1, w>=1), got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dy: Tensor, input_shape: Sequence[int]) -> Tensor:
    _, _, h, w = input_shape
    return np.broadcast_to(dy[:, :, None, None] / (h * w), tuple(input_shape)).copy()


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tuple[float, Tensor]:
    """Mean negative log-likelihood of the labels under softmax(logits).

    Args:
        logits: Scores of shape (batch, classes)
        labels: Integer class indices of shape (batch,)

    Returns:
        Tuple of (loss, gradient of the loss with respect to logits)
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not conform")
    if logits.shape[0] == 0:
        raise DimensionError("cross-entropy of an empty batch is undefined")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelRangeError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    check_finite(logits, "logits")

    batch = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    loss = float(np.mean(log_norm - shifted[rows, labels]))

    dlogits = np.exp(shifted - log_norm[:, None])
    dlogits[rows, labels] -= 1.0
    dlogits /= batch
    return max(loss, 0.0), dlogits
