"""Differentiable primitives with hand-written backward passes.

Every function accepts either a single sample or a batch with a leading
batch axis: convolution and pooling take ``(C, H, W)`` or ``(B, C, H, W)``,
dense layers take ``(n,)`` or ``(B, n)``. All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PROB_FLOOR = 1e-12


@dataclass
class ConvParams:
    kernels: np.ndarray  # (out_maps, in_maps, k, k)
    bias: np.ndarray  # (out_maps,)

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ShapeError(f"kernels must be (out, in, k, k), got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match out_maps={self.kernels.shape[0]}"
            )

    @property
    def out_maps(self):
        return self.kernels.shape[0]

    @property
    def in_maps(self):
        return self.kernels.shape[1]

    @property
    def k(self):
        return self.kernels.shape[2]


@dataclass
class DenseParams:
    weights: np.ndarray  # (out_units, in_units)
    bias: np.ndarray  # (out_units,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match out_units={self.weights.shape[0]}"
            )

    @property
    def in_units(self):
        return self.weights.shape[1]

    @property
    def out_units(self):
        return self.weights.shape[0]


def _as_batch(x, rank):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected a {rank}-D sample or {rank + 1}-D batch, got shape {x.shape}")


def conv2d_valid(x, p: ConvParams):
    """Stride-1 convolution without padding (cross-correlation, as in CNN libraries)."""
    xb, single = _as_batch(x, 3)
    _, c, h, w = xb.shape
    k = p.k
    if c != p.in_maps:
        raise ShapeError(f"input channels C={c} do not match kernel in_maps={p.in_maps}")
    if h < k:
        raise ShapeError(f"input height H={h} is smaller than kernel size {k}")
    if w < k:
        raise ShapeError(f"input width W={w} is smaller than kernel size {k}")
    windows = sliding_window_view(xb, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
    out = np.tensordot(windows, p.kernels, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    out = out.transpose(0, 3, 1, 2) + p.bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(x, p: ConvParams, grad_out):
    """Gradients of ``sum(grad_out * conv2d_valid(x, p))``.

    Returns ``(grad_input, ConvParams(grad_kernels, grad_bias))``.
    """
    xb, single = _as_batch(x, 3)
    gb = np.asarray(grad_out, dtype=np.float64)
    if single:
        gb = gb[None]
    b, c, h, w = xb.shape
    k = p.k
    expected = (b, p.out_maps, h - k + 1, w - k + 1)
    if gb.shape != expected:
        raise ShapeError(f"grad_out shape {gb.shape[int(single):]} != conv output {expected[int(single):]}")
    ho, wo = expected[2], expected[3]

    windows = sliding_window_view(xb, (k, k), axis=(2, 3))
    grad_k = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
    grad_b = gb.sum(axis=(0, 2, 3))

    grad_x = np.zeros_like(xb)
    for a in range(k):
        for bb in range(k):
            # (B, O, Ho, Wo) x (O, C) -> (B, Ho, Wo, C)
            contrib = np.tensordot(gb, p.kernels[:, :, a, bb], axes=([1], [0]))
            grad_x[:, :, a:a + ho, bb:bb + wo] += contrib.transpose(0, 3, 1, 2)
    return (grad_x[0] if single else grad_x), ConvParams(grad_k, grad_b)


@dataclass
class PoolIndex:
    """Winning positions of a 2x2 max pool.

    ``flat`` has the pooled shape and holds ``row * W + col`` into the
    input plane; ``input_shape`` is the shape of the pooled input.
    """

    flat: np.ndarray
    input_shape: tuple


def maxpool2x2_forward(x):
    xb, single = _as_batch(x, 3)
    b, c, h, w = xb.shape
    if h < 2 or w < 2:
        raise ShapeError(f"max pooling needs H, W >= 2, got H={h}, W={w}")
    ho, wo = h // 2, w // 2
    blocks = xb[:, :, :2 * ho, :2 * wo].reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, ho, wo, 4)
    # argmax returns the first maximum, i.e. the lowest flat index on ties
    local = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + local // 2
    cols = 2 * np.arange(wo)[None, :] + local % 2
    flat = rows * w + cols
    if single:
        return out[0], PoolIndex(flat[0], (c, h, w))
    return out, PoolIndex(flat, (b, c, h, w))


def maxpool2x2_backward(grad_out, index: PoolIndex):
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != index.flat.shape:
        raise ShapeError(f"grad_out shape {g.shape} != pooled shape {index.flat.shape}")
    h, w = index.input_shape[-2:]
    lead = g.shape[:-2]
    grad = np.zeros(lead + (h * w,))
    gflat = g.reshape(lead + (-1,))
    iflat = index.flat.reshape(lead + (-1,))
    # windows are disjoint, so no index repeats within a plane
    np.put_along_axis(grad, iflat, gflat, axis=-1)
    return grad.reshape(index.input_shape)


def dense_forward(x, p: DenseParams):
    xb, single = _as_batch(x, 1)
    if xb.shape[1] != p.in_units:
        raise ShapeError(f"input length {xb.shape[1]} != in_units {p.in_units}")
    out = xb @ p.weights.T + p.bias
    return out[0] if single else out


def dense_backward(x, p: DenseParams, grad_out):
    xb, single = _as_batch(x, 1)
    g = np.asarray(grad_out, dtype=np.float64)
    if single:
        g = g[None]
    if g.shape != (xb.shape[0], p.out_units):
        raise ShapeError(f"grad_out shape {g.shape} != ({xb.shape[0]}, {p.out_units})")
    grad_x = g @ p.weights
    grad_p = DenseParams(g.T @ xb, g.sum(axis=0))
    return (grad_x[0] if single else grad_x), grad_p


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, grad_out, 0.0)


def softmax(x):
    """Softmax over the last axis, shifted by the max for stability."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, n):
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError(f"labels must be integers, got {labels!r}")
        labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"label out of range 0..{n - 1}: {labels!r}")
    return labels


def cross_entropy(probs, label):
    """Negative log-likelihood; a batch of rows gives one loss per row."""
    probs = np.asarray(probs, dtype=np.float64)
    label = _check_labels(label, probs.shape[-1])
    picked = np.take_along_axis(probs, np.reshape(label, probs.shape[:-1] + (1,)), axis=-1)[..., 0]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def cross_entropy_logit_grad(probs, label):
    """Gradient of the cross-entropy w.r.t. the pre-softmax logits: ``p - onehot``."""
    probs = np.asarray(probs, dtype=np.float64)
    label = _check_labels(label, probs.shape[-1])
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, np.reshape(label, probs.shape[:-1] + (1,)), 1.0, axis=-1)
    return probs - onehot


def dropout_forward(x, rate, rng: np.random.Generator):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` holds the per-unit multiplier."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if rate == 0.0:
        mask = np.ones_like(x)
        return x.copy(), mask
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return np.asarray(grad_out, dtype=np.float64) * mask
