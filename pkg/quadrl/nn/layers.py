"""
Forward/backward kernels on numpy arrays.

Layouts: images (N, C, H, W); conv weights (F, C, k, k); dense weights (out, in).
Convolutions are valid (no padding). Every kernel keeps the input dtype, so the
same code runs float32 at runtime and float64 for gradient checks.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from quadrl.domain.errors import ShapeError


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) view, no copy
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    x4, single = _as_batch(np.asarray(x))
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv weights must be (F, C, k, k), got {w.shape}")
    f, c, k, _ = w.shape
    if x4.shape[1] != c:
        raise ShapeError(f"input has {x4.shape[1]} channels, weights expect {c}")
    if b.shape != (f,):
        raise ShapeError(f"bias must be ({f},), got {b.shape}")
    if x4.shape[2] < k or x4.shape[3] < k:
        raise ShapeError(f"input {x4.shape[2:]} smaller than kernel {k}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")

    win = _windows(x4, k, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, F)
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x4.dtype)
    return out[0] if single else out


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, stride: int, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_input, d_weights, d_bias)."""
    x4, single = _as_batch(np.asarray(x))
    g4 = grad_out[None] if single else grad_out
    f, c, k, _ = w.shape
    n, _, h, wd = x4.shape
    ho, wo = conv_output_size(h, k, stride), conv_output_size(wd, k, stride)
    if g4.shape != (n, f, ho, wo):
        raise ShapeError(f"upstream gradient {g4.shape} does not match conv output {(n, f, ho, wo)}")

    db = g4.sum(axis=(0, 2, 3))
    dw = np.tensordot(g4, _windows(x4, k, stride), axes=([0, 2, 3], [0, 2, 3]))  # (F, C, k, k)

    dx = np.zeros_like(x4)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(g4, w[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
            dx[:, :, i:i + span_h:stride, j:j + span_w:stride] += contrib.transpose(0, 3, 1, 2)

    return (dx[0] if single else dx), dw.astype(w.dtype, copy=False), db.astype(w.dtype, copy=False)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu grad shape {grad_out.shape} != input {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} are inconsistent")
    return x @ w.T + b


def linear_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"linear grad shape {grad_out.shape} != {(x.shape[0], w.shape[0])}")
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def flatten_forward(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def flatten_backward(shape: Tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
    return grad_out.reshape(shape)


def concat_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat needs (N, *) operands with equal N, got {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_backward(split: int, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return grad_out[:, :split], grad_out[:, split:]


def he_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)
