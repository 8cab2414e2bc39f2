"""Forward/backward kernels for the layer types used by both architectures.

All tensors are ``(batch, channels, height, width)`` numpy arrays. Kernels are
pure: they never mutate their inputs, and batch-norm returns updated running
statistics instead of writing them in place.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import BadRate, OddSpatialDim, ShapeMismatch


@dataclass
class GradientTape:
    """Gradients produced by one backward call."""

    input: np.ndarray
    params: dict[str, np.ndarray] = field(default_factory=dict)


def _check4(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeMismatch(f"{what} must be a non-empty rank-4 tensor, got shape {x.shape}")


# ---------------------------------------------------------------- convolution

def _im2col3(xs: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) patches for a 3x3 'same' cross-correlation."""
    c, h, w = xs.shape
    xp = np.pad(xs, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, h, w), dtype=xs.dtype)
    for a in range(3):
        for b in range(3):
            cols[:, a * 3 + b] = xp[:, a:a + h, b:b + w]
    return cols.reshape(c * 9, h * w)


def _col2im3(dcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    dcols = dcols.reshape(c, 9, h, w)
    dxp = np.zeros((c, h + 2, w + 2), dtype=dcols.dtype)
    for a in range(3):
        for b in range(3):
            dxp[:, a:a + h, b:b + w] += dcols[:, a * 3 + b]
    return dxp[:, 1:-1, 1:-1]


def _check_conv(x: np.ndarray, weight: np.ndarray) -> int:
    _check4(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] not in (1, 3):
        raise ShapeMismatch(f"conv kernel must be (out, in, k, k) with k in (1, 3), got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    return weight.shape[2]


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 'same' cross-correlation with a 1x1 or 3x3 kernel."""
    k = _check_conv(x, weight)
    n, c, h, w = x.shape
    o = weight.shape[0]
    wmat = weight.reshape(o, c * k * k)
    out = np.empty((n, o, h * w), dtype=np.result_type(x, weight))
    for i in range(n):
        cols = _im2col3(x[i]) if k == 3 else x[i].reshape(c, h * w)
        np.matmul(wmat, cols, out=out[i])
    out += bias.reshape(1, o, 1)
    return out.reshape(n, o, h, w)


def conv2d_backward(x: np.ndarray, weight: np.ndarray, upstream: np.ndarray) -> GradientTape:
    k = _check_conv(x, weight)
    n, c, h, w = x.shape
    o = weight.shape[0]
    if upstream.shape != (n, o, h, w):
        raise ShapeMismatch(f"upstream gradient {upstream.shape} != output shape {(n, o, h, w)}")
    wmat = weight.reshape(o, c * k * k)
    dw = np.zeros_like(wmat)
    dx = np.empty_like(x)
    for i in range(n):
        cols = _im2col3(x[i]) if k == 3 else x[i].reshape(c, h * w)
        dyi = upstream[i].reshape(o, h * w)
        dw += dyi @ cols.T
        dcols = wmat.T @ dyi
        dx[i] = _col2im3(dcols, c, h, w) if k == 3 else dcols.reshape(c, h, w)
    return GradientTape(
        input=dx,
        params={"weight": dw.reshape(weight.shape), "bias": upstream.sum(axis=(0, 2, 3))},
    )


def _check_convT(x: np.ndarray, weight: np.ndarray) -> None:
    _check4(x)
    if weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeMismatch(f"transposed-conv kernel must be (in, out, 2, 2), got {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel expects {weight.shape[0]}")


def conv_transpose2x_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """2x2 kernel, stride 2: every input pixel scatters into its own 2x2 output block."""
    _check_convT(x, weight)
    n, c, h, w = x.shape
    o = weight.shape[1]
    wmat = weight.reshape(c, o * 4).T
    y = np.matmul(wmat, x.reshape(n, c, h * w))  # (n, o*4, h*w)
    y = y.reshape(n, o, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, o, 2 * h, 2 * w)
    return y + bias.reshape(1, o, 1, 1)


def conv_transpose2x_backward(x: np.ndarray, weight: np.ndarray, upstream: np.ndarray) -> GradientTape:
    _check_convT(x, weight)
    n, c, h, w = x.shape
    o = weight.shape[1]
    if upstream.shape != (n, o, 2 * h, 2 * w):
        raise ShapeMismatch(f"upstream gradient {upstream.shape} != output shape {(n, o, 2 * h, 2 * w)}")
    dy = upstream.reshape(n, o, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, o * 4, h * w)
    wmat = weight.reshape(c, o * 4)
    dx = np.matmul(wmat, dy).reshape(n, c, h, w)
    xf = x.reshape(n, c, h * w)
    dw = np.zeros_like(wmat)
    for i in range(n):
        dw += xf[i] @ dy[i].T
    return GradientTape(
        input=dx,
        params={"weight": dw.reshape(weight.shape), "bias": upstream.sum(axis=(0, 2, 3))},
    )


# ------------------------------------------------------------ pooling/resize

def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns the pooled tensor and the flat argmax (0..3) of every window."""
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"maxpool2x2 needs even height and width, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, idx


def maxpool2x2_backward(upstream: np.ndarray, indices: np.ndarray) -> np.ndarray:
    n, c, hh, ww = upstream.shape
    if indices.shape != upstream.shape:
        raise ShapeMismatch(f"argmax indices {indices.shape} do not match gradient {upstream.shape}")
    win = np.zeros((n, c, hh, ww, 4), dtype=upstream.dtype)
    np.put_along_axis(win, indices[..., None].astype(np.intp), upstream[..., None], axis=-1)
    return win.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * ww)


def upsample_nearest2x_forward(x: np.ndarray) -> np.ndarray:
    _check4(x)
    n, c, h, w = x.shape
    return np.broadcast_to(x[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)


def upsample_nearest2x_backward(upstream: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = upstream.shape
    return upstream.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


# --------------------------------------------------------------- batch norm

def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.99,
    eps: float = 1e-5,
):
    """Returns ``(y, cache, new_running_mean, new_running_var)``.

    ``momentum`` weights the old running value (Keras convention).
    """
    _check4(x)
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeMismatch(f"batchnorm {name} has shape {arr.shape}, expected ({c},)")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_mean = momentum * running_mean + (1 - momentum) * mean
        new_var = momentum * running_var + (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.reshape(1, c, 1, 1).astype(x.dtype)) * inv_std.reshape(1, c, 1, 1)
    y = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    cache = (xhat, inv_std, gamma, train)
    return y, cache, new_mean, new_var


def batchnorm_backward(upstream: np.ndarray, cache) -> GradientTape:
    xhat, inv_std, gamma, train = cache
    c = xhat.shape[1]
    axes = (0, 2, 3)
    dgamma = (upstream * xhat).sum(axis=axes)
    dbeta = upstream.sum(axis=axes)
    scale = (gamma * inv_std).reshape(1, c, 1, 1)
    if train:
        m = xhat.size // c
        dx = scale * (upstream - dbeta.reshape(1, c, 1, 1) / m - xhat * (dgamma.reshape(1, c, 1, 1) / m))
    else:
        dx = upstream * scale
    return GradientTape(input=dx, params={"gamma": dgamma, "beta": dbeta})


# --------------------------------------------------------------- activations

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(upstream: np.ndarray, x: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function, kept strictly inside (0, 1)."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x = x.astype(dtype, copy=False)
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dtype, copy=False)
    # 1/(1+e) rounds to exactly 1.0 for large x; stay strictly inside the open interval
    info = np.finfo(dtype)
    return np.clip(y, info.tiny, 1.0 - info.epsneg)


def sigmoid_backward(upstream: np.ndarray, y: np.ndarray) -> np.ndarray:
    return upstream * y * (1 - y)


def activation_forward(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu_forward(x)
    if kind == "sigmoid":
        return sigmoid_forward(x)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------- concat/dropout

def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel concatenation, ``a`` first."""
    _check4(a, "first operand")
    _check4(b, "second operand")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"cannot concatenate {a.shape} and {b.shape}: batch/spatial dims differ")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, at: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`concat_channels`; also routes the concat gradient."""
    return x[:, :at], x[:, at:]


def dropout_forward(x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(y, keep_mask)``; the mask is None when inactive."""
    if not 0 <= rate < 1:
        raise BadRate(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")
    if not train or rate == 0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape, dtype=np.float64) >= rate
    return x * keep / np.asarray(1 - rate, dtype=x.dtype), keep


def dropout_backward(upstream: np.ndarray, keep: np.ndarray | None, rate: float) -> np.ndarray:
    if keep is None:
        return upstream
    return upstream * keep / np.asarray(1 - rate, dtype=upstream.dtype)
