"""Forward numerical primitives over (batch, height, width, channels) arrays.

Tensors are plain C-contiguous numpy arrays, float32 by default, float64 in
verification work. All functions are pure and deterministic; accumulation
happens in the input dtype.
"""

import numpy as np

from . import backend
from .errors import InputError, NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


def as_tensor4(x, dtype=np.float32):
    """Validate/coerce x into a rank-4 float array with all dims >= 1."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
    return arr


def matmul(a, b):
    """Plain 2-D matrix product."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x):
    """Row-stabilized softmax over the last axis."""
    x = np.asarray(x)
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def conv2d(x, w, stride=1):
    """'same'-padded cross-correlation; w is (k, k, C_in, C_out), no bias."""
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input/kernel, got {x.shape}, {w.shape}")
    if w.shape[0] != w.shape[1]:
        raise ShapeError(f"square kernels only, got {w.shape[:2]}")
    if w.shape[2] != x.shape[3]:
        raise ShapeError(
            f"kernel expects {w.shape[2]} input channels, tensor has {x.shape[3]}"
        )
    if w.shape[0] == 1 and stride == 1:
        # pointwise convolution is a channel matmul
        b, h, wd, ci = x.shape
        out = x.reshape(b * h * wd, ci) @ w[0, 0]
        return out.reshape(b, h, wd, w.shape[3])
    return backend.conv2d_same(x, w, stride)


def avg_pool_3x3_s2(x):
    """3x3/stride-2 average pooling, 'same', padding excluded from means."""
    return backend.avg_pool_3x3_s2(np.ascontiguousarray(x))


def bilinear_upsample(x, out_h, out_w):
    """Resize spatial dims up to (out_h, out_w) by bilinear interpolation."""
    x = np.ascontiguousarray(x)
    if out_h < x.shape[1] or out_w < x.shape[2]:
        raise ShapeError(f"cannot downsample {x.shape[1:3]} to ({out_h}, {out_w})")
    if (out_h, out_w) == x.shape[1:3]:
        return x.copy()
    return backend.bilinear_upsample(x, out_h, out_w)


def batchnorm(x, gamma, beta, eps=1e-5, mean=None, var=None):
    """Per-channel normalization followed by the learned affine.

    With mean/var omitted, batch statistics over (B, H, W) are used
    (training mode) and returned alongside the output; pass stored running
    statistics for inference mode.
    """
    x = np.asarray(x)
    stats_supplied = mean is not None
    if not stats_supplied:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    y = gamma * ((x - mean) * inv) + beta
    if stats_supplied:
        return y
    return y, mean, var


def relu(x):
    return np.maximum(x, 0)


def global_avg_pool(x):
    """(B, H, W, C) -> (B, C) spatial mean."""
    return np.asarray(x).mean(axis=(1, 2))


def dense(x, w, b):
    """Affine layer on (B, C) features."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense expects (B, {w.shape[0]}), got {x.shape}")
    return x @ w + b


def log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_with_logits(logits, labels):
    """Mean negative log-likelihood of integer labels under logits (B, K)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InputError(
            f"label out of range for {logits.shape[1]} classes: "
            f"[{labels.min()}, {labels.max()}]"
        )
    logp = log_softmax(logits)
    return -logp[np.arange(len(labels)), labels].mean()
