"""Kernel backend selection.

The spatial kernels (convolution, pooling, bilinear resampling) exist twice:
a compiled Cython extension (aaconv._kernels) and a portable numpy fallback
(aaconv._kernels_py). The extension is preferred when importable; set
AACONV_BACKEND=python or =ext to force a choice, or call use() at runtime.
Everything else in the package routes through the functions re-exported here.
"""

import os

from . import _kernels_py

try:
    from . import _kernels as _ext
except ImportError:
    _ext = None

_BACKENDS = {"python": _kernels_py}
if _ext is not None:
    _BACKENDS["ext"] = _ext

_active_name = None
_active = None


def available() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def use(name: str) -> None:
    """Switch the active kernel backend ('ext' or 'python')."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available()}")
    _active_name = name
    _active = _BACKENDS[name]


def active_name() -> str:
    return _active_name


_requested = os.environ.get("AACONV_BACKEND", "auto")
if _requested == "auto":
    use("ext" if _ext is not None else "python")
else:
    use(_requested)


def conv2d_same(x, w, stride):
    return _active.conv2d_same(x, w, stride)


def conv2d_same_grad_x(dy, w, stride, in_h, in_w):
    return _active.conv2d_same_grad_x(dy, w, stride, in_h, in_w)


def conv2d_same_grad_w(dy, x, stride, k):
    return _active.conv2d_same_grad_w(dy, x, stride, k)


def avg_pool_3x3_s2(x):
    return _active.avg_pool_3x3_s2(x)


def avg_pool_3x3_s2_grad(dy, in_h, in_w):
    return _active.avg_pool_3x3_s2_grad(dy, in_h, in_w)


def bilinear_upsample(x, out_h, out_w):
    return _active.bilinear_upsample(x, out_h, out_w)


def bilinear_upsample_grad(dy, in_h, in_w):
    return _active.bilinear_upsample_grad(dy, in_h, in_w)


def attention_forward(q, k, v, rel_h, rel_w, h, w):
    return _active.attention_forward(q, k, v, rel_h, rel_w, h, w)


def attention_backward(g, attn, q, k, v, relative, h, w):
    return _active.attention_backward(g, attn, q, k, v, relative, h, w)
