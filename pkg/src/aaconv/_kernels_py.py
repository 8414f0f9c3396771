"""Pure-numpy implementations of the hot spatial kernels.

This is the portable fallback for the compiled extension in _kernels.pyx;
the two expose identical signatures and are selected in backend.py. All
tensors are (batch, height, width, channels), C-contiguous, float32 or
float64.
"""

import numpy as np

from ._padding import bilinear_coords, same_pad


def conv2d_same(x, w, stride):
    """'same'-padded cross-correlation of x (B,H,W,Ci) with w (k,k,Ci,Co)."""
    b, h, wd, _ = x.shape
    k = w.shape[0]
    oh, pt, pb = same_pad(h, k, stride)
    ow, pl, pr = same_pad(wd, k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, OH, OW, Ci, k, k)
    # contract over (ky, kx, ci) against w (ky, kx, ci, co)
    return np.ascontiguousarray(
        np.tensordot(win, w, axes=([4, 5, 3], [0, 1, 2]))
    )


def conv2d_same_grad_x(dy, w, stride, in_h, in_w):
    """Gradient of conv2d_same w.r.t. its input."""
    b, oh, ow, co = dy.shape
    k = w.shape[0]
    _, pt, _ = same_pad(in_h, k, stride)
    _, pl, _ = same_pad(in_w, k, stride)
    ph = max((oh - 1) * stride + k, in_h + pt)
    pw = max((ow - 1) * stride + k, in_w + pl)
    dxp = np.zeros((b, ph, pw, w.shape[2]), dtype=dy.dtype)
    for ky in range(k):
        for kx in range(k):
            patch = dy @ w[ky, kx].T  # (B, OH, OW, Ci)
            dxp[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += patch
    return np.ascontiguousarray(dxp[:, pt : pt + in_h, pl : pl + in_w])


def conv2d_same_grad_w(dy, x, stride, k):
    """Gradient of conv2d_same w.r.t. the kernel."""
    b, h, wd, ci = x.shape
    _, oh, ow, co = dy.shape
    _, pt, pb = same_pad(h, k, stride)
    _, pl, pr = same_pad(wd, k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    dw = np.empty((k, k, ci, co), dtype=dy.dtype)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride]
            dw[ky, kx] = np.tensordot(patch, dy, axes=([0, 1, 2], [0, 1, 2]))
    return dw


def avg_pool_3x3_s2(x):
    """3x3 average pooling, stride 2, 'same' padding, padded cells excluded."""
    b, h, wd, c = x.shape
    oh, pt, pb = same_pad(h, 3, 2)
    ow, pl, pr = same_pad(wd, 3, 2)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    valid = np.pad(np.ones((h, wd), dtype=x.dtype), ((pt, pb), (pl, pr)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
    vwin = np.lib.stride_tricks.sliding_window_view(valid, (3, 3), axis=(0, 1))[::2, ::2]
    counts = vwin.sum(axis=(2, 3))  # (OH, OW)
    out = win.sum(axis=(4, 5)) / counts[None, :, :, None]
    return np.ascontiguousarray(out)


def avg_pool_3x3_s2_grad(dy, in_h, in_w):
    """Gradient of avg_pool_3x3_s2: spread dy/count over valid window cells."""
    b, oh, ow, c = dy.shape
    _, pt, pb = same_pad(in_h, 3, 2)
    _, pl, pr = same_pad(in_w, 3, 2)
    valid = np.pad(np.ones((in_h, in_w), dtype=dy.dtype), ((pt, pb), (pl, pr)))
    vwin = np.lib.stride_tricks.sliding_window_view(valid, (3, 3), axis=(0, 1))[::2, ::2]
    counts = vwin.sum(axis=(2, 3))
    share = dy / counts[None, :, :, None]
    dxp = np.zeros((b, in_h + pt + pb, in_w + pl + pr, c), dtype=dy.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + 2 * oh : 2, kx : kx + 2 * ow : 2] += share
    return np.ascontiguousarray(dxp[:, pt : pt + in_h, pl : pl + in_w])


def bilinear_upsample(x, out_h, out_w):
    """Bilinear resize with half-pixel centers and edge clamping."""
    b, h, wd, c = x.shape
    ylo, yhi, fy = bilinear_coords(h, out_h)
    xlo, xhi, fx = bilinear_coords(wd, out_w)
    fy = fy.astype(x.dtype)[None, :, None, None]
    fx = fx.astype(x.dtype)[None, None, :, None]
    top = x[:, ylo][:, :, xlo] * (1 - fx) + x[:, ylo][:, :, xhi] * fx
    bot = x[:, yhi][:, :, xlo] * (1 - fx) + x[:, yhi][:, :, xhi] * fx
    return np.ascontiguousarray(top * (1 - fy) + bot * fy)


def attention_forward(q, k, v, rel_h, rel_w, h, w):
    """Scaled-dot attention core: content logits, optional per-axis relative
    logits broadcast in, softmax over keys, value aggregation.

    q, k are (B, N, HW, dk), v is (B, N, HW, dv); rel_h (B, N, H, W, H') and
    rel_w (B, N, H, W, W') may both be None. Returns (out, attn); one
    (B, N, HW, HW) buffer is allocated and reused through the softmax.
    """
    b, n, hw, _ = q.shape
    logits = q @ np.swapaxes(k, -1, -2)
    if rel_h is not None:
        l6 = logits.reshape(b, n, h, w, h, w)
        l6 += rel_h[:, :, :, :, :, None]
        l6 += rel_w[:, :, :, :, None, :]
    np.subtract(logits, logits.max(axis=-1, keepdims=True), out=logits)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    attn = logits
    return attn @ v, attn


def attention_backward(g, attn, q, k, v, relative, h, w):
    """Gradients of attention_forward w.r.t. q, k, v and, in relative mode,
    the two per-axis logit tensors."""
    b, n, hw, _ = q.shape
    dv = np.swapaxes(attn, -1, -2) @ g
    dattn = g @ np.swapaxes(v, -1, -2)
    dot = np.einsum("...k,...k->...", dattn, attn)[..., None]
    np.subtract(dattn, dot, out=dattn)
    np.multiply(dattn, attn, out=dattn)
    dlogits = dattn
    dq = dlogits @ k
    dk = np.swapaxes(dlogits, -1, -2) @ q
    if relative:
        d6 = dlogits.reshape(b, n, h, w, h, w)
        return dq, dk, dv, d6.sum(axis=5), d6.sum(axis=4)
    return dq, dk, dv, None, None


def bilinear_upsample_grad(dy, in_h, in_w):
    """Gradient of bilinear_upsample: scatter each output's 4 blend weights."""
    b, oh, ow, c = dy.shape
    ylo, yhi, fy = bilinear_coords(in_h, oh)
    xlo, xhi, fx = bilinear_coords(in_w, ow)
    fy = fy.astype(dy.dtype)
    fx = fx.astype(dy.dtype)
    dx = np.zeros((b, in_h, in_w, c), dtype=dy.dtype)
    wy = np.stack([1 - fy, fy])  # (2, OH)
    wx = np.stack([1 - fx, fx])  # (2, OW)
    ys = np.stack([ylo, yhi])
    xs = np.stack([xlo, xhi])
    for iy in range(2):
        for ix in range(2):
            contrib = dy * (wy[iy][None, :, None, None] * wx[ix][None, None, :, None])
            np.add.at(dx, (slice(None), ys[iy][:, None], xs[ix][None, :]), contrib)
    return dx
