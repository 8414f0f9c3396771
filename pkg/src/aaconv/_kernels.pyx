# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled spatial and attention kernels.

Signature-compatible with the numpy fallback in _kernels_py; backend.py picks
whichever imports. Loops are fused row-locally so the big (HW, HW) attention
buffers are touched a minimal number of times; all accumulation orders are
fixed, so results are deterministic run to run.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange

from ._padding import bilinear_coords, same_pad

ctypedef fused real:
    float
    double


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv2d(real[:, :, :, ::1] x, real[:, :, :, ::1] w, int stride,
                  int pt, int pl, real[:, :, :, ::1] out):
    cdef Py_ssize_t b_n = x.shape[0], h = x.shape[1], wd = x.shape[2], ci = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], co = w.shape[3]
    cdef Py_ssize_t oh = out.shape[1], ow = out.shape[2]
    cdef Py_ssize_t b, oy, ox, ky, kx, c, o, iy, ix
    cdef real xv
    for b in prange(b_n, nogil=True, schedule="static"):
        for oy in range(oh):
            for ox in range(ow):
                for ky in range(k):
                    iy = oy * stride - pt + ky
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(k):
                        ix = ox * stride - pl + kx
                        if ix < 0 or ix >= wd:
                            continue
                        for c in range(ci):
                            xv = x[b, iy, ix, c]
                            for o in range(co):
                                out[b, oy, ox, o] += xv * w[ky, kx, c, o]


def conv2d_same(x, w, stride):
    b, h, wd, _ = x.shape
    k = w.shape[0]
    oh, pt, _ = same_pad(h, k, stride)
    ow, pl, _ = same_pad(wd, k, stride)
    out = np.zeros((b, oh, ow, w.shape[3]), dtype=x.dtype)
    _conv2d(x, w, stride, pt, pl, out)
    return out


def _conv2d_grad_x(real[:, :, :, ::1] dy, real[:, :, :, ::1] w, int stride,
                         int pt, int pl, real[:, :, :, ::1] dx):
    cdef Py_ssize_t b_n = dy.shape[0], oh = dy.shape[1], ow = dy.shape[2], co = dy.shape[3]
    cdef Py_ssize_t k = w.shape[0], ci = w.shape[2]
    cdef Py_ssize_t h = dx.shape[1], wd = dx.shape[2]
    cdef Py_ssize_t b, oy, ox, ky, kx, c, o, iy, ix
    cdef real acc
    for b in prange(b_n, nogil=True, schedule="static"):
        for oy in range(oh):
            for ox in range(ow):
                for ky in range(k):
                    iy = oy * stride - pt + ky
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(k):
                        ix = ox * stride - pl + kx
                        if ix < 0 or ix >= wd:
                            continue
                        for c in range(ci):
                            acc = 0
                            for o in range(co):
                                acc += dy[b, oy, ox, o] * w[ky, kx, c, o]
                            dx[b, iy, ix, c] += acc


def conv2d_same_grad_x(dy, w, stride, in_h, in_w):
    _, pt, _ = same_pad(in_h, w.shape[0], stride)
    _, pl, _ = same_pad(in_w, w.shape[0], stride)
    dx = np.zeros((dy.shape[0], in_h, in_w, w.shape[2]), dtype=dy.dtype)
    _conv2d_grad_x(dy, w, stride, pt, pl, dx)
    return dx


def _conv2d_grad_w(real[:, :, :, ::1] dy, real[:, :, :, ::1] x, int stride,
                         int pt, int pl, real[:, :, :, ::1] dw):
    cdef Py_ssize_t b_n = dy.shape[0], oh = dy.shape[1], ow = dy.shape[2], co = dy.shape[3]
    cdef Py_ssize_t k = dw.shape[0], ci = dw.shape[2]
    cdef Py_ssize_t h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t b, oy, ox, ky, kx, c, o, iy, ix, kk
    cdef real xv
    # each (ky, kx) owns a disjoint slice of dw, so the kernel positions
    # parallelize without races
    for kk in prange(k * k, nogil=True, schedule="static"):
        ky = kk // k
        kx = kk - ky * k
        for b in range(b_n):
            for oy in range(oh):
                iy = oy * stride - pt + ky
                if iy < 0 or iy >= h:
                    continue
                for ox in range(ow):
                    ix = ox * stride - pl + kx
                    if ix < 0 or ix >= wd:
                        continue
                    for c in range(ci):
                        xv = x[b, iy, ix, c]
                        for o in range(co):
                            dw[ky, kx, c, o] += xv * dy[b, oy, ox, o]


def conv2d_same_grad_w(dy, x, stride, k):
    _, pt, _ = same_pad(x.shape[1], k, stride)
    _, pl, _ = same_pad(x.shape[2], k, stride)
    dw = np.zeros((k, k, x.shape[3], dy.shape[3]), dtype=dy.dtype)
    _conv2d_grad_w(dy, x, stride, pt, pl, dw)
    return dw


# ---------------------------------------------------------------------------
# pooling and bilinear resampling
# ---------------------------------------------------------------------------

def _avg_pool(real[:, :, :, ::1] x, int pt, int pl, real[:, :, :, ::1] out):
    cdef Py_ssize_t b_n = x.shape[0], h = x.shape[1], wd = x.shape[2], ch = x.shape[3]
    cdef Py_ssize_t oh = out.shape[1], ow = out.shape[2]
    cdef Py_ssize_t b, oy, ox, ky, kx, c, iy, ix, count
    for b in range(b_n):
        for oy in range(oh):
            for ox in range(ow):
                count = 0
                for ky in range(3):
                    iy = oy * 2 - pt + ky
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(3):
                        ix = ox * 2 - pl + kx
                        if ix < 0 or ix >= wd:
                            continue
                        count += 1
                        for c in range(ch):
                            out[b, oy, ox, c] += x[b, iy, ix, c]
                for c in range(ch):
                    out[b, oy, ox, c] /= count


def avg_pool_3x3_s2(x):
    b, h, wd, c = x.shape
    oh, pt, _ = same_pad(h, 3, 2)
    ow, pl, _ = same_pad(wd, 3, 2)
    out = np.zeros((b, oh, ow, c), dtype=x.dtype)
    _avg_pool(x, pt, pl, out)
    return out


def _avg_pool_grad(real[:, :, :, ::1] dy, int pt, int pl, real[:, :, :, ::1] dx):
    cdef Py_ssize_t b_n = dy.shape[0], oh = dy.shape[1], ow = dy.shape[2], ch = dy.shape[3]
    cdef Py_ssize_t h = dx.shape[1], wd = dx.shape[2]
    cdef Py_ssize_t b, oy, ox, ky, kx, c, iy, ix, count
    for b in range(b_n):
        for oy in range(oh):
            for ox in range(ow):
                count = 0
                for ky in range(3):
                    iy = oy * 2 - pt + ky
                    if 0 <= iy < h:
                        for kx in range(3):
                            ix = ox * 2 - pl + kx
                            if 0 <= ix < wd:
                                count += 1
                for ky in range(3):
                    iy = oy * 2 - pt + ky
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(3):
                        ix = ox * 2 - pl + kx
                        if ix < 0 or ix >= wd:
                            continue
                        for c in range(ch):
                            dx[b, iy, ix, c] += dy[b, oy, ox, c] / count


def avg_pool_3x3_s2_grad(dy, in_h, in_w):
    _, pt, _ = same_pad(in_h, 3, 2)
    _, pl, _ = same_pad(in_w, 3, 2)
    dx = np.zeros((dy.shape[0], in_h, in_w, dy.shape[3]), dtype=dy.dtype)
    _avg_pool_grad(dy, pt, pl, dx)
    return dx


def _bilinear(real[:, :, :, ::1] x, Py_ssize_t[::1] ylo, Py_ssize_t[::1] yhi,
                    double[::1] fy, Py_ssize_t[::1] xlo, Py_ssize_t[::1] xhi,
                    double[::1] fx, real[:, :, :, ::1] out):
    cdef Py_ssize_t b_n = x.shape[0], ch = x.shape[3]
    cdef Py_ssize_t oh = out.shape[1], ow = out.shape[2]
    cdef Py_ssize_t b, oy, ox, c
    cdef real wy, wx, top, bot
    for b in range(b_n):
        for oy in range(oh):
            wy = <real> fy[oy]
            for ox in range(ow):
                wx = <real> fx[ox]
                for c in range(ch):
                    top = x[b, ylo[oy], xlo[ox], c] * (1 - wx) + x[b, ylo[oy], xhi[ox], c] * wx
                    bot = x[b, yhi[oy], xlo[ox], c] * (1 - wx) + x[b, yhi[oy], xhi[ox], c] * wx
                    out[b, oy, ox, c] = top * (1 - wy) + bot * wy


def bilinear_upsample(x, out_h, out_w):
    ylo, yhi, fy = bilinear_coords(x.shape[1], out_h)
    xlo, xhi, fx = bilinear_coords(x.shape[2], out_w)
    out = np.zeros((x.shape[0], out_h, out_w, x.shape[3]), dtype=x.dtype)
    _bilinear(x, ylo, yhi, fy, xlo, xhi, fx, out)
    return out


def _bilinear_grad(real[:, :, :, ::1] dy, Py_ssize_t[::1] ylo, Py_ssize_t[::1] yhi,
                         double[::1] fy, Py_ssize_t[::1] xlo, Py_ssize_t[::1] xhi,
                         double[::1] fx, real[:, :, :, ::1] dx):
    cdef Py_ssize_t b_n = dy.shape[0], ch = dy.shape[3]
    cdef Py_ssize_t oh = dy.shape[1], ow = dy.shape[2]
    cdef Py_ssize_t b, oy, ox, c
    cdef real wy, wx, g
    for b in range(b_n):
        for oy in range(oh):
            wy = <real> fy[oy]
            for ox in range(ow):
                wx = <real> fx[ox]
                for c in range(ch):
                    g = dy[b, oy, ox, c]
                    dx[b, ylo[oy], xlo[ox], c] += g * (1 - wy) * (1 - wx)
                    dx[b, ylo[oy], xhi[ox], c] += g * (1 - wy) * wx
                    dx[b, yhi[oy], xlo[ox], c] += g * wy * (1 - wx)
                    dx[b, yhi[oy], xhi[ox], c] += g * wy * wx


def bilinear_upsample_grad(dy, in_h, in_w):
    ylo, yhi, fy = bilinear_coords(in_h, dy.shape[1])
    xlo, xhi, fx = bilinear_coords(in_w, dy.shape[2])
    dx = np.zeros((dy.shape[0], in_h, in_w, dy.shape[3]), dtype=dy.dtype)
    _bilinear_grad(dy, ylo, yhi, fy, xlo, xhi, fx, dx)
    return dx


# ---------------------------------------------------------------------------
# attention core
# ---------------------------------------------------------------------------
#
# The (batch, head) units are independent, so they are processed in parallel;
# every output element is written by exactly one unit in a fixed order, which
# keeps results bit-identical to the serial schedule. Per-unit scratch holds
# the keys/values transposed to (depth, HW) so the j loops are unit-stride.

def _attn_logits(real[:, :, :, ::1] q, real[:, :, :, ::1] k,
                 real[:, :, :, :, ::1] rel_h, real[:, :, :, :, ::1] rel_w,
                 bint relative, Py_ssize_t h, Py_ssize_t w,
                 real[:, :, :, ::1] logits, real[:, :, ::1] kt):
    """Content (+ relative) logits with the row max already subtracted; each
    row is filled and adjusted while it is cache-resident."""
    cdef Py_ssize_t heads = q.shape[1], hw = q.shape[2], dk = q.shape[3]
    cdef Py_ssize_t units = q.shape[0] * heads
    cdef Py_ssize_t u, b, n, i, j, d, iy, ix, jy, jx
    cdef real qd, m, rh
    for u in prange(units, nogil=True, schedule="static"):
        b = u // heads
        n = u - b * heads
        for d in range(dk):
            for j in range(hw):
                kt[u, d, j] = k[b, n, j, d]
        for i in range(hw):
            if relative:
                iy = i // w
                ix = i - iy * w
                for jy in range(h):
                    rh = rel_h[b, n, iy, ix, jy]
                    for jx in range(w):
                        logits[b, n, i, jy * w + jx] = rh + rel_w[b, n, iy, ix, jx]
            else:
                for j in range(hw):
                    logits[b, n, i, j] = 0
            for d in range(dk):
                qd = q[b, n, i, d]
                for j in range(hw):
                    logits[b, n, i, j] += qd * kt[u, d, j]
            m = logits[b, n, i, 0]
            for j in range(1, hw):
                if logits[b, n, i, j] > m:
                    m = logits[b, n, i, j]
            for j in range(hw):
                logits[b, n, i, j] -= m


def _attn_norm_and_value(real[:, :, :, ::1] attn, real[:, :, :, ::1] v,
                         real[:, :, :, ::1] out, real[:, :, ::1] vt):
    """Normalize exp'd rows in place and aggregate values in the same sweep."""
    cdef Py_ssize_t heads = attn.shape[1], hw = attn.shape[2], dv = v.shape[3]
    cdef Py_ssize_t units = attn.shape[0] * heads
    cdef Py_ssize_t u, b, n, i, j, d
    cdef real s, inv, acc
    for u in prange(units, nogil=True, schedule="static"):
        b = u // heads
        n = u - b * heads
        for d in range(dv):
            for j in range(hw):
                vt[u, d, j] = v[b, n, j, d]
        for i in range(hw):
            s = 0
            for j in range(hw):
                s = s + attn[b, n, i, j]
            inv = 1 / s
            for d in range(dv):
                acc = 0
                for j in range(hw):
                    acc = acc + attn[b, n, i, j] * vt[u, d, j]
                out[b, n, i, d] = acc * inv
            for j in range(hw):
                attn[b, n, i, j] *= inv


def attention_forward(q, k, v, rel_h, rel_w, h, w):
    b, n, hw, dk = q.shape
    attn = np.empty((b, n, hw, hw), dtype=q.dtype)
    relative = rel_h is not None
    if not relative:
        rel_h = rel_w = np.zeros((1, 1, 1, 1, 1), dtype=q.dtype)
        h, w = 1, hw
    kt = np.empty((b * n, dk, hw), dtype=q.dtype)
    _attn_logits(q, k, rel_h, rel_w, relative, h, w, attn, kt)
    np.exp(attn, out=attn)  # vectorized exp beats a scalar loop
    out = np.empty((b, n, hw, v.shape[3]), dtype=q.dtype)
    vt = np.empty((b * n, v.shape[3], hw), dtype=q.dtype)
    _attn_norm_and_value(attn, v, out, vt)
    return out, attn


def _attn_backward(real[:, :, :, ::1] g, real[:, :, :, ::1] attn,
                   real[:, :, :, ::1] q, real[:, :, :, ::1] k,
                   real[:, :, :, ::1] v, bint relative,
                   Py_ssize_t h, Py_ssize_t w,
                   real[:, :, :, ::1] dq, real[:, :, :, ::1] dk,
                   real[:, :, :, ::1] dv,
                   real[:, :, :, :, ::1] drel_h,
                   real[:, :, :, :, ::1] drel_w,
                   real[:, :, ::1] kt, real[:, :, ::1] vt,
                   real[:, :, ::1] dkt, real[:, :, ::1] dvt,
                   real[:, ::1] row, real[:, ::1] colsum):
    cdef Py_ssize_t heads = q.shape[1], hw = q.shape[2]
    cdef Py_ssize_t dkd = q.shape[3], dvd = v.shape[3]
    cdef Py_ssize_t units = q.shape[0] * heads
    cdef Py_ssize_t u, b, n, i, j, d, iy, ix, jy, jx
    cdef real a, gd, qd, dot, acc
    for u in prange(units, nogil=True, schedule="static"):
        b = u // heads
        n = u - b * heads
        for d in range(dkd):
            for j in range(hw):
                kt[u, d, j] = k[b, n, j, d]
                dkt[u, d, j] = 0
        for d in range(dvd):
            for j in range(hw):
                vt[u, d, j] = v[b, n, j, d]
                dvt[u, d, j] = 0
        for i in range(hw):
            # d(attn) row, then in place the logit gradient
            for j in range(hw):
                row[u, j] = 0
            for d in range(dvd):
                gd = g[b, n, i, d]
                for j in range(hw):
                    row[u, j] += gd * vt[u, d, j]
                for j in range(hw):
                    dvt[u, d, j] += attn[b, n, i, j] * gd
            dot = 0
            for j in range(hw):
                dot = dot + row[u, j] * attn[b, n, i, j]
            for j in range(hw):
                row[u, j] = (row[u, j] - dot) * attn[b, n, i, j]
            for d in range(dkd):
                acc = 0
                for j in range(hw):
                    acc = acc + row[u, j] * kt[u, d, j]
                dq[b, n, i, d] = acc
                qd = q[b, n, i, d]
                for j in range(hw):
                    dkt[u, d, j] += qd * row[u, j]
            if relative:
                iy = i // w
                ix = i - iy * w
                for jx in range(w):
                    colsum[u, jx] = 0
                for jy in range(h):
                    acc = 0
                    for jx in range(w):
                        acc = acc + row[u, jy * w + jx]
                        colsum[u, jx] += row[u, jy * w + jx]
                    drel_h[b, n, iy, ix, jy] = acc
                for jx in range(w):
                    drel_w[b, n, iy, ix, jx] = colsum[u, jx]
        for d in range(dkd):
            for j in range(hw):
                dk[b, n, j, d] = dkt[u, d, j]
        for d in range(dvd):
            for j in range(hw):
                dv[b, n, j, d] = dvt[u, d, j]


def attention_backward(g, attn, q, k, v, relative, h, w):
    b, n, hw, dkd = q.shape
    dvd = v.shape[3]
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    if relative:
        drel_h = np.empty((b, n, h, w, h), dtype=q.dtype)
        drel_w = np.empty((b, n, h, w, w), dtype=q.dtype)
    else:
        drel_h = drel_w = np.zeros((1, 1, 1, 1, 1), dtype=q.dtype)
        h, w = 1, hw
    units = b * n
    kt = np.empty((units, dkd, hw), dtype=q.dtype)
    vt = np.empty((units, dvd, hw), dtype=q.dtype)
    dkt = np.empty((units, dkd, hw), dtype=q.dtype)
    dvt = np.empty((units, dvd, hw), dtype=q.dtype)
    row = np.empty((units, hw), dtype=q.dtype)
    colsum = np.empty((units, w), dtype=q.dtype)
    _attn_backward(g, attn, q, k, v, relative, h, w, dq, dk, dv,
                   drel_h, drel_w, kt, vt, dkt, dvt, row, colsum)
    if relative:
        return dq, dk, dv, drel_h, drel_w
    return dq, dk, dv, None, None
