"""Multi-head self-attention over images with 2D relative position logits.

Relative logits are produced without ever materializing the per-pair
embedding table: one contraction of the queries against each 1-D embedding
table, a pad/reshape pass that converts relative to absolute indexing, and a
tile across the orthogonal axis. Peak extra memory is O(H*W*d) per head-batch
instead of O((H*W)^2 * d). A direct per-pair gather implementation is kept
alongside as the small-size oracle.

Position handling is selectable: none, a fixed 2-D sinusoid added to the
input, coordinate channels concatenated to the input, or the learned
relative embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var
from .errors import ContractError, ShapeError

ENCODINGS = ("none", "sine2d", "coord", "relative")


@dataclass(frozen=True)
class AttentionSpec:
    """Hyperparameters of one attention layer.

    heads must divide d_k and d_v evenly; min_head_depth optionally enforces
    a lower bound on the per-head key depth.
    """

    heads: int
    d_k: int
    d_v: int
    encoding: str = "relative"
    min_head_depth: int = 1

    def __post_init__(self):
        if self.encoding not in ENCODINGS:
            raise ContractError(f"unknown encoding {self.encoding!r}; one of {ENCODINGS}")
        if self.d_k % self.heads or self.d_v % self.heads:
            raise ContractError(
                f"heads={self.heads} must divide d_k={self.d_k} and d_v={self.d_v}"
            )
        if self.d_k // self.heads < self.min_head_depth:
            raise ContractError(
                f"per-head key depth {self.d_k // self.heads} below minimum "
                f"{self.min_head_depth}"
            )

    @property
    def d_k_head(self) -> int:
        return self.d_k // self.heads

    @property
    def d_v_head(self) -> int:
        return self.d_v // self.heads


@dataclass
class AttentionWeights:
    """Weights of one attention layer.

    w_qkv is the fused pointwise projection producing [keys | queries |
    values] channel blocks in that order; w_out mixes the concatenated head
    outputs; rel_h/rel_w are the learned relative embeddings (2H-1 and 2W-1
    rows of per-head key depth), present only in relative mode and shared
    across heads.
    """

    w_qkv: np.ndarray  # (1, 1, F_in(+3 for coord), 2*d_k + d_v)
    w_out: np.ndarray  # (1, 1, d_v, d_v)
    rel_h: Optional[np.ndarray] = None  # (2H-1, d_k_head)
    rel_w: Optional[np.ndarray] = None  # (2W-1, d_k_head)


def init_attention_weights(
    spec: AttentionSpec, f_in: int, h: int, w: int, rng, dtype=np.float32
) -> AttentionWeights:
    """Fan-in-scaled uniform projections; normal relative embeddings with
    standard deviation matched to the head depth's logit scale."""
    qkv_in = f_in + (3 if spec.encoding == "coord" else 0)
    lim = np.sqrt(6.0 / qkv_in)
    w_qkv = rng.uniform(-lim, lim, size=(1, 1, qkv_in, 2 * spec.d_k + spec.d_v))
    lim_o = np.sqrt(6.0 / spec.d_v)
    w_out = rng.uniform(-lim_o, lim_o, size=(1, 1, spec.d_v, spec.d_v))
    weights = AttentionWeights(w_qkv.astype(dtype), w_out.astype(dtype))
    if spec.encoding == "relative":
        std = spec.d_k_head ** -0.5
        weights.rel_h = (std * rng.standard_normal((2 * h - 1, spec.d_k_head))).astype(dtype)
        weights.rel_w = (std * rng.standard_normal((2 * w - 1, spec.d_k_head))).astype(dtype)
    return weights


# ---------------------------------------------------------------------------
# head bookkeeping
# ---------------------------------------------------------------------------


def split_heads_2d(x: np.ndarray, heads: int) -> np.ndarray:
    """(B, H, W, d) -> (B, heads, H, W, d/heads); channel block h becomes head h."""
    b, h, w, d = x.shape
    if d % heads:
        raise ShapeError(f"{d} channels not divisible into {heads} heads")
    return np.ascontiguousarray(
        x.reshape(b, h, w, heads, d // heads).transpose(0, 3, 1, 2, 4)
    )


def combine_heads_2d(x: np.ndarray) -> np.ndarray:
    """Exact inverse of split_heads_2d."""
    b, heads, h, w, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1, 4).reshape(b, h, w, heads * dh))


def _split_heads_v(x: Var, heads: int) -> Var:
    b, h, w, d = x.value.shape
    if d % heads:
        raise ShapeError(f"{d} channels not divisible into {heads} heads")
    return ad.transpose(ad.reshape(x, (b, h, w, heads, d // heads)), (0, 3, 1, 2, 4))


def _combine_heads_v(x: Var) -> Var:
    b, heads, h, w, dh = x.value.shape
    return ad.reshape(ad.transpose(x, (0, 2, 3, 1, 4)), (b, h, w, heads * dh))


# ---------------------------------------------------------------------------
# relative logits, memory-efficient path
# ---------------------------------------------------------------------------


def _rel_to_abs_v(x: Var) -> Var:
    """(B, N, L, 2L-1) relative-offset columns -> (B, N, L, L) absolute.

    Pure reindexing: pad one zero column, flatten the last two axes, pad
    L-1 zeros, reshape to (L+1, 2L-1) rows, keep the first L rows and last
    L columns. out[:, :, i, j] = in[:, :, i, j - i + L - 1].
    """
    b, n, l, m = x.value.shape
    if m != 2 * l - 1:
        raise ShapeError(f"last dim must be 2L-1 = {2 * l - 1}, got {m}")
    x = ad.pad_last(x, 1)  # (B, N, L, 2L)
    x = ad.reshape(x, (b, n, l * 2 * l))
    x = ad.pad_last(x, l - 1)
    x = ad.reshape(x, (b, n, l + 1, 2 * l - 1))
    return ad.index(x, (slice(None), slice(None), slice(0, l), slice(l - 1, None)))


def rel_to_abs(x: np.ndarray) -> np.ndarray:
    tape = Tape()
    return _rel_to_abs_v(tape.const(np.asarray(x))).value


def _rel_logits_axis_v(q: Var, rel: Var) -> Var:
    """Per-axis relative logits before any tiling: for q (B, heads, H, W, d)
    and a (2W-1, d) table, returns (B, heads, H, W, W') where entry
    [.., y, x, x'] is q[.., y, x] dotted with the embedding for offset
    x' - x."""
    b, heads, h, w, d = q.value.shape
    if rel.value.shape != (2 * w - 1, d):
        raise ShapeError(
            f"embedding table {rel.value.shape} does not match width {w}, depth {d}"
        )
    flat_q = ad.reshape(q, (b * heads * h * w, d))
    logits = ad.matmul(flat_q, rel, transpose_b=True)  # (BNhHW, 2W-1)
    logits = ad.reshape(logits, (b, heads * h, w, 2 * w - 1))
    logits = _rel_to_abs_v(logits)  # (B, heads*H, W, W)
    return ad.reshape(logits, (b, heads, h, w, w))


def _relative_logits_1d_v(q: Var, rel: Var, transpose_mask) -> Var:
    """Width-axis relative logits for q (B, heads, H, W, d), tiled across
    the H query/key-row pairs; transpose_mask places the axes as
    (B, heads, H, W, H', W') before flattening to (B, heads, HW, HW)."""
    b, heads, h, w, _ = q.value.shape
    logits = _rel_logits_axis_v(q, rel)
    logits = ad.tile_new_axis(logits, 3, h)  # (B, heads, H, H', W, W')
    logits = ad.transpose(logits, transpose_mask)
    return ad.reshape(logits, (b, heads, h * w, h * w))


def _relative_logits_2d_v(q: Var, rel_h: Var, rel_w: Var) -> tuple[Var, Var]:
    """Height and width relative logits, each (B, heads, HW, HW) in
    row-major (y, x) pixel order; q must already carry the key-depth scale."""
    logits_w = _relative_logits_1d_v(q, rel_w, (0, 1, 2, 4, 3, 5))
    q_t = ad.transpose(q, (0, 1, 3, 2, 4))  # swap H and W
    logits_h = _relative_logits_1d_v(q_t, rel_h, (0, 1, 4, 2, 5, 3))
    return logits_h, logits_w


def relative_logits_1d(q: np.ndarray, rel: np.ndarray) -> np.ndarray:
    """Width-axis logits for plain arrays; see _relative_logits_1d_v."""
    tape = Tape()
    return _relative_logits_1d_v(
        tape.const(np.asarray(q)), tape.const(np.asarray(rel)), (0, 1, 2, 4, 3, 5)
    ).value


def relative_logits_2d(q: np.ndarray, rel_h: np.ndarray, rel_w: np.ndarray):
    """(S_h, S_w) relative logits for a raw query block (B, heads, H, W, d)."""
    tape = Tape()
    s_h, s_w = _relative_logits_2d_v(
        tape.const(np.asarray(q)), tape.const(np.asarray(rel_h)), tape.const(np.asarray(rel_w))
    )
    return s_h.value, s_w.value


def naive_relative_logits(q: np.ndarray, rel_h: np.ndarray, rel_w: np.ndarray):
    """Per-pair gather reference: explicit loop over all pixel pairs.

    Materializes nothing clever and is capped to H, W <= 8; the efficient
    path must agree with this entrywise.
    """
    q = np.asarray(q)
    b, heads, h, w, d = q.shape
    if h > 8 or w > 8:
        raise ContractError(f"naive path capped at 8x8, got {h}x{w}")
    hw = h * w
    s_h = np.zeros((b, heads, hw, hw), dtype=q.dtype)
    s_w = np.zeros((b, heads, hw, hw), dtype=q.dtype)
    for iy in range(h):
        for ix in range(w):
            i = iy * w + ix
            for jy in range(h):
                for jx in range(w):
                    j = jy * w + jx
                    s_h[:, :, i, j] = q[:, :, iy, ix, :] @ rel_h[jy - iy + h - 1]
                    s_w[:, :, i, j] = q[:, :, iy, ix, :] @ rel_w[jx - ix + w - 1]
    return s_h, s_w


# ---------------------------------------------------------------------------
# position encodings
# ---------------------------------------------------------------------------


def sine_encoding_2d(h: int, w: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sinusoid (H, W, d): the first d/2 channels encode x with
    interleaved sin/cos over geometrically spaced wavelengths up to 1e4,
    the last d/2 encode y the same way."""
    if d % 4:
        raise ContractError(f"sine encoding needs depth divisible by 4, got {d}")
    pairs = d // 4
    div = 10000.0 ** (np.arange(pairs) / pairs)  # (pairs,)
    enc = np.zeros((h, w, d), dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    x_angle = xs[:, None] / div  # (W, pairs)
    y_angle = ys[:, None] / div
    enc[:, :, 0 : d // 2 : 2] = np.sin(x_angle)[None, :, :]
    enc[:, :, 1 : d // 2 : 2] = np.cos(x_angle)[None, :, :]
    enc[:, :, d // 2 :: 2] = np.sin(y_angle)[:, None, :]
    enc[:, :, d // 2 + 1 :: 2] = np.cos(y_angle)[:, None, :]
    return enc.astype(dtype)


def coord_channels(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) of (x, y, r): positions scaled to [-1, 1] per axis (a
    single row or column maps to 0), r the radial distance."""
    xs = np.zeros(w) if w == 1 else 2 * np.arange(w) / (w - 1) - 1
    ys = np.zeros(h) if h == 1 else 2 * np.arange(h) / (h - 1) - 1
    grid_x = np.broadcast_to(xs[None, :], (h, w))
    grid_y = np.broadcast_to(ys[:, None], (h, w))
    r = np.sqrt(grid_x**2 + grid_y**2)
    return np.stack([grid_x, grid_y, r], axis=-1).astype(dtype)


# ---------------------------------------------------------------------------
# full attention layer
# ---------------------------------------------------------------------------


@dataclass
class AttentionVars:
    w_qkv: Var
    w_out: Var
    rel_h: Optional[Var] = None
    rel_w: Optional[Var] = None


def wrap_weights(tape: Tape, weights: AttentionWeights) -> AttentionVars:
    def lift(arr):
        if arr is None:
            return None
        if isinstance(arr, Parameter):
            return tape.param(arr)
        return tape.const(arr)

    return AttentionVars(
        lift(weights.w_qkv), lift(weights.w_out), lift(weights.rel_h), lift(weights.rel_w)
    )


def multi_head_attention_v(x: Var, spec: AttentionSpec, wv: AttentionVars) -> tuple[Var, Var]:
    """Differentiable attention layer; returns (output, attention weights).

    Pipeline: optional position treatment of the input, fused pointwise
    projection split into [keys | queries | values], queries scaled by the
    inverse square root of per-head key depth (before both the content and
    the relative logits), per-head dot-product logits plus relative logits
    in relative mode, softmax over keys, value aggregation, head merge, and
    the output projection.
    """
    b, h, w, c = x.value.shape
    tape = x.tape
    if spec.encoding == "sine2d":
        x = ad.add(x, tape.const(sine_encoding_2d(h, w, c, dtype=x.value.dtype)))
    elif spec.encoding == "coord":
        coords = np.broadcast_to(
            coord_channels(h, w, dtype=x.value.dtype), (b, h, w, 3)
        ).copy()
        x = ad.concat([x, tape.const(coords)], axis=3)
    if x.value.shape[3] != wv.w_qkv.value.shape[2]:
        raise ShapeError(
            f"attention projection expects {wv.w_qkv.value.shape[2]} channels, "
            f"input has {x.value.shape[3]}"
        )

    kqv = ad.conv2d(x, wv.w_qkv)
    d_k, d_v, heads = spec.d_k, spec.d_v, spec.heads
    k = ad.index(kqv, (slice(None),) * 3 + (slice(0, d_k),))
    q = ad.index(kqv, (slice(None),) * 3 + (slice(d_k, 2 * d_k),))
    v = ad.index(kqv, (slice(None),) * 3 + (slice(2 * d_k, 2 * d_k + d_v),))
    q = ad.scale(q, spec.d_k_head ** -0.5)

    q = _split_heads_v(q, heads)
    k = _split_heads_v(k, heads)
    v = _split_heads_v(v, heads)
    hw = h * w
    q_flat = ad.reshape(q, (b, heads, hw, spec.d_k_head))
    k_flat = ad.reshape(k, (b, heads, hw, spec.d_k_head))
    v_flat = ad.reshape(v, (b, heads, hw, spec.d_v_head))

    rel_h_axis = rel_w_axis = None
    if spec.encoding == "relative":
        if wv.rel_h is None or wv.rel_w is None:
            raise ContractError("relative mode requires rel_h/rel_w embeddings")
        if wv.rel_h.value.shape[0] != 2 * h - 1 or wv.rel_w.value.shape[0] != 2 * w - 1:
            raise ShapeError(
                f"embedding rows {wv.rel_h.value.shape[0]}/{wv.rel_w.value.shape[0]} "
                f"do not match spatial dims {h}x{w}"
            )
        # per-axis logits stay at O(HW * max(H, W)) size; they broadcast
        # into the content logits inside the fused attention core
        rel_w_axis = _rel_logits_axis_v(q, wv.rel_w)  # (B, heads, H, W, W')
        q_t = ad.transpose(q, (0, 1, 3, 2, 4))
        rel_h_axis = ad.transpose(
            _rel_logits_axis_v(q_t, wv.rel_h), (0, 1, 3, 2, 4)
        )  # (B, heads, H, W, H')

    out, attn_probs = ad.attention_core(
        q_flat, k_flat, v_flat, rel_h_axis, rel_w_axis, h, w
    )
    attn = tape.const(attn_probs)
    out = ad.reshape(out, (b, heads, h, w, spec.d_v_head))
    out = _combine_heads_v(out)
    out = ad.conv2d(out, wv.w_out)
    return out, attn


def self_attention_2d(
    x: np.ndarray, spec: AttentionSpec, weights: AttentionWeights
) -> np.ndarray:
    """Forward-only attention layer on a plain (B, H, W, C) array."""
    out, _ = attention_with_weights(x, spec, weights)
    return out


def attention_with_weights(x, spec: AttentionSpec, weights: AttentionWeights):
    """Like self_attention_2d but also returns the (B, heads, HW, HW)
    attention distribution."""
    tape = Tape()
    out, attn = multi_head_attention_v(tape.const(np.asarray(x)), spec, wrap_weights(tape, weights))
    return out.value, attn.value
