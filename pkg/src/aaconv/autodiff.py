"""Tape-based reverse-mode differentiation over the package's operation set.

A Tape is an append-only record of operations; parents of a node always
precede it, so the backward pass is a single reverse sweep that visits each
node exactly once. Values are plain numpy arrays; dtype (float32/float64)
flows through from the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend, ops
from .errors import ContractError, ShapeError


class Parameter:
    """A named, trainable array with room for its gradient."""

    def __init__(self, name: str, value: np.ndarray, decay: bool = True):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = None
        self.decay = decay  # whether weight decay applies

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class Node:
    vid: int
    op: str
    parents: tuple[int, ...]
    backward: callable  # grad_out -> tuple of per-parent grads (None to skip)


@dataclass
class Var:
    tape: "Tape"
    vid: int
    value: np.ndarray

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self._next = 0
        self._param_vars: dict[int, Var] = {}
        self._param_by_vid: dict[int, Parameter] = {}

    def _new_vid(self) -> int:
        self._next += 1
        return self._next

    def const(self, value) -> Var:
        return Var(self, self._new_vid(), np.asarray(value))

    def param(self, p: Parameter) -> Var:
        """Leaf variable for a Parameter, memoized so reuse shares one id."""
        v = self._param_vars.get(id(p))
        if v is None:
            v = Var(self, self._new_vid(), p.value)
            self._param_vars[id(p)] = v
            self._param_by_vid[v.vid] = p
        return v

    def record(self, op: str, parents: tuple[Var, ...], value: np.ndarray, bw) -> Var:
        for pv in parents:
            if pv.tape is not self:
                raise ContractError(f"operation {op} mixes variables from two tapes")
        out = Var(self, self._new_vid(), value)
        self.nodes.append(Node(out.vid, op, tuple(p.vid for p in parents), bw))
        return out


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(parameter) for every parameter seen by the tape.

    Gradients are also written onto each Parameter's .grad; parameters the
    loss does not reach get zeros.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.vid: np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.vid, None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out = {}
    for vid, p in tape._param_by_vid.items():
        g = grads.get(vid)
        if g is None:
            g = np.zeros_like(p.value)
        p.grad = g
        out[p.name] = g
    return out


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Var, b: Var) -> Var:
    val = a.value + b.value
    sa, sb = a.value.shape, b.value.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return a.tape.record("add", (a, b), val, bw)


def scale(a: Var, c: float) -> Var:
    def bw(g):
        return (g * c,)

    return a.tape.record("scale", (a,), a.value * a.value.dtype.type(c), bw)


def reshape(a: Var, shape) -> Var:
    old = a.value.shape

    def bw(g):
        return (np.ascontiguousarray(g).reshape(old),)

    return a.tape.record("reshape", (a,), np.ascontiguousarray(a.value).reshape(shape), bw)


def transpose(a: Var, perm) -> Var:
    inv = tuple(np.argsort(perm))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return a.tape.record("transpose", (a,), np.ascontiguousarray(a.value.transpose(perm)), bw)


def pad_last(a: Var, count: int) -> Var:
    """Append `count` zero columns along the last axis."""
    n = a.value.shape[-1]
    val = np.empty(a.value.shape[:-1] + (n + count,), dtype=a.value.dtype)
    val[..., :n] = a.value
    val[..., n:] = 0

    def bw(g):
        return (np.ascontiguousarray(g[..., :n]),)

    return a.tape.record("pad_last", (a,), val, bw)


def index(a: Var, slices: tuple) -> Var:
    """Basic slicing; gradient scatters back into a zero tensor."""
    shape = a.value.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[slices] = g
        return (full,)

    return a.tape.record("index", (a,), np.ascontiguousarray(a.value[slices]), bw)


def concat(parts: list[Var], axis: int) -> Var:
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    tape = parts[0].tape
    return tape.record("concat", tuple(parts), np.concatenate([p.value for p in parts], axis=axis), bw)


def tile_new_axis(a: Var, axis: int, reps: int) -> Var:
    """Insert a new axis at `axis` and repeat the tensor `reps` times there."""
    val = np.repeat(np.expand_dims(a.value, axis), reps, axis=axis)

    def bw(g):
        return (g.sum(axis=axis),)

    return a.tape.record("tile", (a,), val, bw)


def matmul(a: Var, b: Var, transpose_b: bool = False) -> Var:
    """2-D matrix product, optionally against b transposed."""
    bv = b.value.T if transpose_b else b.value
    if a.value.shape[1] != bv.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.value.shape} x {bv.shape}")
    val = a.value @ bv

    def bw(g):
        if transpose_b:
            return g @ b.value, g.T @ a.value
        return g @ b.value.T, a.value.T @ g

    return a.tape.record("matmul", (a, b), val, bw)


def bmm(a: Var, b: Var, transpose_b: bool = False) -> Var:
    """Batched matmul over matching leading dims (no broadcasting)."""
    if a.value.shape[:-2] != b.value.shape[:-2]:
        raise ShapeError(f"batch dims disagree: {a.value.shape} x {b.value.shape}")
    bv = np.swapaxes(b.value, -1, -2) if transpose_b else b.value
    val = a.value @ bv

    def bw(g):
        if transpose_b:
            return g @ b.value, np.swapaxes(g, -1, -2) @ a.value
        return g @ np.swapaxes(b.value, -1, -2), np.swapaxes(a.value, -1, -2) @ g

    return a.tape.record("bmm", (a, b), val, bw)


def add_relative_logits(logits: Var, rel_h: Var, rel_w: Var, h: int, w: int) -> Var:
    """Add per-axis relative logits into (B, heads, HW, HW) content logits.

    rel_h is (B, heads, H, W, H'): the height logit for query (y, x) and key
    row y', constant across key columns; rel_w is (B, heads, H, W, W'), the
    width logit constant across key rows. Broadcasting into the 6-axis view
    of the logits avoids materializing either tensor at (HW)^2 size.
    """
    b, heads, hw, _ = logits.value.shape
    l6 = logits.value.reshape(b, heads, h, w, h, w)
    val = l6 + rel_h.value[:, :, :, :, :, None]
    np.add(val, rel_w.value[:, :, :, :, None, :], out=val)

    def bw(g):
        g6 = g.reshape(b, heads, h, w, h, w)
        return g, g6.sum(axis=5), g6.sum(axis=4)

    return logits.tape.record(
        "add_rel_logits", (logits, rel_h, rel_w), val.reshape(b, heads, hw, hw), bw
    )


def attention_core(
    q: Var, k: Var, v: Var,
    rel_h: Var | None = None,
    rel_w: Var | None = None,
    h: int = 0,
    w: int = 0,
):
    """Fused scaled-dot attention: logits (+ relative logits), softmax over
    keys, and the value aggregation, as one node.

    q, k are (B, heads, HW, d_k_head), v is (B, heads, HW, d_v_head);
    rel_h/rel_w, when given, are the per-axis relative logits of
    add_relative_logits. One (B, heads, HW, HW) buffer is allocated and
    reused through the softmax, which is what makes the training loop
    affordable; returns (output Var, attention probabilities array).
    """
    relative = rel_h is not None
    out_val, attn = backend.attention_forward(
        q.value, k.value, v.value,
        rel_h.value if relative else None,
        rel_w.value if relative else None,
        h, w,
    )

    def bw(g):
        dq, dk, dv, drel_h, drel_w = backend.attention_backward(
            np.ascontiguousarray(g), attn, q.value, k.value, v.value, relative, h, w
        )
        if relative:
            return dq, dk, dv, drel_h, drel_w
        return dq, dk, dv

    parents = (q, k, v, rel_h, rel_w) if relative else (q, k, v)
    out = q.tape.record("attention_core", parents, out_val, bw)
    return out, attn


def relu(a: Var) -> Var:
    mask = a.value > 0

    def bw(g):
        return (g * mask,)

    return a.tape.record("relu", (a,), a.value * mask, bw)


def softmax_last(a: Var) -> Var:
    y = ops.softmax_rows(a.value)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return a.tape.record("softmax", (a,), y, bw)


def conv2d(x: Var, w: Var, stride: int = 1) -> Var:
    val = ops.conv2d(x.value, w.value, stride)
    k = w.value.shape[0]
    in_h, in_w = x.value.shape[1:3]

    def bw(g):
        g = np.ascontiguousarray(g)
        if k == 1 and stride == 1:
            b, h, wd, co = g.shape
            gm = g.reshape(-1, co)
            dx = (gm @ w.value[0, 0].T).reshape(x.value.shape)
            dw = (x.value.reshape(-1, x.value.shape[3]).T @ gm).reshape(w.value.shape)
            return dx, dw
        dx = backend.conv2d_same_grad_x(g, w.value, stride, in_h, in_w)
        dw = backend.conv2d_same_grad_w(g, x.value, stride, k)
        return dx, dw

    return x.tape.record("conv2d", (x, w), val, bw)


def avg_pool_3x3_s2(x: Var) -> Var:
    in_h, in_w = x.value.shape[1:3]

    def bw(g):
        return (backend.avg_pool_3x3_s2_grad(np.ascontiguousarray(g), in_h, in_w),)

    return x.tape.record("avg_pool", (x,), ops.avg_pool_3x3_s2(x.value), bw)


def bilinear_upsample(x: Var, out_h: int, out_w: int) -> Var:
    in_h, in_w = x.value.shape[1:3]
    if (out_h, out_w) == (in_h, in_w):
        return x

    def bw(g):
        return (backend.bilinear_upsample_grad(np.ascontiguousarray(g), in_h, in_w),)

    return x.tape.record("bilinear", (x,), ops.bilinear_upsample(x.value, out_h, out_w), bw)


def batchnorm_train(x: Var, gamma: Var, beta: Var, eps: float = 1e-5):
    """Batch-statistics normalization; returns (out, batch_mean, batch_var).

    The statistics are plain arrays (for running-average updates); the
    gradient differentiates through them.
    """
    xv = x.value
    m = xv.shape[0] * xv.shape[1] * xv.shape[2]
    mean = xv.mean(axis=(0, 1, 2))
    var = xv.var(axis=(0, 1, 2))
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xv.dtype))
    xhat = (xv - mean) * inv
    val = gamma.value * xhat + beta.value

    def bw(g):
        dbeta = g.sum(axis=(0, 1, 2))
        dgamma = (g * xhat).sum(axis=(0, 1, 2))
        dxhat = g * gamma.value
        # fused form of the chain through mean and variance
        dx = (inv / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 1, 2))
            - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
        )
        return dx, dgamma, dbeta

    out = x.tape.record("batchnorm", (x, gamma, beta), val, bw)
    return out, mean, var


def batchnorm_eval(x: Var, gamma: Var, beta: Var, mean, var, eps: float = 1e-5) -> Var:
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.value.dtype))
    xhat = (x.value - mean) * inv
    val = gamma.value * xhat + beta.value

    def bw(g):
        return g * gamma.value * inv, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

    return x.tape.record("batchnorm_eval", (x, gamma, beta), val, bw)


def global_avg_pool(x: Var) -> Var:
    b, h, w, c = x.value.shape

    def bw(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), (b, h, w, c)).astype(g.dtype).copy(),)

    return x.tape.record("gap", (x,), ops.global_avg_pool(x.value), bw)


def dense(x: Var, w: Var, b: Var) -> Var:
    val = ops.dense(x.value, w.value, b.value)

    def bw(g):
        return g @ w.value.T, x.value.T @ g, g.sum(axis=0)

    return x.tape.record("dense", (x, w, b), val, bw)


def cross_entropy_with_logits(logits: Var, labels: np.ndarray) -> Var:
    labels = np.asarray(labels)
    val = np.asarray(ops.cross_entropy_with_logits(logits.value, labels))
    probs = ops.softmax_rows(logits.value)
    n = logits.value.shape[0]

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return logits.tape.record("cross_entropy", (logits,), val, bw)


def sum_all(x: Var) -> Var:
    shape = x.value.shape

    def bw(g):
        return (np.broadcast_to(g, shape).astype(x.value.dtype).copy(),)

    return x.tape.record("sum", (x,), np.asarray(x.value.sum()), bw)


def weighted_sum(x: Var, weights: np.ndarray) -> Var:
    """Scalar projection sum(x * weights) against a constant; handy for
    turning any tensor-valued op into a checkable scalar loss."""
    weights = np.asarray(weights, dtype=x.value.dtype)

    def bw(g):
        return (g * weights,)

    return x.tape.record("weighted_sum", (x,), np.asarray((x.value * weights).sum()), bw)
