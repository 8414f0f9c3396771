"""The attention-augmented convolution: a standard convolution path and a
multi-head self-attention path concatenated along channels.

The attention path may run at reduced resolution: with downsample_attention
set, its input is 3x3/stride-2 average pooled and its output bilinearly
upsampled back; a stride-2 layer instead pools once without upsampling so
both paths land on the same grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import ops
from .attention import (
    AttentionSpec,
    AttentionVars,
    AttentionWeights,
    init_attention_weights,
    multi_head_attention_v,
    wrap_weights,
)
from .autodiff import Parameter, Tape, Var
from .errors import ContractError


def round_to_heads(depth: float, heads: int) -> int:
    """Nearest positive multiple of `heads` (ties resolved by round-half-even)."""
    return max(heads, heads * round(depth / heads))


@dataclass(frozen=True)
class AAConvSpec:
    """One augmented layer: kernel size, channel counts, the attention
    fraction upsilon = d_v / f_out and key fraction kappa = d_k / f_out.

    Fractional depths are rounded to the nearest multiple of the head count;
    the per-head key depth is additionally floored at min_head_depth.
    upsilon = 0 degenerates to a plain convolution, upsilon = 1 to a fully
    attentional layer with no convolution path.
    """

    k: int
    f_in: int
    f_out: int
    kappa: float
    upsilon: float
    heads: int = 8
    stride: int = 1
    downsample_attention: bool = False
    encoding: str = "relative"
    min_head_depth: int = 1

    def __post_init__(self):
        if not (0 <= self.upsilon <= 1):
            raise ContractError(f"upsilon must lie in [0, 1], got {self.upsilon}")
        if self.upsilon > 0 and self.kappa <= 0:
            raise ContractError(f"kappa must be positive, got {self.kappa}")
        if self.stride not in (1, 2):
            raise ContractError(f"stride must be 1 or 2, got {self.stride}")
        if self.d_v > self.f_out:
            raise ContractError(
                f"attention channels d_v={self.d_v} exceed f_out={self.f_out}"
            )

    @property
    def d_v(self) -> int:
        if self.upsilon == 0:
            return 0
        return round_to_heads(self.upsilon * self.f_out, self.heads)

    @property
    def d_k(self) -> int:
        if self.upsilon == 0:
            return 0
        return max(
            round_to_heads(self.kappa * self.f_out, self.heads),
            self.min_head_depth * self.heads,
        )

    @property
    def conv_channels(self) -> int:
        return self.f_out - self.d_v

    def attention_spec(self) -> AttentionSpec:
        return AttentionSpec(
            heads=self.heads,
            d_k=self.d_k,
            d_v=self.d_v,
            encoding=self.encoding,
            min_head_depth=self.min_head_depth,
        )

    def attention_dims(self, in_h: int, in_w: int) -> tuple[int, int]:
        """Spatial dims at which the attention path actually runs."""
        h, w = in_h, in_w
        if self.stride == 2:
            h, w = -(-h // 2), -(-w // 2)
        if self.downsample_attention:
            h, w = -(-h // 2), -(-w // 2)
        return h, w


@dataclass
class AAConvWeights:
    conv_kernel: Optional[np.ndarray]  # (k, k, f_in, conv_channels) or None
    attn: Optional[AttentionWeights]  # None when upsilon == 0


def init_aaconv_weights(
    spec: AAConvSpec, in_h: int, in_w: int, rng, dtype=np.float32
) -> AAConvWeights:
    conv_kernel = None
    if spec.conv_channels > 0:
        lim = np.sqrt(6.0 / (spec.k * spec.k * spec.f_in))
        conv_kernel = rng.uniform(
            -lim, lim, size=(spec.k, spec.k, spec.f_in, spec.conv_channels)
        ).astype(dtype)
    attn = None
    if spec.d_v > 0:
        ah, aw = spec.attention_dims(in_h, in_w)
        attn = init_attention_weights(spec.attention_spec(), spec.f_in, ah, aw, rng, dtype)
    return AAConvWeights(conv_kernel, attn)


@dataclass
class AAConvVars:
    conv_kernel: Optional[Var]
    attn: Optional[AttentionVars]


def wrap_aaconv_weights(tape: Tape, weights: AAConvWeights) -> AAConvVars:
    kern = None
    if weights.conv_kernel is not None:
        kern = (
            tape.param(weights.conv_kernel)
            if isinstance(weights.conv_kernel, Parameter)
            else tape.const(weights.conv_kernel)
        )
    attn = wrap_weights(tape, weights.attn) if weights.attn is not None else None
    return AAConvVars(kern, attn)


def augmented_conv2d_v(
    x: Var, spec: AAConvSpec, wv: AAConvVars, capture: Optional[list] = None
) -> Var:
    """Differentiable augmented convolution. Conv channels come first in the
    concatenation, attention channels last. `capture`, if given, collects the
    attention distribution array."""
    if x.value.shape[3] != spec.f_in:
        raise ContractError(f"expected {spec.f_in} input channels, got {x.value.shape[3]}")

    conv_out = None
    if spec.conv_channels > 0:
        conv_out = ad.conv2d(x, wv.conv_kernel, stride=spec.stride)

    attn_out = None
    if spec.d_v > 0:
        a_in = x
        if spec.stride == 2:
            a_in = ad.avg_pool_3x3_s2(a_in)
        if spec.downsample_attention:
            a_in = ad.avg_pool_3x3_s2(a_in)
        attn_out, attn = multi_head_attention_v(a_in, spec.attention_spec(), wv.attn)
        if capture is not None:
            capture.append(attn.value)
        if spec.downsample_attention:
            target = conv_out.value.shape[1:3] if conv_out is not None else (
                -(-x.value.shape[1] // spec.stride),
                -(-x.value.shape[2] // spec.stride),
            )
            attn_out = ad.bilinear_upsample(attn_out, *target)

    if conv_out is None:
        return attn_out
    if attn_out is None:
        return conv_out
    if conv_out.value.shape[1:3] != attn_out.value.shape[1:3]:
        raise ContractError(
            f"path shapes disagree at concat: conv {conv_out.value.shape} "
            f"vs attention {attn_out.value.shape}"
        )
    return ad.concat([conv_out, attn_out], axis=3)


def augmented_conv2d(x: np.ndarray, spec: AAConvSpec, weights: AAConvWeights) -> np.ndarray:
    """Forward-only augmented convolution on a plain array."""
    tape = Tape()
    return augmented_conv2d_v(tape.const(np.asarray(x)), spec, wrap_aaconv_weights(tape, weights)).value


def aaconv_bn_v(
    x: Var,
    spec: AAConvSpec,
    wv: AAConvVars,
    gamma: Var,
    beta: Var,
    training: bool = True,
    running_mean=None,
    running_var=None,
    eps: float = 1e-5,
    capture: Optional[list] = None,
):
    """Augmented convolution with the batch normalization that follows it.

    Training mode returns (out, batch_mean, batch_var) for running-stat
    updates; inference mode normalizes with the supplied running statistics.
    """
    out = augmented_conv2d_v(x, spec, wv, capture=capture)
    if training:
        return ad.batchnorm_train(out, gamma, beta, eps=eps)
    return ad.batchnorm_eval(out, gamma, beta, running_mean, running_var, eps=eps)


def aaconv_bn(x, spec, weights, gamma, beta, eps=1e-5):
    """Array-level convenience: augmented conv + batch-statistics norm."""
    tape = Tape()
    out, _, _ = aaconv_bn_v(
        tape.const(np.asarray(x)),
        spec,
        wrap_aaconv_weights(tape, weights),
        tape.const(np.asarray(gamma)),
        tape.const(np.asarray(beta)),
        eps=eps,
    )
    return out.value


# ---------------------------------------------------------------------------
# parameter arithmetic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaParams:
    """Change in parameter count when a k x k convolution is augmented.

    formula: the closed form f_in*f_out*(2*kappa + (1 - k^2)*upsilon +
    (f_out/f_in)*upsilon^2) evaluated in exact rational arithmetic on the
    unrounded ratios. enumerated: the exact integer delta of the real layer
    (rounded depths), relative-position embeddings excluded — the closed
    form ignores them.
    """

    formula: Fraction
    enumerated: int


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(str(x))  # treat floats as their decimal literals
    return Fraction(x)


def delta_params(
    f_in: int,
    f_out: int,
    k: int,
    kappa,
    upsilon,
    heads: int = 8,
    min_head_depth: int = 1,
) -> DeltaParams:
    kap = _as_fraction(kappa)
    ups = _as_fraction(upsilon)
    formula = f_in * f_out * (2 * kap + (1 - k * k) * ups + Fraction(f_out, f_in) * ups * ups)

    spec = AAConvSpec(
        k=k, f_in=f_in, f_out=f_out, kappa=float(kap), upsilon=float(ups),
        heads=heads, min_head_depth=min_head_depth,
    )
    augmented = k * k * f_in * spec.conv_channels
    if spec.d_v > 0:
        augmented += f_in * (2 * spec.d_k + spec.d_v) + spec.d_v * spec.d_v
    enumerated = augmented - k * k * f_in * f_out
    return DeltaParams(formula=formula, enumerated=enumerated)
