"""Execution-free parameter, FLOP, and attention-memory accounting.

Architectures are described as flat layer lists with spatial dims resolved
at build time; the counters then enumerate exactly. Conventions: one
multiply-add is two FLOPs; convolutions carry no bias; batch norms count
their two affine vectors (running statistics are state, not parameters);
elementwise ops, normalizations, poolings and softmaxes count zero FLOPs.

Augmented layers follow the same depth-rounding rules as the executable
operator (see augment.AAConvSpec), including the per-head minimum key depth
that the ImageNet/CIFAR recipes use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Union

from .augment import AAConvSpec
from .errors import InputError

IMAGENET_MIN_KEY_DEPTH = 20  # per-head floor used by the large-model recipes


@dataclass(frozen=True)
class Conv:
    k: int
    c_in: int
    c_out: int
    out_h: int
    out_w: int
    stride: int = 1
    label: str = ""


@dataclass(frozen=True)
class BatchNorm:
    channels: int


@dataclass(frozen=True)
class Dense:
    d_in: int
    d_out: int


@dataclass(frozen=True)
class AAConvLayer:
    k: int
    c_in: int
    c_out: int
    d_k: int
    d_v: int
    heads: int
    out_h: int
    out_w: int
    attn_h: int
    attn_w: int
    encoding: str = "relative"
    label: str = ""

    @property
    def conv_channels(self) -> int:
        return self.c_out - self.d_v

    @property
    def qkv_in(self) -> int:
        return self.c_in + (3 if self.encoding == "coord" else 0)


Layer = Union[Conv, BatchNorm, Dense, AAConvLayer]


@dataclass(frozen=True)
class ArchDescriptor:
    family: str
    image_size: int
    classes: int
    augmented: bool
    layers: tuple


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------


def _aaconv_params(l: AAConvLayer) -> int:
    total = l.k * l.k * l.c_in * l.conv_channels
    if l.d_v > 0:
        total += l.qkv_in * (2 * l.d_k + l.d_v) + l.d_v * l.d_v
        if l.encoding == "relative":
            total += (2 * (l.attn_h + l.attn_w) - 2) * (l.d_k // l.heads)
    return total


def count_params(d: ArchDescriptor) -> int:
    total = 0
    for l in d.layers:
        if isinstance(l, Conv):
            total += l.k * l.k * l.c_in * l.c_out
        elif isinstance(l, BatchNorm):
            total += 2 * l.channels
        elif isinstance(l, Dense):
            total += l.d_in * l.d_out + l.d_out
        elif isinstance(l, AAConvLayer):
            total += _aaconv_params(l)
    return total


def _aaconv_attention_flops(l: AAConvLayer, include_content_logits: bool = True) -> int:
    """Attention-path FLOPs at the layer's attention resolution.

    include_content_logits toggles the query-key logit matmul; the published
    per-layer attention budgets this module reproduces track only the
    projection, relative-contraction, value-aggregation and head-mixing
    terms, so the reproduction path excludes it while whole-network totals
    include it.
    """
    if l.d_v == 0:
        return 0
    hw = l.attn_h * l.attn_w
    macs = hw * l.qkv_in * (2 * l.d_k + l.d_v)  # fused qkv projection
    if include_content_logits:
        macs += hw * hw * l.d_k  # query-key logits
    macs += hw * hw * l.d_v  # attention-weighted values
    if l.encoding == "relative":
        macs += hw * l.d_k * (2 * l.attn_h - 1 + 2 * l.attn_w - 1)
    macs += hw * l.d_v * l.d_v  # output projection
    return 2 * macs


def count_flops(d: ArchDescriptor) -> int:
    total = 0
    for l in d.layers:
        if isinstance(l, Conv):
            total += 2 * l.k * l.k * l.c_in * l.c_out * l.out_h * l.out_w
        elif isinstance(l, Dense):
            total += 2 * l.d_in * l.d_out
        elif isinstance(l, AAConvLayer):
            total += 2 * l.k * l.k * l.c_in * l.conv_channels * l.out_h * l.out_w
            total += _aaconv_attention_flops(l, include_content_logits=True)
    return total


@dataclass
class AttentionCost:
    """Per-augmented-layer and aggregate attention costs."""

    labels: list
    bytes_per_layer: list
    params_per_layer: list
    flops_per_layer: list

    @property
    def bytes_training(self) -> int:
        return sum(self.bytes_per_layer)

    @property
    def bytes_inference_max(self) -> int:
        return max(self.bytes_per_layer, default=0)

    @property
    def params_total(self) -> int:
        return sum(self.params_per_layer)

    @property
    def flops_total(self) -> int:
        return sum(self.flops_per_layer)


def attn_memory(d: ArchDescriptor, bytes_per_entry: int = 2) -> AttentionCost:
    """Attention-map storage (heads * (HW)^2 entries per layer) plus the
    attention parameter/FLOP budget of every augmented layer."""
    cost = AttentionCost([], [], [], [])
    for l in d.layers:
        if isinstance(l, AAConvLayer) and l.d_v > 0:
            hw = l.attn_h * l.attn_w
            cost.labels.append(l.label or f"aaconv_{len(cost.labels)}")
            cost.bytes_per_layer.append(l.heads * hw * hw * bytes_per_entry)
            attn_only = _aaconv_params(l) - l.k * l.k * l.c_in * l.conv_channels
            cost.params_per_layer.append(attn_only)
            cost.flops_per_layer.append(
                _aaconv_attention_flops(l, include_content_logits=False)
            )
    return cost


# ---------------------------------------------------------------------------
# architecture builders
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, image_size: int):
        self.h = self.w = image_size
        self.layers: list[Layer] = []

    def conv(self, k, c_in, c_out, stride=1, label=""):
        self.h = -(-self.h // stride)
        self.w = -(-self.w // stride)
        self.layers.append(Conv(k, c_in, c_out, self.h, self.w, stride, label))

    def conv_bn(self, k, c_in, c_out, stride=1, label=""):
        self.conv(k, c_in, c_out, stride, label)
        self.layers.append(BatchNorm(c_out))

    def aaconv_bn(self, spec: AAConvSpec, label=""):
        ah, aw = spec.attention_dims(self.h, self.w)
        self.h = -(-self.h // spec.stride)
        self.w = -(-self.w // spec.stride)
        self.layers.append(
            AAConvLayer(
                spec.k, spec.f_in, spec.f_out, spec.d_k, spec.d_v, spec.heads,
                self.h, self.w, ah, aw, spec.encoding, label,
            )
        )
        self.layers.append(BatchNorm(spec.f_out))

    def pool(self, stride=2):
        self.h = -(-self.h // stride)
        self.w = -(-self.w // stride)


RESNET_STAGES = {
    "resnet34": ([3, 4, 6, 3], False),
    "resnet50": ([3, 4, 6, 3], True),
    "resnet101": ([3, 4, 23, 3], True),
    "resnet152": ([3, 8, 36, 3], True),
}


def _build_resnet(family, image_size, classes, augmented, kappa, upsilon, heads):
    blocks, bottleneck = RESNET_STAGES[family]
    widths = [64, 128, 256, 512]
    expansion = 4 if bottleneck else 1
    b = _Builder(image_size)
    b.conv_bn(7, 3, 64, stride=2, label="stem")
    b.pool(2)  # 3x3/2 max pool
    c_in = 64
    for stage in range(4):
        w = widths[stage]
        out_c = w * expansion
        # attention joins in the last 3 stages; only the first of those
        # pools its attention input below the stage resolution
        augment_stage = augmented and stage >= 1
        downsample_attn = stage == 1
        for block in range(blocks[stage]):
            stride = 2 if (stage > 0 and block == 0) else 1
            label = f"stage{stage}_block{block}"
            if bottleneck:
                b.conv_bn(1, c_in, w, label=f"{label}_reduce")
                if augment_stage:
                    b.aaconv_bn(
                        AAConvSpec(
                            k=3, f_in=w, f_out=w, kappa=kappa, upsilon=upsilon,
                            heads=heads, stride=stride,
                            downsample_attention=downsample_attn,
                            min_head_depth=IMAGENET_MIN_KEY_DEPTH,
                        ),
                        label=label,
                    )
                else:
                    b.conv_bn(3, w, w, stride=stride, label=f"{label}_spatial")
                b.conv_bn(1, w, out_c, label=f"{label}_expand")
            else:
                if augment_stage:
                    b.aaconv_bn(
                        AAConvSpec(
                            k=3, f_in=c_in, f_out=w, kappa=kappa, upsilon=upsilon,
                            heads=heads, stride=stride,
                            downsample_attention=downsample_attn,
                            min_head_depth=IMAGENET_MIN_KEY_DEPTH,
                        ),
                        label=label,
                    )
                else:
                    b.conv_bn(3, c_in, w, stride=stride, label=f"{label}_a")
                b.conv_bn(3, w, w, label=f"{label}_b")
            if block == 0 and (stride != 1 or c_in != out_c):
                # projection shortcut rides outside the main path
                b.layers.append(Conv(1, c_in, out_c, b.h, b.w, stride, f"{label}_proj"))
                b.layers.append(BatchNorm(out_c))
            c_in = out_c
    b.layers.append(Dense(c_in, classes))
    return b.layers


def _build_wrn28_10(image_size, classes, augmented, kappa, upsilon, heads):
    widen = 10
    per_stage = 4  # (28 - 4) / 6
    widths = [16 * widen, 32 * widen, 64 * widen]
    b = _Builder(image_size)
    b.conv(3, 3, 16, label="stem")
    c_in = 16
    for stage in range(3):
        w = widths[stage]
        for block in range(per_stage):
            stride = 2 if (stage > 0 and block == 0) else 1
            label = f"stage{stage}_block{block}"
            # pre-activation: BN precedes each convolution, which also puts
            # one right after the augmented layer
            b.layers.append(BatchNorm(c_in))
            if augmented:
                b.aaconv_bn(
                    AAConvSpec(
                        k=3, f_in=c_in, f_out=w, kappa=kappa, upsilon=upsilon,
                        heads=heads, stride=stride,
                        min_head_depth=IMAGENET_MIN_KEY_DEPTH,
                    ),
                    label=label,
                )
            else:
                b.conv_bn(3, c_in, w, stride=stride, label=f"{label}_a")
            b.conv(3, w, w, label=f"{label}_b")
            if block == 0 and c_in != w:
                b.layers.append(Conv(1, c_in, w, b.h, b.w, stride, f"{label}_proj"))
            c_in = w
    b.layers.append(BatchNorm(c_in))
    b.layers.append(Dense(c_in, classes))
    return b.layers


def _build_toy(image_size, classes, augmented, kappa, upsilon, heads,
               channels=3, stem_width=16, blocks=2, encoding="relative"):
    b = _Builder(image_size)
    b.conv_bn(3, channels, stem_width, label="stem")
    for i in range(blocks):
        if augmented and upsilon > 0:
            b.aaconv_bn(
                AAConvSpec(
                    k=3, f_in=stem_width, f_out=stem_width, kappa=kappa,
                    upsilon=upsilon, heads=heads, encoding=encoding,
                ),
                label=f"block{i}",
            )
        else:
            b.conv_bn(3, stem_width, stem_width, label=f"block{i}_a")
        b.conv_bn(3, stem_width, stem_width, label=f"block{i}_b")
    b.layers.append(Dense(stem_width, classes))
    return b.layers


FAMILIES = ("resnet34", "resnet50", "resnet101", "resnet152", "wrn28_10", "toy")

_DEFAULTS = {
    "resnet34": dict(image_size=224, classes=1000, kappa=0.25, upsilon=0.25, heads=8),
    "resnet50": dict(image_size=224, classes=1000, kappa=0.2, upsilon=0.1, heads=8),
    "resnet101": dict(image_size=224, classes=1000, kappa=0.2, upsilon=0.1, heads=8),
    "resnet152": dict(image_size=224, classes=1000, kappa=0.2, upsilon=0.1, heads=8),
    "wrn28_10": dict(image_size=32, classes=100, kappa=0.2, upsilon=0.1, heads=8),
    "toy": dict(image_size=16, classes=4, kappa=0.5, upsilon=0.25, heads=4),
}


def build_descriptor(
    family: str,
    kappa: float = None,
    upsilon: float = None,
    heads: int = None,
    augmented: bool = False,
    image_size: int = None,
    classes: int = None,
    **toy_kwargs,
) -> ArchDescriptor:
    if family not in FAMILIES:
        raise InputError(f"unknown architecture {family!r}; choose from {FAMILIES}")
    cfg = dict(_DEFAULTS[family])
    for key, val in dict(
        kappa=kappa, upsilon=upsilon, heads=heads, image_size=image_size, classes=classes
    ).items():
        if val is not None:
            cfg[key] = val
    args = (cfg["image_size"], cfg["classes"], augmented, cfg["kappa"], cfg["upsilon"], cfg["heads"])
    if family == "wrn28_10":
        layers = _build_wrn28_10(*args)
    elif family == "toy":
        layers = _build_toy(*args, **toy_kwargs)
    else:
        layers = _build_resnet(family, *args)
    return ArchDescriptor(family, cfg["image_size"], cfg["classes"], augmented, tuple(layers))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


@dataclass
class CostReport:
    params: int
    flops: int
    attn_bytes_per_layer: list
    attn_bytes_training: int
    attn_bytes_inference_max: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "params": self.params,
                "flops": self.flops,
                "attn_bytes_per_layer": self.attn_bytes_per_layer,
                "attn_bytes_training": self.attn_bytes_training,
                "attn_bytes_inference_max": self.attn_bytes_inference_max,
            },
            indent=2,
        )

    def to_table(self) -> str:
        rows = [
            ("params", f"{self.params:,}"),
            ("flops", f"{self.flops:,}"),
            ("attn bytes (training)", f"{self.attn_bytes_training:,}"),
            ("attn bytes (inference max)", f"{self.attn_bytes_inference_max:,}"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {value:>16}" for name, value in rows]
        if self.attn_bytes_per_layer:
            lines.append(f"{'attn bytes per layer':<{width}}  " + ", ".join(
                f"{b:,}" for b in self.attn_bytes_per_layer
            ))
        return "\n".join(lines)


def cost_report(d: ArchDescriptor, bytes_per_entry: int = 2) -> CostReport:
    mem = attn_memory(d, bytes_per_entry)
    return CostReport(
        params=count_params(d),
        flops=count_flops(d),
        attn_bytes_per_layer=list(mem.bytes_per_layer),
        attn_bytes_training=mem.bytes_training,
        attn_bytes_inference_max=mem.bytes_inference_max,
    )
