"""A small residual classifier with attention-augmented blocks, and the
deterministic SGD harness that trains it on the translated-shapes task.

Single-threaded float32 training is bit-reproducible: the trajectory is a
pure function of (ToyNetConfig, TrainConfig).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dataset
from ._malloc_tuning import keep_large_buffers_on_heap
from .attention import ENCODINGS
from .augment import AAConvSpec, AAConvWeights, aaconv_bn_v, init_aaconv_weights, wrap_aaconv_weights
from .autodiff import Parameter, Tape
from .errors import ContractError, InputError, NumericError


@dataclass(frozen=True)
class ToyNetConfig:
    image_size: int = 16
    channels: int = 3
    classes: int = 4
    stem_width: int = 16
    blocks: int = 2
    kappa: float = 0.5
    upsilon: float = 0.25
    heads: int = 4
    encoding: str = "relative"
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "channels", "classes", "stem_width", "blocks", "heads"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if not 0 <= self.upsilon <= 1:
            raise ContractError(f"upsilon must lie in [0, 1], got {self.upsilon}")
        if self.encoding not in ENCODINGS:
            raise ContractError(f"unknown encoding {self.encoding!r}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 42


class ToyNet:
    """Stem conv, `blocks` residual blocks whose first conv is augmented,
    global average pooling, and a dense head."""

    def __init__(self, cfg: ToyNetConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        sw = cfg.stem_width
        self.params: list[Parameter] = []
        self.buffers: dict[str, np.ndarray] = {}

        def conv_param(name, k, c_in, c_out):
            lim = np.sqrt(6.0 / (k * k * c_in))
            p = Parameter(name, rng.uniform(-lim, lim, (k, k, c_in, c_out)).astype(dtype))
            self.params.append(p)
            return p

        def bn_params(name, c):
            g = Parameter(f"{name}.gamma", np.ones(c, dtype), decay=False)
            b = Parameter(f"{name}.beta", np.zeros(c, dtype), decay=False)
            self.params += [g, b]
            self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype)
            self.buffers[f"{name}.running_var"] = np.ones(c, dtype)
            return g, b

        self.stem = conv_param("stem.conv", 3, cfg.channels, sw)
        self.stem_bn = bn_params("stem.bn", sw)

        self.block_specs: list[AAConvSpec] = []
        self.block_weights: list[AAConvWeights] = []
        self.block_bn1: list[tuple] = []
        self.block_conv2: list[Parameter] = []
        self.block_bn2: list[tuple] = []
        for i in range(cfg.blocks):
            spec = AAConvSpec(
                k=3, f_in=sw, f_out=sw, kappa=cfg.kappa, upsilon=cfg.upsilon,
                heads=cfg.heads, encoding=cfg.encoding,
            )
            raw = init_aaconv_weights(spec, cfg.image_size, cfg.image_size, rng, dtype)
            weights = AAConvWeights(None, None)
            if raw.conv_kernel is not None:
                weights.conv_kernel = Parameter(f"block{i}.conv", raw.conv_kernel)
                self.params.append(weights.conv_kernel)
            if raw.attn is not None:
                attn = raw.attn
                attn.w_qkv = Parameter(f"block{i}.attn.w_qkv", attn.w_qkv)
                attn.w_out = Parameter(f"block{i}.attn.w_out", attn.w_out)
                self.params += [attn.w_qkv, attn.w_out]
                if attn.rel_h is not None:
                    attn.rel_h = Parameter(f"block{i}.attn.rel_h", attn.rel_h, decay=False)
                    attn.rel_w = Parameter(f"block{i}.attn.rel_w", attn.rel_w, decay=False)
                    self.params += [attn.rel_h, attn.rel_w]
                weights.attn = attn
            self.block_specs.append(spec)
            self.block_weights.append(weights)
            self.block_bn1.append(bn_params(f"block{i}.bn1", sw))
            self.block_conv2.append(conv_param(f"block{i}.conv2", 3, sw, sw))
            self.block_bn2.append(bn_params(f"block{i}.bn2", sw))

        lim = np.sqrt(6.0 / sw)
        self.head_w = Parameter("head.w", rng.uniform(-lim, lim, (sw, cfg.classes)).astype(dtype))
        self.head_b = Parameter("head.b", np.zeros(cfg.classes, dtype), decay=False)
        self.params += [self.head_w, self.head_b]

        names = [p.name for p in self.params]
        assert len(names) == len(set(names)), "parameter names must be unique"

    def _bn(self, tape, x, name, gamma_beta, training, momentum=0.9):
        g, b = gamma_beta
        if training:
            out, mean, var = ad.batchnorm_train(x, tape.param(g), tape.param(b))
            rm, rv = self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"]
            self.buffers[f"{name}.running_mean"] = momentum * rm + (1 - momentum) * mean
            self.buffers[f"{name}.running_var"] = momentum * rv + (1 - momentum) * var
            return out
        return ad.batchnorm_eval(
            x, tape.param(g), tape.param(b),
            self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
        )

    def forward(self, tape: Tape, x: np.ndarray, training: bool = True,
                capture: list | None = None):
        """Logits Var for a (B, H, W, C) batch."""
        h = tape.const(np.ascontiguousarray(x, dtype=self.dtype))
        h = ad.relu(self._bn(tape, ad.conv2d(h, tape.param(self.stem)), "stem.bn", self.stem_bn, training))
        for i, spec in enumerate(self.block_specs):
            wv = wrap_aaconv_weights(tape, self.block_weights[i])
            if training:
                a, mean, var = aaconv_bn_v(
                    h, spec, wv, tape.param(self.block_bn1[i][0]),
                    tape.param(self.block_bn1[i][1]), training=True, capture=capture,
                )
                rm = self.buffers[f"block{i}.bn1.running_mean"]
                rv = self.buffers[f"block{i}.bn1.running_var"]
                self.buffers[f"block{i}.bn1.running_mean"] = 0.9 * rm + 0.1 * mean
                self.buffers[f"block{i}.bn1.running_var"] = 0.9 * rv + 0.1 * var
            else:
                a = aaconv_bn_v(
                    h, spec, wv, tape.param(self.block_bn1[i][0]),
                    tape.param(self.block_bn1[i][1]), training=False,
                    running_mean=self.buffers[f"block{i}.bn1.running_mean"],
                    running_var=self.buffers[f"block{i}.bn1.running_var"],
                    capture=capture,
                )
            a = ad.relu(a)
            a = ad.conv2d(a, tape.param(self.block_conv2[i]))
            a = self._bn(tape, a, f"block{i}.bn2", self.block_bn2[i], training)
            h = ad.relu(ad.add(h, a))
        pooled = ad.global_avg_pool(h)
        return ad.dense(pooled, tape.param(self.head_w), tape.param(self.head_b))

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits = self.forward(Tape(), x, training=False)
        return logits.value.argmax(axis=1)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics, by name."""
        out = {p.name: p.value for p in self.params}
        out.update(self.buffers)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if p.name not in tensors:
                raise InputError(f"missing tensor {p.name!r} in weights")
            if tensors[p.name].shape != p.value.shape:
                raise InputError(
                    f"shape mismatch for {p.name}: file {tensors[p.name].shape}, "
                    f"model {p.value.shape}"
                )
            p.value[...] = tensors[p.name].astype(self.dtype)
        for name in self.buffers:
            if name in tensors:
                self.buffers[name] = tensors[name].astype(self.dtype)


def build_toy_net(cfg: ToyNetConfig, dtype=np.float32) -> ToyNet:
    return ToyNet(cfg, dtype=dtype)


class SGD:
    """Momentum SGD with decoupled weight decay (decay skips parameters
    flagged decay=False: batch-norm affines, relative embeddings, biases)."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        for p in self.params:
            v = self.velocity[p.name]
            v *= self.momentum
            v += p.grad
            decay = self.lr * self.weight_decay * p.value if (p.decay and self.weight_decay) else 0.0
            p.value -= self.lr * v + decay


@dataclass
class TraceRow:
    step: int
    loss: float
    accuracy: float | None = None


EVAL_EVERY = 50
EVAL_SIZE = 256
EVAL_INDEX_BASE = 1_000_000  # eval samples live far from the training stream


def evaluate(model: ToyNet, seed: int, n: int = EVAL_SIZE) -> float:
    xs, ys = dataset.synth_dataset(seed, n, size=model.cfg.image_size,
                                   channels=model.cfg.channels, start=EVAL_INDEX_BASE)
    correct = 0
    for lo in range(0, n, 64):
        correct += int((model.predict(xs[lo : lo + 64]) == ys[lo : lo + 64]).sum())
    return correct / n


def train(model: ToyNet, tcfg: TrainConfig) -> list[TraceRow]:
    """Momentum-SGD loop over a fresh deterministic sample stream.

    Step t trains on dataset indices [(t-1)*batch, t*batch); the recorded
    loss is the pre-update batch loss. Accuracy on a held-out set is
    appended every EVAL_EVERY steps.
    """
    keep_large_buffers_on_heap()
    opt = SGD(model.params, tcfg.lr, tcfg.momentum, tcfg.weight_decay)
    rows = []
    for step in range(1, tcfg.steps + 1):
        xs, ys = dataset.synth_dataset(
            tcfg.seed, tcfg.batch, size=model.cfg.image_size,
            channels=model.cfg.channels, start=(step - 1) * tcfg.batch,
        )
        tape = Tape()
        logits = model.forward(tape, xs, training=True)
        loss = ad.cross_entropy_with_logits(logits, ys)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise NumericError(f"non-finite loss at step {step}")
        ad.backward(tape, loss)
        opt.step()
        acc = evaluate(model, tcfg.seed) if step % EVAL_EVERY == 0 else None
        rows.append(TraceRow(step, loss_val, acc))
    return rows


def dump_attention_maps(model: ToyNet, image: np.ndarray, pixels: list[tuple[int, int]]):
    """Attention distributions as grayscale maps, one per (augmented layer,
    head, query pixel).

    Returns {filename: (H, W) uint8 array}; each map is the query pixel's
    softmax row reshaped to the attention grid and min-max scaled to 0..255
    (a constant map scales to 255). Filenames follow
    layer{L}_head{h}_q{y}x{x}.pgm.
    """
    if image.ndim == 3:
        image = image[None]
    capture: list[np.ndarray] = []
    model.forward(Tape(), image, training=False, capture=capture)
    out = {}
    for layer_idx, attn in enumerate(capture):
        _, heads, hw, _ = attn.shape
        side = int(round(np.sqrt(hw)))
        ah, aw = model.block_specs[layer_idx].attention_dims(
            model.cfg.image_size, model.cfg.image_size
        )
        assert ah * aw == hw
        for y, x in pixels:
            if not (0 <= y < ah and 0 <= x < aw):
                raise InputError(f"pixel ({y}, {x}) outside attention grid {ah}x{aw}")
            for head in range(heads):
                row = attn[0, head, y * aw + x].reshape(ah, aw)
                lo, hi = row.min(), row.max()
                if hi > lo:
                    scaled = np.round((row - lo) / (hi - lo) * 255.0)
                else:
                    scaled = np.full_like(row, 255.0)
                name = f"layer{layer_idx}_head{head}_q{y}x{x}.pgm"
                out[name] = scaled.astype(np.uint8)
    return out
