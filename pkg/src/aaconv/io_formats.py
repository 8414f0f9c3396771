"""Persistence formats: the binary weights container, line-oriented run
configs, CSV metric traces, and PPM/PGM images.

The weights container is magic "AACV" + version byte 0x01, then per tensor:
u16 name length, UTF-8 name, u8 rank, rank u32 dims, raw float32 payload.
Everything is little-endian regardless of host; tensors are written in
lexicographic name order and duplicate names are rejected on load.
"""

from __future__ import annotations

import struct
from dataclasses import fields as dataclass_fields

import numpy as np

from .errors import InputError
from .toynet import ToyNetConfig, TrainConfig

MAGIC = b"AACV"
VERSION = 1


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise InputError(f"{path}: not a weights file (bad magic {blob[:4]!r})")
    if blob[4] != VERSION:
        raise InputError(f"{path}: unsupported version {blob[4]}")
    pos = 5
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank = blob[pos]
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name in out:
            raise InputError(f"{path}: duplicate tensor name {name!r}")
        out[name] = arr.copy()
    return out


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name for f in dataclass_fields(ToyNetConfig)}
_TRAIN_KEYS = {f.name for f in dataclass_fields(TrainConfig)}


def parse_run_config(text: str) -> tuple[ToyNetConfig, TrainConfig]:
    """Parse `key = value` lines ('#' comments allowed) into the model and
    training configs. `seed` applies to both. Unknown keys are rejected with
    their line number."""
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _MODEL_KEYS | _TRAIN_KEYS:
            raise InputError(f"line {lineno}: unknown key {key!r}")
        if key in _MODEL_KEYS:
            model_kwargs[key] = _coerce(ToyNetConfig, key, value, lineno)
        if key in _TRAIN_KEYS:
            train_kwargs[key] = _coerce(TrainConfig, key, value, lineno)
    return ToyNetConfig(**model_kwargs), TrainConfig(**train_kwargs)


def _coerce(cls, key, value, lineno):
    target = {f.name: f.type for f in dataclass_fields(cls)}[key]
    try:
        if target in (int, "int"):
            return int(value)
        if target in (float, "float"):
            return float(value)
        return value
    except ValueError as exc:
        raise InputError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc


def format_run_config(model: ToyNetConfig, train: TrainConfig) -> str:
    lines = []
    for f in dataclass_fields(ToyNetConfig):
        lines.append(f"{f.name} = {getattr(model, f.name)}")
    for f in dataclass_fields(TrainConfig):
        if f.name == "seed":
            continue  # shared with the model config
        lines.append(f"{f.name} = {getattr(train, f.name)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metric traces
# ---------------------------------------------------------------------------


def write_trace_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write("step,loss,accuracy\n")
        for row in rows:
            acc = "" if row.accuracy is None else f"{row.accuracy:.4f}"
            f.write(f"{row.step},{row.loss:.6f},{acc}\n")


def read_trace_csv(path):
    with open(path) as f:
        header = f.readline().strip()
        if header != "step,loss,accuracy":
            raise InputError(f"{path}: unexpected header {header!r}")
        rows = []
        for line in f:
            step, loss, acc = line.rstrip("\n").split(",")
            rows.append((int(step), float(loss), float(acc) if acc else None))
    return rows


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255, from a (H, W) uint8 array."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise InputError(f"PGM wants a 2-D array, got shape {gray.shape}")
    with open(path, "wb") as f:
        f.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        f.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    tokens, payload = _read_netpbm_header(path, b"P5")
    w, h, maxval = tokens
    if maxval != 255:
        raise InputError(f"{path}: only maxval 255 supported")
    data = np.frombuffer(payload[: h * w], dtype=np.uint8)
    if data.size != h * w:
        raise InputError(f"{path}: truncated payload")
    return data.reshape(h, w).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6) from an (H, W, 3) array; floats are clipped from [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError(f"PPM wants (H, W, 3), got shape {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    """(H, W, 3) float32 in [0, 1] from a binary PPM."""
    tokens, payload = _read_netpbm_header(path, b"P6")
    w, h, maxval = tokens
    if maxval != 255:
        raise InputError(f"{path}: only maxval 255 supported")
    data = np.frombuffer(payload[: h * w * 3], dtype=np.uint8)
    if data.size != h * w * 3:
        raise InputError(f"{path}: truncated payload")
    return (data.reshape(h, w, 3).astype(np.float32)) / 255.0


def _read_netpbm_header(path, magic):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(magic):
        raise InputError(f"{path}: expected {magic.decode()} file")
    # header = magic + three whitespace-separated integers, '#' comments allowed
    pos = len(magic)
    tokens = []
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        try:
            tokens.append(int(blob[start:pos]))
        except ValueError:
            raise InputError(f"{path}: malformed header") from None
    return tokens, blob[pos + 1 :]
