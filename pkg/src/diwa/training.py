"""L1 noise-prediction loss, AdamW, the training step and binary checkpoints.

Checkpoint layout (all integers little-endian)::

    b"DIWA"  u32 version  u64 config_hash  u32 n_entries
    n_entries x (u32 name_len, name utf-8, u8 dtype, u32 ndim, u64 dims[ndim], payload)
    u32 crc32 of everything before it

Entries are sorted by name, so equal states give byte-identical files.
dtype tags: 0 float64, 1 uint64, 2 utf-8 bytes.
"""
from __future__ import annotations

import logging
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ImageSample, augment_hflip
from .diffusion import make_training_example
from .models import ModelParams, Networks
from .schedule import NoiseSchedule
from .tensor import ShapeError, Tensor, backward

log = logging.getLogger(__name__)

__all__ = [
    "l1_loss",
    "TrainState",
    "TrainingDiverged",
    "MissingGradient",
    "adamw_update",
    "init_state",
    "next_batch",
    "train_step",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "ConfigMismatch",
]

MAGIC = b"DIWA"
VERSION = 1
_F64, _U64, _UTF8 = 0, 1, 2


class TrainingDiverged(RuntimeError):
    pass


class MissingGradient(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def l1_loss(eps, f_out: Tensor) -> Tensor:
    """Mean absolute error between the injected and the predicted noise."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.shape != f_out.shape:
        raise ShapeError("l1_loss", "shape", f_out.shape, eps.shape)
    return (eps - f_out).abs().mean()


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: np.random.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)
    config_text: str = ""
    config_hash: int = 0


def init_state(params: ModelParams, seed, config_text: str = "", config_hash: int = 0) -> TrainState:
    m = {n: np.zeros_like(t.data) for n, t in params.items()}
    v = {n: np.zeros_like(t.data) for n, t in params.items()}
    return TrainState(params, m, v, np.random.default_rng(seed), 0, [], config_text, config_hash)


def adamw_update(
    state: TrainState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_hat: float = 1e-8,
    weight_decay: float = 1e-4,
) -> None:
    """One decoupled-weight-decay Adam step; advances ``state.step``."""
    names = state.params.names()
    missing = [n for n in names if state.params[n].grad is None]
    if missing:
        raise MissingGradient(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for n in names:
        p = state.params[n]
        g = p.grad
        m = state.m[n] = beta1 * state.m[n] + (1.0 - beta1) * g
        v = state.v[n] = beta2 * state.v[n] + (1.0 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps_hat) + weight_decay * p.data)
    state.step = step


def next_batch(state: TrainState, pairs: Sequence[ImageSample], batch_size: int, hflip: bool = True):
    """Draw ``batch_size`` pairs with replacement, then flip each one.

    Returns the stacked ``(x, y)`` arrays and the drawn indices.
    """
    idx = state.rng.integers(0, len(pairs), size=batch_size)
    chosen = [pairs[i] for i in idx]
    if hflip:
        chosen = [augment_hflip(s, state.rng) for s in chosen]
    x = np.stack([s.lr_up for s in chosen])
    y = np.stack([s.hr for s in chosen])
    return x, y, idx


def train_step(
    state: TrainState,
    x: np.ndarray,
    y: np.ndarray,
    schedule: NoiseSchedule,
    nets: Networks,
    lr: float,
    weight_decay: float,
    batch_id=None,
) -> float:
    """Forward, backward and AdamW update for one batch of (upsampled LR, HR)."""
    if len(x) == 0:
        raise ValueError("empty batch")
    params = state.params
    params.zero_grad()
    ex = make_training_example(
        Tensor(x), Tensor(y), schedule, lambda s: nets.g(params, s, training=True), state.rng, nets.cfg.use_dwt
    )
    f_out = nets.f(params, ex.x_sub, ex.z_t, ex.gamma, training=True, rng=state.rng)
    loss = l1_loss(ex.eps, f_out)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step + 1} (gammas={ex.gamma.tolist()}, batch={batch_id})"
        )
    backward(loss)
    adamw_update(state, lr, weight_decay=weight_decay)
    state.losses.append(value)
    return value


# ----------------------------------------------------------------------------
# checkpoints


def _pack_entry(name: str, arr: np.ndarray, tag: int) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    dt = {_F64: "<f8", _U64: "<u8", _UTF8: "u1"}[tag]
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def _rng_words(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported generator {st['bit_generator']}")
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array(
        [s >> 64, s & mask, inc >> 64, inc & mask, st["has_uint32"], st["uinteger"]], dtype=np.uint64
    )


def _rng_from_words(w: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in w]
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return np.random.Generator(bg)


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def save_checkpoint(state: TrainState, path) -> None:
    entries: dict[str, tuple[np.ndarray, int]] = {}
    for n, t in state.params.items():
        entries[f"param/{n}"] = (t.data, _F64)
        entries[f"adam.m/{n}"] = (state.m[n], _F64)
        entries[f"adam.v/{n}"] = (state.v[n], _F64)
    for k, val in state.params.meta.items():
        entries[f"meta/{k}"] = (_text(val), _UTF8)
    entries["meta.run/config"] = (_text(state.config_text), _UTF8)
    entries["train/step"] = (np.array([state.step], dtype=np.uint64), _U64)
    entries["train/losses"] = (np.asarray(state.losses, dtype=np.float64), _F64)
    entries["train/rng"] = (_rng_words(state.rng), _U64)

    body = [MAGIC, struct.pack("<IQI", VERSION, state.config_hash, len(entries))]
    for name in sorted(entries):
        arr, tag = entries[name]
        body.append(_pack_entry(name, arr, tag))
    blob = b"".join(body)
    blob += struct.pack("<I", zlib.crc32(blob))
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_entries(path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 24:
        raise CheckpointError(f"{path}: checkpoint truncated")
    (crc,) = struct.unpack("<I", buf[-4:])
    r = _Reader(buf[:-4])
    r.take(4)
    version, chash, n = r.unpack("<IQI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode("utf-8")
        tag, ndim = r.unpack("<BI")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(dims)) if ndim else 1
        if tag == _F64:
            arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        elif tag == _U64:
            arr = np.frombuffer(r.take(8 * count), dtype="<u8").reshape(dims).astype(np.uint64)
        elif tag == _UTF8:
            arr = np.frombuffer(r.take(count), dtype=np.uint8).copy()
        else:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        out[name] = arr
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return chash, out


def load_checkpoint(path, expected_hash: int | None = None, allow_mismatch: bool = False) -> TrainState:
    """Restore a :class:`TrainState`; nothing is returned unless the file parses fully."""
    chash, entries = read_checkpoint_entries(path)
    if expected_hash is not None and chash != expected_hash:
        msg = f"{path}: config hash {chash:016x} != expected {expected_hash:016x}"
        if not allow_mismatch:
            raise ConfigMismatch(msg)
        warnings.warn(msg + " (overridden)", stacklevel=2)
    params = ModelParams()
    m, v = {}, {}
    for name, arr in entries.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = Tensor(arr, requires_grad=True)
        elif kind == "adam.m":
            m[key] = arr
        elif kind == "adam.v":
            v[key] = arr
        elif kind == "meta":
            params.meta[key] = arr.tobytes().decode("utf-8")
    if set(m) != set(params.tensors) or set(v) != set(params.tensors):
        raise CheckpointError(f"{path}: optimizer moments do not match parameters")
    try:
        step = int(entries["train/step"][0])
        rng = _rng_from_words(entries["train/rng"])
        losses = [float(x) for x in entries["train/losses"]]
        config_text = entries["meta.run/config"].tobytes().decode("utf-8")
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from None
    return TrainState(params, m, v, rng, step, losses, config_text, chash)
