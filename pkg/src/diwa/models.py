"""Initial predictor g (DWSR-style residual CNN) and denoiser f (conditional U-Net).

Both networks are pure functions of a flat parameter dict, keyed by dotted
paths such as ``f.down0.block1.conv1.weight``. They operate on whatever
channel count the pipeline hands them: ``4C`` sub-band channels in wavelet
mode, ``C`` image channels in the image-space ablation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat,
    conv2d,
    dropout,
    group_norm,
    linear,
    resample2x,
    silu,
)

log = logging.getLogger(__name__)

__all__ = [
    "ModelParams",
    "PredictorConfig",
    "DenoiserConfig",
    "InitialPredictor",
    "Denoiser",
    "noise_level_embedding",
    "EMBED_SCALE",
]

# sqrt(gamma) lives in (0, 1); stretch it so the fastest frequency turns many times
EMBED_SCALE = 1000.0


@dataclass
class ModelParams:
    """Named parameter store plus free-form metadata."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def items(self):
        return [(n, self.tensors[n]) for n in self.names()]

    def count(self, prefix: str = "") -> int:
        return int(sum(t.size for n, t in self.tensors.items() if n.startswith(prefix)))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def update(self, other: "ModelParams | dict[str, Tensor]") -> None:
        src = other.tensors if isinstance(other, ModelParams) else other
        for k, v in src.items():
            if k in self.tensors:
                raise KeyError(f"duplicate parameter name {k}")
            self.tensors[k] = v


def _conv_param(rng, cout, cin, k, scale=1.0):
    std = scale / math.sqrt(cin * k * k)
    return (
        Tensor(rng.standard_normal((cout, cin, k, k)) * std, requires_grad=True),
        Tensor(np.zeros(cout), requires_grad=True),
    )


def _linear_param(rng, gout, fin):
    return (
        Tensor(rng.standard_normal((gout, fin)) / math.sqrt(fin), requires_grad=True),
        Tensor(np.zeros(gout), requires_grad=True),
    )


def _norm_param(c):
    return Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True)


def num_groups(channels: int, preferred: int = 8) -> int:
    return preferred if channels >= preferred else channels


# ----------------------------------------------------------------------------
# initial predictor


@dataclass(frozen=True)
class PredictorConfig:
    channels: int
    hidden: int = 32
    layers: int = 10


class InitialPredictor:
    """``x + Delta(x)``, where Delta is a plain stack of 3x3 convs with SiLU.

    The last conv is linear and its output is added to the input, so with all
    weights zero the predictor is the identity.
    """

    def __init__(self, cfg: PredictorConfig, prefix: str = "g"):
        if cfg.layers < 2:
            raise ValueError("predictor needs at least two conv layers")
        self.cfg = cfg
        self.prefix = prefix

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c, h, n = self.cfg.channels, self.cfg.hidden, self.cfg.layers
        out = {}
        for i in range(n):
            cin = c if i == 0 else h
            cout = c if i == n - 1 else h
            w, b = _conv_param(rng, cout, cin, 3, scale=0.1 if i == n - 1 else 1.0)
            out[f"{self.prefix}.conv{i}.weight"] = w
            out[f"{self.prefix}.conv{i}.bias"] = b
        return out

    def forward(self, params, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.channels:
            raise ShapeError("init_predictor", "channels", x.shape[1], self.cfg.channels)
        h = x
        n = self.cfg.layers
        for i in range(n):
            h = conv2d(h, params[f"{self.prefix}.conv{i}.weight"], params[f"{self.prefix}.conv{i}.bias"], 1)
            if i < n - 1:
                h = silu(h)
        return x + h

    __call__ = forward


# ----------------------------------------------------------------------------
# denoiser


def noise_level_embedding(gamma, dim: int) -> np.ndarray:
    """Sinusoidal features of sqrt(gamma) at ``dim/2`` log-spaced frequencies.

    Accepts a scalar or a vector of per-sample gammas; returns ``(B, dim)``.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    g = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    if np.any(g <= 0) or np.any(g > 1):
        raise ValueError("gamma must lie in (0, 1]")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = EMBED_SCALE * np.sqrt(g)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int  # channels of z_t (and of the conditioning input)
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 2)
    n_blocks: int = 2
    dropout: float = 0.1
    emb_dim: int | None = None  # sinusoid width; defaults to base_width
    zero_head: bool = True

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def temb_dim(self) -> int:
        return 4 * self.base_width

    @property
    def sin_dim(self) -> int:
        return self.emb_dim or self.base_width


class Denoiser:
    """Conditional U-Net predicting the noise in ``z_t``.

    Input is ``concat(x_cond, z_t)`` along channels. Residual blocks follow the
    GroupNorm -> SiLU -> conv pattern with the noise-level embedding added after
    the first conv. Down transitions are 2x2 mean pooling followed by a 3x3 conv;
    up transitions are nearest-neighbour doubling followed by a 3x3 conv.
    """

    def __init__(self, cfg: DenoiserConfig, prefix: str = "f"):
        self.cfg = cfg
        self.prefix = prefix
        self._plan = self._build_plan()

    def _build_plan(self):
        cfg = self.cfg
        base = cfg.base_width
        blocks = []  # (name, cin, cout)
        skips = [base]
        cur = base
        for i, m in enumerate(cfg.channel_mults):
            out = base * m
            for j in range(cfg.n_blocks):
                blocks.append((f"down{i}.block{j}", cur, out))
                cur = out
                skips.append(cur)
            if i != cfg.levels - 1:
                skips.append(cur)
        for j in range(2):
            blocks.append((f"mid.block{j}", cur, cur))
        for i in reversed(range(cfg.levels)):
            out = base * cfg.channel_mults[i]
            for j in range(cfg.n_blocks + 1):
                blocks.append((f"up{i}.block{j}", cur + skips.pop(), out))
                cur = out
        return blocks

    # --- parameters ---
    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg, p = self.cfg, self.prefix
        base, temb = cfg.base_width, cfg.temb_dim
        out: dict[str, Tensor] = {}

        def put(name, pair, suffixes=("weight", "bias")):
            for s, t in zip(suffixes, pair):
                out[f"{p}.{name}.{s}"] = t

        put("emb.lin0", _linear_param(rng, temb, cfg.sin_dim))
        put("emb.lin1", _linear_param(rng, temb, temb))
        put("conv_in", _conv_param(rng, base, 2 * cfg.channels, 3))
        for name, cin, cout in self._plan:
            put(f"{name}.norm1", _norm_param(cin), ("gamma", "beta"))
            put(f"{name}.conv1", _conv_param(rng, cout, cin, 3))
            put(f"{name}.emb", _linear_param(rng, cout, temb))
            put(f"{name}.norm2", _norm_param(cout), ("gamma", "beta"))
            put(f"{name}.conv2", _conv_param(rng, cout, cout, 3))
            if cin != cout:
                put(f"{name}.skip", _conv_param(rng, cout, cin, 1))
        for i, m in enumerate(cfg.channel_mults):
            c = base * m
            if i != cfg.levels - 1:
                put(f"down{i}.resample", _conv_param(rng, c, c, 3))
            if i != 0:
                put(f"up{i}.resample", _conv_param(rng, c, c, 3))
        top = base * cfg.channel_mults[0]
        put("norm_out", _norm_param(top), ("gamma", "beta"))
        w, b = _conv_param(rng, cfg.channels, top, 3)
        if cfg.zero_head:
            w.data[...] = 0.0
        put("conv_out", (w, b))
        return out

    # --- forward ---
    def _block(self, params, name, h, temb, training, rng):
        p = f"{self.prefix}.{name}"
        cin, cout = h.shape[1], params[f"{p}.conv1.weight"].shape[0]
        x = h
        h = silu(group_norm(h, params[f"{p}.norm1.gamma"], params[f"{p}.norm1.beta"], num_groups(cin)))
        h = conv2d(h, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"], 1)
        e = linear(temb, params[f"{p}.emb.weight"], params[f"{p}.emb.bias"])
        h = h + e.reshape(e.shape[0], cout, 1, 1)
        h = silu(group_norm(h, params[f"{p}.norm2.gamma"], params[f"{p}.norm2.beta"], num_groups(cout)))
        h = dropout(h, self.cfg.dropout, rng, training)
        h = conv2d(h, params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"], 1)
        if cin != cout:
            x = conv2d(x, params[f"{p}.skip.weight"], params[f"{p}.skip.bias"], 0)
        return x + h

    def embed(self, params, gamma, batch: int) -> Tensor:
        p = self.prefix
        g = np.broadcast_to(np.atleast_1d(np.asarray(gamma, dtype=np.float64)), (batch,))
        e = Tensor(noise_level_embedding(g, self.cfg.sin_dim))
        e = silu(linear(e, params[f"{p}.emb.lin0.weight"], params[f"{p}.emb.lin0.bias"]))
        e = linear(e, params[f"{p}.emb.lin1.weight"], params[f"{p}.emb.lin1.bias"])
        return silu(e)

    def forward(
        self,
        params,
        x_cond: Tensor,
        z_t: Tensor,
        gamma,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        cfg, p = self.cfg, self.prefix
        if x_cond.shape != z_t.shape:
            raise ShapeError("denoiser", "x_cond", x_cond.shape, z_t.shape)
        if z_t.shape[1] != cfg.channels:
            raise ShapeError("denoiser", "channels", z_t.shape[1], cfg.channels)
        f = 2 ** (cfg.levels - 1)
        if z_t.shape[2] % f or z_t.shape[3] % f:
            raise ShapeError("denoiser", "spatial", z_t.shape[2:], f"divisible by {f}")

        temb = self.embed(params, gamma, z_t.shape[0])
        h = conv2d(concat([x_cond, z_t], axis=1), params[f"{p}.conv_in.weight"], params[f"{p}.conv_in.bias"], 1)
        skips = [h]
        for i in range(cfg.levels):
            for j in range(cfg.n_blocks):
                h = self._block(params, f"down{i}.block{j}", h, temb, training, rng)
                skips.append(h)
            if i != cfg.levels - 1:
                h = resample2x(h, "down")
                h = conv2d(h, params[f"{p}.down{i}.resample.weight"], params[f"{p}.down{i}.resample.bias"], 1)
                skips.append(h)
        for j in range(2):
            h = self._block(params, f"mid.block{j}", h, temb, training, rng)
        for i in reversed(range(cfg.levels)):
            for j in range(cfg.n_blocks + 1):
                h = concat([h, skips.pop()], axis=1)
                h = self._block(params, f"up{i}.block{j}", h, temb, training, rng)
            if i != 0:
                h = resample2x(h, "up")
                h = conv2d(h, params[f"{p}.up{i}.resample.weight"], params[f"{p}.up{i}.resample.bias"], 1)
        top = h.shape[1]
        h = silu(group_norm(h, params[f"{p}.norm_out.gamma"], params[f"{p}.norm_out.beta"], num_groups(top)))
        return conv2d(h, params[f"{p}.conv_out.weight"], params[f"{p}.conv_out.bias"], 1)

    __call__ = forward


def log_param_count(params: ModelParams, label: str = "") -> int:
    n = params.count()
    log.info(
        "parameter count%s: total=%d f=%d g=%d",
        f" ({label})" if label else "",
        n,
        params.count("f."),
        params.count("g."),
    )
    return n


class Networks:
    """The predictor/denoiser pair as laid out by a run configuration.

    With ``use_init_predictor`` off, ``g`` is the identity and owns no
    parameters. With ``use_dwt`` off both nets see image-space tensors.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        chans = cfg.channels * (4 if cfg.use_dwt else 1)
        self.channels = chans
        self.denoiser = Denoiser(
            DenoiserConfig(
                channels=chans,
                base_width=cfg.base_width,
                channel_mults=tuple(cfg.channel_mults),
                n_blocks=cfg.n_blocks,
                dropout=cfg.dropout,
            )
        )
        self.predictor = (
            InitialPredictor(PredictorConfig(chans, cfg.predictor_hidden, cfg.predictor_layers))
            if cfg.use_init_predictor
            else None
        )

    def init_params(self, seed) -> ModelParams:
        rng = np.random.default_rng(seed)
        params = ModelParams()
        params.update(self.denoiser.init_params(rng))
        if self.predictor is not None:
            params.update(self.predictor.init_params(rng))
        params.meta.update(
            config_hash=f"{self.cfg.hash():016x}",
            T=str(self.cfg.T_train),
            beta_start=repr(self.cfg.beta_start),
            beta_end=repr(self.cfg.beta_end),
        )
        return params

    def g(self, params, x_sub: Tensor, training: bool = False) -> Tensor:
        if self.predictor is None:
            return x_sub
        return self.predictor(params, x_sub, training)

    def f(self, params, x_sub, z_t, gamma, training=False, rng=None) -> Tensor:
        return self.denoiser(params, x_sub, z_t, gamma, training, rng)
