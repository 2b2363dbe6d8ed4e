"""Dense float64 tensors with a small reverse-mode autodiff engine.

Only the op set needed by the two networks is provided. Every op that has an
input with ``requires_grad`` records a node carrying a monotonically
increasing sequence number; ``backward`` replays the reachable nodes in
exactly the reverse of their execution order.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DetachedGraphError",
    "record",
    "no_grad",
    "backward",
    "add",
    "mul",
    "concat",
    "conv2d",
    "linear",
    "silu",
    "group_norm",
    "dropout",
    "resample2x",
    "finite_diff_check",
]

_SEQ = itertools.count()
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; ``dim`` names the culprit."""

    def __init__(self, op: str, dim: str, got, expected):
        self.op = op
        self.dim = dim
        self.got = got
        self.expected = expected
        super().__init__(f"{op}: dimension '{dim}' is {got}, expected {expected}")


class DetachedGraphError(RuntimeError):
    pass


@dataclass
class _Node:
    seq: int
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str = ""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # --- basic properties ---
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # --- arithmetic ---
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def abs(self):
        return tabs(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn, name: str = "") -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent. Nothing is recorded when no parent requires grad.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(next(_SEQ), tuple(parents), backward_fn, name)
    return out


@dataclass
class Tape:
    """Ops reachable from an output, in execution order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.parents)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedGraphError("loss does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t._node.backward(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if p._node is None:
                if key in leaf_grads:
                    leaf_grads[key] = (p, leaf_grads[key][1] + pg)
                else:
                    leaf_grads[key] = (p, pg)
            elif key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for p, g in leaf_grads.values():
        g = np.asarray(g, dtype=np.float64).reshape(p.shape)
        p.grad = g.copy() if p.grad is None else p.grad + g


# ----------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return record(ad * bd, (a, b), bw, "mul")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return record(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),), "mean"
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        if _has_advanced(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return record(a.data[index], (a,), bw, "getitem")


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = expit(x.data)
    out = x.data * sig

    def bw(g):
        return (g * (sig + out * (1.0 - sig)),)

    return record(out, (x,), bw, "silu")


# ----------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias for x of shape (B, F) and weight (G, F)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear", "ndim", (x.ndim, weight.ndim), (2, 2))
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", "in_features", x.shape[1], weight.shape[1])
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear", "out_features", bias.shape, (weight.shape[0],))
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return record(out, parents, bw, "linear")


def _im2col(x: np.ndarray, k: int, p: int) -> np.ndarray:
    """(B, C, H, W) -> (C*k*k, B*Ho*Wo) patch matrix, rows ordered (c, i, j)."""
    B, C, H, W = x.shape
    if k == 1 and p == 0:
        return x.transpose(1, 0, 2, 3).reshape(C, B * H * W)
    if p:
        xp = np.zeros((B, C, H + 2 * p, W + 2 * p))
        xp[:, :, p : p + H, p : p + W] = x
    else:
        xp = x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    Ho, Wo = win.shape[2], win.shape[3]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, B * Ho * Wo)


def _correlate(x: np.ndarray, w: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Plain stride-1 correlation; returns (output NCHW, patch matrix)."""
    B = x.shape[0]
    Cout, _, k, _ = w.shape
    cols = _im2col(x, k, p)
    out = w.reshape(Cout, -1) @ cols
    Ho, Wo = x.shape[2] + 2 * p - k + 1, x.shape[3] + 2 * p - k + 1
    return out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2D cross-correlation with symmetric zero padding."""
    if x.ndim != 4:
        raise ShapeError("conv2d", "input.ndim", x.ndim, 4)
    if weight.ndim != 4:
        raise ShapeError("conv2d", "weight.ndim", weight.ndim, 4)
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = weight.shape
    if Cw != Cin:
        raise ShapeError("conv2d", "in_channels", Cin, Cw)
    if kh != kw:
        raise ShapeError("conv2d", "kernel_width", kw, kh)
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError("conv2d", "out_channels", bias.shape, (Cout,))
    k, p = kh, padding
    if p < 0 or p > k - 1:
        raise ShapeError("conv2d", "padding", p, f"0..{k - 1}")
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", "spatial", (H, W), f">= {k - 2 * p}")

    wd = weight.data
    out, cols = _correlate(x.data, wd, p)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = gx = None
        if weight.requires_grad:
            gm = g.transpose(1, 0, 2, 3).reshape(Cout, B * Ho * Wo)
            gw = (gm @ cols.T).reshape(wd.shape)
        if x.requires_grad:
            # adjoint of a stride-1 correlation: correlate with the flipped,
            # channel-swapped kernel under complementary padding
            wf = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _correlate(g, wf, k - 1 - p)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record(out, parents, bw, "conv2d")


def group_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5
) -> Tensor:
    """Normalise each (sample, channel-group) to zero mean / unit variance."""
    B, C, H, W = x.shape
    if C % groups:
        raise ShapeError("group_norm", "channels", C, f"multiple of {groups}")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("group_norm", "affine", gamma.shape, (C,))
    xg = x.data.reshape(B, groups, -1)
    n = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(B, C, H, W)
    gd = gamma.data.reshape(1, C, 1, 1)
    out = xhat * gd + beta.data.reshape(1, C, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = (g * gd).reshape(B, groups, n)
            xh = xhat.reshape(B, groups, n)
            s1 = dxhat.sum(axis=2, keepdims=True)
            s2 = (dxhat * xh).sum(axis=2, keepdims=True)
            gx = (rstd / n * (n * dxhat - s1 - xh * s2)).reshape(B, C, H, W)
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), bw, "group_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity unless ``training`` and ``p > 0``."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def resample2x(x: Tensor, direction: str) -> Tensor:
    """2x2 mean pooling (``down``) or nearest-neighbour duplication (``up``)."""
    B, C, H, W = x.shape
    if direction == "down":
        if H % 2 or W % 2:
            raise ShapeError("resample2x", "spatial", (H, W), "even")
        out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

        def bw(g):
            return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    elif direction == "up":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def bw(g):
            return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    else:
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    return record(out, (x,), bw, f"resample_{direction}")


# ----------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    atol: float = 1e-6,
) -> float:
    """Largest relative error between backward() and central differences.

    Each coordinate's error is ``|analytic - numeric| / max(|analytic|,
    |numeric|, atol)``; ``atol`` keeps coordinates whose true gradient is
    (near) zero from dividing roundoff by zero. ``max_coords`` checks a random
    subset of coordinates instead of all of them.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    loss = fn(x)
    backward(loss)
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

    worst = 0.0
    with no_grad():
        for i in idx:
            plus, minus = flat.copy(), flat.copy()
            plus[i] += eps
            minus[i] -= eps
            fp = fn(Tensor(plus.reshape(base.shape))).item()
            fm = fn(Tensor(minus.reshape(base.shape))).item()
            num = (fp - fm) / (2 * eps)
            ana = analytic.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), atol)
            if not np.isfinite(err):
                return float("inf")
            worst = max(worst, err)
    return float(worst)
