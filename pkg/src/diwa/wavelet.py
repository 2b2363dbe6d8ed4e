"""Single-level orthonormal 2D Haar transform.

Sub-bands are stored channel-concatenated as ``[A | V | H | D]``, each block
holding the C source channels. For a 2x2 block ``[[a, b], [c, d]]``::

    A = (a + b + c + d) / 2     V = (a - b + c - d) / 2
    H = (a + b - c - d) / 2     D = (a - b - c + d) / 2

V therefore carries differences along columns (left minus right) and H along
rows (top minus bottom). The transform is orthonormal, so its adjoint is its
inverse and backward passes reuse the opposite direction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, record

__all__ = ["WaveletSubbands", "dwt2d", "idwt2d", "dwt2d_array", "idwt2d_array"]


def dwt2d_array(x: np.ndarray) -> np.ndarray:
    B, C, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("dwt2d", "spatial", (h, w), "even height and width")
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    return 0.5 * np.concatenate(
        [a + b + c + d, a - b + c - d, a + b - c - d, a - b - c + d], axis=1
    )


def idwt2d_array(s: np.ndarray) -> np.ndarray:
    B, C4, h2, w2 = s.shape
    if C4 % 4:
        raise ShapeError("idwt2d", "channels", C4, "a multiple of 4")
    C = C4 // 4
    A, V, H, D = s[:, :C], s[:, C : 2 * C], s[:, 2 * C : 3 * C], s[:, 3 * C :]
    out = np.empty((B, C, 2 * h2, 2 * w2))
    out[:, :, 0::2, 0::2] = 0.5 * (A + V + H + D)
    out[:, :, 0::2, 1::2] = 0.5 * (A - V + H - D)
    out[:, :, 1::2, 0::2] = 0.5 * (A + V - H - D)
    out[:, :, 1::2, 1::2] = 0.5 * (A - V - H + D)
    return out


def dwt2d(x: Tensor) -> Tensor:
    """Image (B, C, h, w) -> sub-bands (B, 4C, h/2, w/2); differentiable."""
    if x.ndim != 4:
        raise ShapeError("dwt2d", "ndim", x.ndim, 4)
    return record(dwt2d_array(x.data), (x,), lambda g: (idwt2d_array(g),), "dwt2d")


def idwt2d(s: Tensor) -> Tensor:
    """Sub-bands (B, 4C, h/2, w/2) -> image (B, C, h, w); differentiable."""
    if s.ndim != 4:
        raise ShapeError("idwt2d", "ndim", s.ndim, 4)
    return record(idwt2d_array(s.data), (s,), lambda g: (dwt2d_array(g),), "idwt2d")


@dataclass(frozen=True)
class WaveletSubbands:
    """Named view over a channel-concatenated sub-band tensor."""

    data: Tensor

    @property
    def channels(self) -> int:
        return self.data.shape[1] // 4

    def band(self, name: str) -> Tensor:
        i = "AVHD".index(name)
        c = self.channels
        return self.data[:, i * c : (i + 1) * c]

    @property
    def A(self) -> Tensor:
        return self.band("A")

    @property
    def V(self) -> Tensor:
        return self.band("V")

    @property
    def H(self) -> Tensor:
        return self.band("H")

    @property
    def D(self) -> Tensor:
        return self.band("D")

    @classmethod
    def from_image(cls, image: Tensor) -> "WaveletSubbands":
        return cls(dwt2d(image))

    def to_image(self) -> Tensor:
        return idwt2d(self.data)
