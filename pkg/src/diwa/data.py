"""LR/HR pair construction, a procedural desk-scale corpus and flip augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ImageSample",
    "cubic_kernel",
    "resize_matrix",
    "bicubic_resize",
    "make_lr_hr_pair",
    "synth_image",
    "synth_dataset",
    "augment_hflip",
    "quantize",
]

CUBIC_A = -0.5


@dataclass(frozen=True)
class ImageSample:
    hr: np.ndarray  # (C, h, w)
    lr_up: np.ndarray  # (C, h, w)
    scale: int
    lr: np.ndarray | None = None  # (C, h/scale, w/scale)


def cubic_kernel(x, a: float = CUBIC_A) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """(n_out, n_in) matrix of one separable resampling pass.

    Pixel centres are aligned (half-pixel convention). When shrinking with
    ``antialias`` the kernel is stretched by the scale factor. Taps falling
    outside the image are clamped onto the border pixel and each row is
    normalised to sum to one.
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0) if antialias else 1.0
    support = 2.0 * stretch
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        c = (o + 0.5) * scale - 0.5
        taps = np.arange(math.ceil(c - support), math.floor(c + support) + 1)
        w = cubic_kernel((taps - c) / stretch)
        w /= w.sum()
        np.add.at(m[o], np.clip(taps, 0, n_in - 1), w)
    return m


def bicubic_resize(image: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Resize the last two axes of ``image`` to (out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    mh = resize_matrix(h, out_h, antialias)
    mw = resize_matrix(w, out_w, antialias)
    return np.einsum("oh,...hw,pw->...op", mh, img, mw)


def make_lr_hr_pair(hr: np.ndarray, scale: int) -> ImageSample:
    hr = np.asarray(hr, dtype=np.float64)
    c, h, w = hr.shape
    if h % (2 * scale) or w % (2 * scale):
        raise ValueError(f"HR size {h}x{w} not divisible by 2*scale={2 * scale}")
    lr = np.clip(bicubic_resize(hr, h // scale, w // scale, antialias=True), 0.0, 1.0)
    lr_up = np.clip(bicubic_resize(lr, h, w, antialias=True), 0.0, 1.0)
    return ImageSample(hr=np.clip(hr, 0.0, 1.0), lr_up=lr_up, scale=scale, lr=lr)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so that a PPM round trip is lossless."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5) / 255.0


# ----------------------------------------------------------------------------
# procedural corpus

_SUPERSAMPLE = 4


def _coverage(h, w, inside) -> np.ndarray:
    s = _SUPERSAMPLE
    yy, xx = np.meshgrid(
        (np.arange(h * s) + 0.5) / s, (np.arange(w * s) + 0.5) / s, indexing="ij"
    )
    mask = inside(yy, xx).astype(np.float64)
    return mask.reshape(h, s, w, s).mean(axis=(1, 3))


def synth_image(rng: np.random.Generator, h: int, w: int, channels: int = 3) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")

    # smooth background: a random linear ramp between two colours
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h + 1.0) / 2.0
    c0, c1 = rng.uniform(0.1, 0.9, channels), rng.uniform(0.1, 0.9, channels)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    # oriented sinusoidal texture confined to a soft band
    if rng.random() < 0.7:
        period = rng.uniform(5.0, 14.0)
        phi = rng.uniform(0, np.pi)
        wave = np.sin(2 * np.pi * (np.cos(phi) * xx + np.sin(phi) * yy) / period + rng.uniform(0, 2 * np.pi))
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        env = np.exp(-(((yy - cy) / (0.35 * h)) ** 2 + ((xx - cx) / (0.35 * w)) ** 2))
        amp = rng.uniform(0.08, 0.2) * rng.choice([-1.0, 1.0], channels)
        img = img + amp[:, None, None] * (wave * env)[None]

    # flat anti-aliased shapes
    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0.0, 1.0, channels)
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        ry, rx = rng.uniform(0.12, 0.35) * h, rng.uniform(0.12, 0.35) * w
        if rng.random() < 0.5:
            inside = lambda y, x, cy=cy, cx=cx, ry=ry, rx=rx: ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
        else:
            inside = lambda y, x, cy=cy, cx=cx, ry=ry, rx=rx: (np.abs(y - cy) <= ry) & (np.abs(x - cx) <= rx)
        cov = _coverage(h, w, inside)[None]
        img = img * (1 - cov) + color[:, None, None] * cov

    return quantize(img)


def synth_dataset(n: int, h: int, w: int, seed: int, channels: int = 3) -> list[np.ndarray]:
    """``n`` HR images; image ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [synth_image(np.random.default_rng([seed, i]), h, w, channels) for i in range(n)]


def augment_hflip(sample: ImageSample, rng: np.random.Generator | None, force: bool | None = None) -> ImageSample:
    """Mirror HR and upsampled LR together with probability 0.5."""
    flip = force if force is not None else bool(rng.random() < 0.5)
    if not flip:
        return sample
    return ImageSample(
        hr=sample.hr[..., ::-1].copy(),
        lr_up=sample.lr_up[..., ::-1].copy(),
        scale=sample.scale,
        lr=None if sample.lr is None else sample.lr[..., ::-1].copy(),
    )
