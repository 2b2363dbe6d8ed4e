"""PSNR and single-scale SSIM on [0, 1] images."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["psnr", "ssim", "gaussian_window", "EvalReport", "PSNR_CAP"]

PSNR_CAP = 99.0
K1, K2 = 0.01, 0.03
WIN, SIGMA = 11, 1.5


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size: int = WIN, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=-2) @ g  # (..., h-k+1, w)
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim(a, b, max_val: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.

    Accepts (h, w) or (C, h, w) arrays.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < WIN:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {WIN}x{WIN} window")
    g = gaussian_window()
    c1, c2 = (K1 * max_val) ** 2, (K2 * max_val) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    per_channel = (num / den).mean(axis=(-2, -1))
    return float(per_channel.mean())


@dataclass
class EvalReport:
    config: str = ""
    image_ids: list[str] = field(default_factory=list)
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, image_id: str, sr, hr, max_val: float = 1.0) -> None:
        self.image_ids.append(str(image_id))
        self.psnr_db.append(min(psnr(sr, hr, max_val), PSNR_CAP))
        self.ssim.append(ssim(sr, hr, max_val))

    @property
    def count(self) -> int:
        return len(self.image_ids)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db)) if self.psnr_db else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "psnr_db", "ssim"])
            for i, p, s in zip(self.image_ids, self.psnr_db, self.ssim):
                w.writerow([i, repr(p), repr(s)])

    @classmethod
    def read_csv(cls, path, config: str = "") -> "EvalReport":
        rep = cls(config=config)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.image_ids.append(row["image_id"])
                rep.psnr_db.append(float(row["psnr_db"]))
                rep.ssim.append(float(row["ssim"]))
        return rep
