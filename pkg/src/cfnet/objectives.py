"""Losses and image-quality metrics.

Every loss returns ``(value, grad)`` where ``grad`` is the derivative with
respect to the prediction operand.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import ShapeError

PSNR_CAP = 99.0


class RecNorm(enum.Enum):
    L1 = "l1"
    L2 = "l2"


@dataclass
class LossConfig:
    alpha: float = 0.35
    lam: float = 0.5
    rec_norm: RecNorm = RecNorm.L2
    lambda_halving_period: int = 1_000_000

    def __post_init__(self):
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if isinstance(self.rec_norm, str):
            self.rec_norm = RecNorm(self.rec_norm.lower())


def _same(a, b, op):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{op}: shapes differ, {np.shape(a)} vs {np.shape(b)}")


def asymm_weights(err: np.ndarray, alpha: float) -> np.ndarray:
    """``|alpha - I(err < 0)|``: 1 - alpha for under-estimates, alpha otherwise."""
    return np.where(err < 0, 1.0 - alpha, alpha)


def asymm_loss(sigma_pred: np.ndarray, sigma_gt: np.ndarray, alpha: float) -> tuple[float, np.ndarray]:
    """Per-pixel mean of ``|alpha - I(e<0)| * e**2`` with ``e = pred - gt``."""
    _same(sigma_pred, sigma_gt, "asymm_loss")
    if not 0.0 < alpha <= 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5], got {alpha}")
    e = sigma_pred - sigma_gt
    w = asymm_weights(e, alpha)
    n = e.size
    return float(np.sum(w * e * e) / n), (2.0 / n) * w * e


def rec_loss(denoised: np.ndarray, clean: np.ndarray, norm: RecNorm | str = RecNorm.L2) -> tuple[float, np.ndarray]:
    _same(denoised, clean, "rec_loss")
    norm = RecNorm(norm) if isinstance(norm, str) else norm
    d = denoised - clean
    n = d.size
    if norm is RecNorm.L1:
        return float(np.abs(d).sum() / n), np.sign(d) / n
    return float((d * d).sum() / n), (2.0 / n) * d


def total_loss(rec: float, asymm: float | None, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if asymm is None:
        return rec
    return rec + lam * asymm


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _same(a, b, "mse")
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs report :data:`PSNR_CAP`."""
    m = mse(a, b)
    if m == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(peak * peak / m)))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.size
    h, w = img.shape
    rows = np.zeros((h - k + 1, w))
    for i in range(k):
        rows += win[i] * img[i : i + h - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for j in range(k):
        out += win[j] * rows[:, j : j + w - k + 1]
    return out


def _as_gray2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("ssim takes one image at a time")
        x = x[0]
    if x.ndim == 3:
        x = x.mean(axis=0)
    return x


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM with an 11x11 Gaussian window over the valid region.

    Colour inputs are averaged over channels first.
    """
    a, b = _as_gray2d(a), _as_gray2d(b)
    _same(a, b, "ssim")
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} SSIM window")
    win = _gauss_window(win_size, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a * mu_a
    sbb = _filter_valid(b * b, win) - mu_b * mu_b
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, image_id: str, p: float, s: float) -> None:
        self.ids.append(image_id)
        self.psnr.append(p)
        self.ssim.append(s)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_text(self) -> str:
        rows = [f"{i}\t{p:.4f}\t{s:.6f}" for i, p, s in zip(self.ids, self.psnr, self.ssim)]
        rows.append(f"MEAN\t{self.mean_psnr:.4f}\t{self.mean_ssim:.6f}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> MetricReport:
        rep = cls()
        for line in text.strip().splitlines():
            name, p, s = line.split("\t")
            if name != "MEAN":
                rep.add(name, float(p), float(s))
        return rep
