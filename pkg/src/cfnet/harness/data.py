"""Datasets, patch sampling with dihedral augmentation, and fixture images."""
from __future__ import annotations

import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..noise_synth import (
    IspConfig,
    sample_hetero_params,
    sample_sigma_range,
    synth_awgn,
    synth_hetero,
)
from .pnm import is_pnm, read_pnm, write_pnm

log = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    pass


@dataclass
class Image:
    id: str
    data: np.ndarray  # (C, H, W) in [0, 1]
    noisy: np.ndarray | None = None  # paired real-noise counterpart, if any


@dataclass
class PatchBatch:
    clean: np.ndarray
    noisy: np.ndarray
    sigma_gt: np.ndarray | None
    provenance: list[tuple[str, tuple[int, int], int]] = field(default_factory=list)

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise DatasetError(f"clean {self.clean.shape} vs noisy {self.noisy.shape}")
        if self.sigma_gt is not None and self.sigma_gt.shape != self.clean.shape:
            raise DatasetError(f"sigma_gt {self.sigma_gt.shape} vs clean {self.clean.shape}")


def image_seed(image_id: str, seed: int = 0) -> int:
    """Stable per-image noise seed (independent of Python's hash salt)."""
    return (zlib.crc32(image_id.encode("utf-8")) << 16) ^ (seed & 0xFFFF)


def list_images(path: str | os.PathLike) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise DatasetError(f"no such dataset: {p}")
    return sorted(q for q in p.iterdir() if is_pnm(q))


def load_images(path: str | os.PathLike, channels: int | None = None) -> list[Image]:
    out = []
    for q in list_images(path):
        try:
            img = read_pnm(q)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", q, exc)
            continue
        if channels is not None and img.shape[0] != channels:
            img = img.mean(axis=0, keepdims=True) if channels == 1 else np.repeat(img, 3, axis=0)
        out.append(Image(q.stem, img))
    return out


def load_pairs(path: str | os.PathLike, channels: int | None = None) -> list[Image]:
    """Real-noise pairs stored as ``<id>_clean.pgm`` / ``<id>_noisy.pgm``."""
    imgs = {im.id: im for im in load_images(path, channels)}
    pairs = []
    for name, im in sorted(imgs.items()):
        if name.endswith("_clean") and name[:-6] + "_noisy" in imgs:
            noisy = imgs[name[:-6] + "_noisy"].data
            if noisy.shape == im.data.shape:
                pairs.append(Image(name[:-6], im.data, noisy))
    return pairs


# ---------------------------------------------------------------------------
# dihedral augmentation
# ---------------------------------------------------------------------------


def dihedral(x: np.ndarray, code: int) -> np.ndarray:
    """Code ``r + 4*f``: ``r`` counter-clockwise quarter turns, then a left-right flip if ``f``."""
    if not 0 <= code < 8:
        raise ValueError(f"augmentation code must be in [0, 8), got {code}")
    y = np.rot90(x, k=code % 4, axes=(-2, -1))
    if code >= 4:
        y = y[..., ::-1]
    return np.ascontiguousarray(y)


def dihedral_inverse(x: np.ndarray, code: int) -> np.ndarray:
    if code >= 4:
        x = x[..., ::-1]
    return np.ascontiguousarray(np.rot90(x, k=-(code % 4), axes=(-2, -1)))


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


def usable(dataset: list[Image], patch: int) -> list[Image]:
    ok = []
    for im in dataset:
        if im.data.shape[1] < patch or im.data.shape[2] < patch:
            log.warning("skipping %s: %s smaller than patch %d", im.id, im.data.shape[1:], patch)
            continue
        ok.append(im)
    if not ok:
        raise DatasetError(f"no image is at least {patch}x{patch}")
    return ok


def _noise_for(clean: np.ndarray, cfg, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise one (1, C, h, w) patch according to the training mode."""
    mode = cfg.mode
    if mode == "nonblind":
        return synth_awgn(clean, cfg.sigma, seed)
    if mode == "blind":
        return synth_awgn(clean, sample_sigma_range(cfg.sigma_lo, cfg.sigma_hi, seed), seed + 1)
    if mode == "hetero":
        params = sample_hetero_params(seed, cfg.sigma_d_range, cfg.sigma_s_range)
        isp = IspConfig(cfg.gamma, cfg.quantize)
        return synth_hetero(clean, params, isp, seed + 1)
    raise DatasetError(f"unknown noise mode {mode!r}")


def _batch_seed(seed: int, it: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, it, j, 0x4E]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def sample_batch(dataset: list[Image], cfg, it: int, real: list[Image] | None = None) -> PatchBatch:
    """Random crops + dihedral augmentation, then noise; a pure function of ``(cfg.seed, it)``.

    When ``real`` pairs are given, a ``cfg.real_ratio`` fraction of
    iterations draw from them instead and carry no sigma ground truth.
    """
    p = cfg.patch_size
    rng = np.random.default_rng([cfg.seed, it])
    use_real = bool(real) and rng.random() < cfg.real_ratio
    pool = usable(real if use_real else dataset, p)
    clean, noisy, sig, prov = [], [], [], []
    for j in range(cfg.batch_size):
        im = pool[rng.integers(len(pool))]
        _, h, w = im.data.shape
        y0, x0 = int(rng.integers(h - p + 1)), int(rng.integers(w - p + 1))
        code = int(rng.integers(8))
        c = dihedral(im.data[:, y0 : y0 + p, x0 : x0 + p], code)[None]
        prov.append((im.id, (y0, x0), code))
        if use_real:
            n = dihedral(im.noisy[:, y0 : y0 + p, x0 : x0 + p], code)[None]
        else:
            n, s = _noise_for(c, cfg, _batch_seed(cfg.seed, it, j))
            sig.append(s)
        clean.append(c)
        noisy.append(n)
    return PatchBatch(
        np.concatenate(clean),
        np.concatenate(noisy),
        None if use_real else np.concatenate(sig),
        prov,
    )


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def fixture_image(seed: int, size: int = 64, channels: int = 1) -> np.ndarray:
    """Piecewise-smooth synthetic scene: gradient background, shapes, a texture patch."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    out = []
    for _ in range(channels):
        ang = rng.uniform(0, 2 * np.pi)
        a, b = rng.uniform(0.15, 0.85, 2)
        img = a + (b - a) * (np.cos(ang) * xx + np.sin(ang) * yy + 1) / 2
        for _ in range(rng.integers(3, 7)):
            cy, cx = rng.uniform(0, 1, 2)
            ry, rx = rng.uniform(0.08, 0.35, 2)
            val = rng.uniform(0.05, 0.95)
            if rng.random() < 0.5:
                m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
            else:
                m = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            img = np.where(m, val, img)
        if rng.random() < 0.6:
            f = rng.uniform(4, 12)
            th = rng.uniform(0, np.pi)
            tex = 0.08 * np.sin(2 * np.pi * f * (np.cos(th) * xx + np.sin(th) * yy))
            cy, cx = rng.uniform(0.2, 0.8, 2)
            m = (np.abs(yy - cy) < 0.2) & (np.abs(xx - cx) < 0.2)
            img = img + np.where(m, tex, 0.0)
        out.append(np.clip(img, 0.0, 1.0))
    return np.stack(out)


def write_fixture_set(directory: str | os.PathLike, count: int, seed: int = 0, size: int = 64, channels: int = 1) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if channels == 1 else "ppm"
    paths = []
    for i in range(count):
        q = d / f"fx{seed:03d}_{i:03d}.{ext}"
        write_pnm(q, fixture_image(seed * 1000 + i, size, channels))
        paths.append(q)
    return paths
