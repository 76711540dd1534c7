"""Inference-side tools: padded/tiled denoising, evaluation and introspection export."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..network import CFNet
from ..noise_synth import IspConfig, NoiseMode, NoiseParams, synth_awgn, synth_hetero
from ..objectives import MetricReport, psnr, ssim
from .data import DatasetError, image_seed, list_images, load_images
from .pnm import read_pnm, write_pnm

log = logging.getLogger(__name__)


@dataclass
class NoiseSpec:
    """What noise ``evaluate`` adds: AWGN at ``sigma`` (0-255) or heteroscedastic."""

    kind: str = "awgn"
    sigma: float = 25.0
    sigma_d: float = 0.08
    sigma_s: float = 0.02
    gamma: float = 2.2
    quantize: int = 0
    seed: int = 0

    def apply(self, clean: np.ndarray, image_id: str) -> tuple[np.ndarray, np.ndarray]:
        seed = image_seed(image_id, self.seed)
        if self.kind == "awgn":
            return synth_awgn(clean, self.sigma, seed)
        if self.kind == "hetero":
            p = NoiseParams(self.sigma_d, self.sigma_s, mode=NoiseMode.HETERO)
            return synth_hetero(clean, p, IspConfig(self.gamma, self.quantize), seed)
        raise ValueError(f"unknown noise kind {self.kind!r}")


def _pad4(img: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    if ph or pw:
        img = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)], mode="reflect")
    return img, (h, w)


def run_padded(net: CFNet, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Denoise one (C, H, W) image: reflect-pad to a multiple of 4, run, crop back."""
    x, (h, w) = _pad4(img)
    den, sig, _ = net.forward(x[None].astype(net.store.dtype))
    return den[0, :, :h, :w].astype(np.float64), sig[0, :, :h, :w].astype(np.float64)


def _tile_starts(n: int, tile: int, step: int) -> list[int]:
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return starts


def _keep(start: int, size: int, n: int, margin: int) -> slice:
    # drop the margin on sides that face another tile, not the image border
    lo = 0 if start == 0 else margin
    hi = size if start + size >= n else size - margin
    return slice(lo, hi)


def denoise_array(net: CFNet, img: np.ndarray, tile: int | None = None, overlap: int = 16):
    """Whole-image or overlapping-tile denoising.

    Each tile keeps only its interior, ``overlap // 2`` pixels in from any
    edge shared with a neighbour, since outputs near a tile edge see zero
    padding instead of image.  Whatever still overlaps is averaged.
    """
    if not tile:
        return run_padded(net, img)
    if not 0 <= overlap < tile:
        raise ValueError(f"need 0 <= overlap < tile, got overlap={overlap} tile={tile}")
    c, h, w = img.shape
    acc = np.zeros((c, h, w))
    sacc = np.zeros((c, h, w))
    cnt = np.zeros((1, h, w))
    step = tile - overlap
    m = overlap // 2
    for y in _tile_starts(h, tile, step):
        for x in _tile_starts(w, tile, step):
            d, s = run_padded(net, img[:, y : y + tile, x : x + tile])
            ky, kx = _keep(y, d.shape[1], h, m), _keep(x, d.shape[2], w, m)
            oy, ox = slice(y + ky.start, y + ky.stop), slice(x + kx.start, x + kx.stop)
            acc[:, oy, ox] += d[:, ky, kx]
            sacc[:, oy, ox] += s[:, ky, kx]
            cnt[:, oy, ox] += 1
    return acc / cnt, sacc / cnt


def denoise(checkpoint, image_path, out_path, sigma_path=None, tile=None, overlap=16, bits=16):
    """Denoise an image file and write the result (and optionally the sigma map)."""
    from .checkpoint import load_checkpoint

    ck = load_checkpoint(checkpoint)
    net = ck.build()
    img = read_pnm(image_path)
    if img.shape[0] != net.cfg.input_channels:
        raise DatasetError(f"image has {img.shape[0]} channels, model expects {net.cfg.input_channels}")
    den, sig = denoise_array(net, img, tile, overlap)
    write_pnm(out_path, den, bits)
    if sigma_path:
        scale = max(float(sig.max()), 1e-12)
        write_pnm(sigma_path, sig / scale, bits)
    return den, sig


def evaluate_images(net: CFNet | None, images, spec: NoiseSpec, tile=None) -> MetricReport:
    """Scores what ``denoise`` would write: model outputs are clipped to [0, 1].

    With ``net=None`` the raw (unclipped) noisy input is scored, which is the
    standard AWGN baseline.
    """
    rep = MetricReport()
    for im in images:
        noisy, _ = spec.apply(im.data[None], im.id)
        out = noisy[0] if net is None else np.clip(denoise_array(net, noisy[0], tile)[0], 0.0, 1.0)
        rep.add(im.id, psnr(out, im.data), ssim(out, im.data))
    return rep


def evaluate(checkpoint, dataset_path, spec: NoiseSpec | None = None, tile=None) -> MetricReport:
    """PSNR/SSIM of the model over a clean dataset with deterministic per-image noise."""
    from .checkpoint import load_checkpoint

    spec = spec or NoiseSpec()
    paths = list_images(dataset_path)
    images = load_images(dataset_path)
    missing = sorted({p.stem for p in paths} - {im.id for im in images})
    if missing or not images:
        for m in missing:
            log.error("missing or unreadable image: %s", m)
        raise DatasetError(f"{len(missing)} images missing/unreadable in {dataset_path}" if missing else "empty dataset")
    net = load_checkpoint(checkpoint).build() if checkpoint is not None else None
    return evaluate_images(net, images, spec, tile)


# ---------------------------------------------------------------------------
# introspection
# ---------------------------------------------------------------------------


def _norm01(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < 1e-12:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def kernel_grids(tau: np.ndarray, k: int, y: int, x: int) -> np.ndarray:
    """(g, k, k) kernels at position (y, x) of a (1, g, k*k, H, W) field."""
    _, g, kk, h, w = tau.shape
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"position ({y}, {x}) outside the {h}x{w} feature map")
    return tau[0, :, :, y, x].reshape(g, k, k)


def high_pass_fraction(grids: np.ndarray) -> float:
    """Share of kernels whose centre weight exceeds the mean of its neighbours."""
    g, k, _ = grids.shape
    c = grids[:, k // 2, k // 2]
    nb = (grids.sum(axis=(1, 2)) - c) / (k * k - 1)
    return float(np.mean(c > nb))


def export_introspection(
    checkpoint,
    image_path,
    what: str,
    out_dir,
    stage: int = 1,
    block: int = 0,
    positions: list[tuple[int, int]] | None = None,
    upscale: int = 8,
) -> list[Path]:
    """Write conditional-kernel grids or per-stage noise-feature maps.

    ``kernels``: ``tau`` of CFB ``block`` in CDM ``stage`` at each position, as
    text (one k x k grid per channel group) plus an upsampled graymap.
    ``noisemaps``: channel-mean of each stage's noise features, one graymap per stage.
    """
    from .checkpoint import load_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = load_checkpoint(checkpoint).build()
    img = read_pnm(image_path)
    x, (h, w) = _pad4(img)
    _, _, ctx = net.forward(x[None], record=True)
    written: list[Path] = []
    if what == "noisemaps":
        for i, nf in enumerate(net.noise_features(ctx), 1):
            m = _norm01(nf[0].mean(axis=0))
            f = 2 ** ([0, 1, 2, 2, 1, 0][i - 1])
            m = m.repeat(f, 0).repeat(f, 1)[:h, :w]
            q = out / f"noisemap_stage{i}.pgm"
            write_pnm(q, m[None])
            written.append(q)
        return written
    if what != "kernels":
        raise ValueError(f"unknown export target {what!r}")
    taus = net.kernel_fields(ctx, stage)
    if not taus:
        raise ValueError(f"CDM {stage} has no conditional filter blocks")
    if not 0 <= block < len(taus):
        raise ValueError(f"block {block} out of range (CDM {stage} has {len(taus)})")
    tau = taus[block]
    k = net.cfg.k
    fh, fw = tau.shape[3:]
    positions = positions or [(fh // 2, fw // 2)]
    for y, xx in positions:
        grids = kernel_grids(tau, k, y, xx)
        lines = [f"# stage {stage} block {block} position ({y}, {xx}) groups {grids.shape[0]} k {k}"]
        for gi, grid in enumerate(grids):
            lines.append(f"group {gi}")
            lines += [" ".join(f"{v: .6e}" for v in row) for row in grid]
        lines.append(f"high_pass_fraction {high_pass_fraction(grids):.4f}")
        tq = out / f"kernels_s{stage}_b{block}_y{y}_x{xx}.txt"
        tq.write_text("\n".join(lines) + "\n")
        g = grids.shape[0]
        cols = int(np.ceil(np.sqrt(g)))
        rows = int(np.ceil(g / cols))
        canvas = np.zeros((rows * (k + 1) - 1, cols * (k + 1) - 1))
        for gi, grid in enumerate(_norm01(grids)):
            r, c = divmod(gi, cols)
            canvas[r * (k + 1) : r * (k + 1) + k, c * (k + 1) : c * (k + 1) + k] = grid
        pq = tq.with_suffix(".pgm")
        write_pnm(pq, canvas.repeat(upscale, 0).repeat(upscale, 1)[None])
        log.info("kernels at (%d, %d): high-pass fraction %.3f", y, xx, high_pass_fraction(grids))
        written += [tq, pq]
    return written
