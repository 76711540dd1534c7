"""Training loop: deterministic, checkpointed and resumable.

The log is a tab-separated text file with two line kinds::

    it   <iter> <lr> <lambda> <rec> <asymm> <total>
    val  <iter> <psnr> <noisy_psnr>

Every number is a pure function of (seed, config, dataset), so two runs
with the same inputs write byte-identical logs and checkpoints.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..network import ArchConfig, CFNet
from ..objectives import asymm_loss, psnr, rec_loss, total_loss
from .checkpoint import check_arch, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import DatasetError, Image, load_images, load_pairs, sample_batch, usable
from .inference import NoiseSpec, run_padded
from .optim import AdamState, NumericalError, adam_step, lr_schedule

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    net: CFNet
    iterations: int
    log_path: Path
    val: list[tuple[int, float, float]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    @property
    def final_psnr(self) -> float:
        return self.val[-1][1] if self.val else float("nan")

    @property
    def noisy_psnr(self) -> float:
        return self.val[-1][2] if self.val else float("nan")


def val_spec(cfg: TrainConfig) -> NoiseSpec:
    if cfg.mode == "hetero":
        lo_d, hi_d = cfg.sigma_d_range
        lo_s, hi_s = cfg.sigma_s_range
        return NoiseSpec("hetero", sigma_d=(lo_d + hi_d) / 2, sigma_s=(lo_s + hi_s) / 2,
                         gamma=cfg.gamma, quantize=cfg.quantize, seed=cfg.val_seed)
    sigma = cfg.sigma if cfg.mode == "nonblind" else (cfg.sigma_lo + cfg.sigma_hi) / 2
    return NoiseSpec("awgn", sigma=sigma, seed=cfg.val_seed)


class Validator:
    """Fixed image subset with fixed noise; the noisy baseline is computed once."""

    def __init__(self, images: list[Image], cfg: TrainConfig):
        spec = val_spec(cfg)
        self.items = []
        for im in images[: cfg.val_count]:
            noisy, _ = spec.apply(im.data[None], im.id)
            self.items.append((im.data, noisy[0]))
        if not self.items:
            raise DatasetError("validation set is empty")
        self.noisy_psnr = float(np.mean([psnr(n, c) for c, n in self.items]))

    def __call__(self, net: CFNet) -> float:
        return float(np.mean([psnr(run_padded(net, n)[0], c) for c, n in self.items]))


def _fmt(x: float | None) -> str:
    return "-" if x is None else f"{x:.9e}"


def train_step(net: CFNet, adam: AdamState, batch, cfg: TrainConfig, it: int):
    """One optimisation step; returns ``(lr, lam, rec, asymm, total)``."""
    dt = net.store.dtype
    lr, lam = lr_schedule(it, cfg)
    den, sig, ctx = net.forward(batch.noisy.astype(dt))
    rec, g_den = rec_loss(den, batch.clean.astype(dt), cfg.rec_norm)
    asym, g_sig = None, None
    if batch.sigma_gt is not None:  # real-noise batches carry no sigma ground truth
        asym, g_a = asymm_loss(sig, batch.sigma_gt.astype(dt), cfg.alpha)
        g_sig = (lam * g_a).astype(dt)
    tot = total_loss(rec, asym, lam)
    if not math.isfinite(tot):
        raise NumericalError(f"non-finite loss at iteration {it}: rec={rec} asymm={asym}")
    net.backward(ctx, g_den.astype(dt), g_sig)
    adam_step(net.store, adam, lr)
    return lr, lam, rec, asym, tot


def train(
    cfg: TrainConfig,
    arch: ArchConfig,
    dataset_path: str | os.PathLike,
    out_dir: str | os.PathLike,
    resume: str | os.PathLike | None = None,
    val_path: str | os.PathLike | None = None,
    real_path: str | os.PathLike | None = None,
    stop_after: int | None = None,
    log_name: str = "train.log",
) -> TrainResult:
    """Run ``cfg.max_iters`` steps (or stop early after ``stop_after``), writing
    ``ckpt_<iter>.cfn`` every ``cfg.ckpt_every`` steps and ``last.cfn`` at exit.

    On a non-finite loss or gradient the run aborts with ``NumericalError``;
    checkpoints already on disk are left untouched.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(cfg.dtype)
    images = load_images(dataset_path, arch.input_channels)
    if not images:
        raise DatasetError(f"no readable images in {dataset_path}")
    usable(images, cfg.patch_size)
    real = load_pairs(real_path, arch.input_channels) if real_path else None
    val_images = load_images(val_path, arch.input_channels) if val_path else images
    validator = Validator(val_images, cfg)

    net = CFNet(arch, dtype=dtype)
    adam = AdamState()
    start = 0
    log_path = out / log_name
    if resume is not None:
        ck = load_checkpoint(resume)
        check_arch(ck, arch)
        net = ck.build(dtype)
        adam = ck.adam_state(net)
        start = ck.iteration
        mode = "a"
    else:
        mode = "w"

    result = TrainResult(net, start, log_path)
    end = cfg.max_iters if stop_after is None else min(cfg.max_iters, stop_after)
    with open(log_path, mode) as fh:

        def emit(line: str) -> None:
            fh.write(line + "\n")
            fh.flush()
            log.info(line)

        for it in range(start, end):
            batch = sample_batch(images, cfg, it, real)
            try:
                lr, lam, rec, asym, tot = train_step(net, adam, batch, cfg, it)
            except NumericalError as exc:
                emit(f"abort\t{it}\t{exc}")
                raise
            emit(f"it\t{it + 1}\t{lr:.9e}\t{lam:.9e}\t{_fmt(rec)}\t{_fmt(asym)}\t{_fmt(tot)}")
            result.losses.append(tot)
            done = it + 1
            if cfg.val_every and (done % cfg.val_every == 0 or done == cfg.max_iters):
                v = validator(net)
                result.val.append((done, v, validator.noisy_psnr))
                emit(f"val\t{done}\t{v:.6f}\t{validator.noisy_psnr:.6f}")
            if cfg.ckpt_every and done % cfg.ckpt_every == 0:
                save_checkpoint(out / f"ckpt_{done:06d}.cfn", net, adam, done)
            result.iterations = done
        save_checkpoint(out / "last.cfn", net, adam, result.iterations)
    return result


def moving_average(values: list[float], end: int, window: int = 100) -> float:
    """Mean of ``values[end - window : end]`` (iterations are 1-based)."""
    lo = max(0, end - window)
    return float(np.mean(values[lo:end]))


def read_log(path: str | os.PathLike) -> tuple[list[list[str]], list[list[str]]]:
    its, vals = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split("\t")
        if parts[0] == "it":
            its.append(parts[1:])
        elif parts[0] == "val":
            vals.append(parts[1:])
    return its, vals


__all__ = ["TrainResult", "Validator", "moving_average", "read_log", "train", "train_step", "val_spec"]
