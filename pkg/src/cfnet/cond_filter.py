"""Content-aware conditional filtering.

Two kernel-generation subnetworks read image features and noise features and
each emit a field of ``k*k`` weights per spatial position and channel group.
Their Hadamard product is applied as a per-position filter over the image
features; ``C // g`` consecutive channels share each kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    Conv2d,
    ParamStore,
    PReLU,
    Sequential,
    ShapeError,
    check4,
    conv_chain,
)


class FilterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CfbConfig:
    channels: int
    k: int = 3
    g: int = 16

    def __post_init__(self):
        if self.k <= 0 or self.k % 2 == 0:
            raise FilterConfigError(f"kernel size must be odd and positive, got {self.k}")
        if self.g <= 0 or self.channels <= 0:
            raise FilterConfigError("channels and g must be positive")
        if self.channels % self.g:
            raise FilterConfigError(f"channel count {self.channels} not divisible by g={self.g}")

    @property
    def r(self) -> int:
        return self.channels // self.g


def unfold(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded k*k neighbourhoods: (B, C, H, W) -> (B, C, k*k, H, W), row-major offsets."""
    b, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.empty((b, c, k * k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i * k + j] = xp[:, :, i : i + h, j : j + w]
    return out


def fold(cols: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of :func:`unfold`."""
    b, c, _, h, w = cols.shape
    p = k // 2
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + h, j : j + w] += cols[:, :, i * k + j]
    return xp[:, :, p : p + h, p : p + w]


def _check_field(tau: np.ndarray, features: np.ndarray, cfg: CfbConfig) -> None:
    b, c, h, w = features.shape
    if c % cfg.g:
        raise FilterConfigError(f"channel count {c} not divisible by g={cfg.g}")
    if tau.ndim != 5 or tau.shape[2] != cfg.k * cfg.k:
        raise ShapeError(f"kernel field must be (B, g, k*k, H, W) with k*k={cfg.k ** 2}, got {tau.shape}")
    if tau.shape[3:] != (h, w):
        raise ShapeError(f"kernel field spatial dims {tau.shape[3:]} != feature dims {(h, w)}")
    if tau.shape[:2] != (b, cfg.g):
        raise ShapeError(f"kernel field leading dims {tau.shape[:2]} != {(b, cfg.g)}")


def conditional_conv(features: np.ndarray, tau: np.ndarray, cfg: CfbConfig) -> np.ndarray:
    """out[b, c, p] = sum_q tau[b, c // r, q, p] * features[b, c, p + q]."""
    check4(features, "features")
    _check_field(tau, features, cfg)
    b, c, h, w = features.shape
    g, kk = cfg.g, cfg.k * cfg.k
    cols = unfold(features, cfg.k).reshape(b, g, c // g, kk, h, w)
    return np.einsum("bgrkhw,bgkhw->bgrhw", cols, tau, optimize=True).reshape(b, c, h, w)


def conditional_conv_backward(
    grad_out: np.ndarray, features: np.ndarray, tau: np.ndarray, cfg: CfbConfig
) -> tuple[np.ndarray, np.ndarray]:
    b, c, h, w = features.shape
    g, kk = cfg.g, cfg.k * cfg.k
    r = c // g
    cols = unfold(features, cfg.k).reshape(b, g, r, kk, h, w)
    g5 = grad_out.reshape(b, g, r, h, w)
    gtau = np.einsum("bgrkhw,bgrhw->bgkhw", cols, g5, optimize=True)
    gcols = g5[:, :, :, None] * tau[:, :, None]
    gx = fold(gcols.reshape(b, c, kk, h, w), cfg.k)
    return gx, gtau


def hadamard_kernels(mu: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    if mu.shape != gamma.shape:
        raise ShapeError(f"kernel fields differ in shape: {mu.shape} vs {gamma.shape}")
    return mu * gamma


def hadamard_backward(grad: np.ndarray, mu: np.ndarray, gamma: np.ndarray):
    return grad * gamma, grad * mu


class KernelGenerator:
    """Five convs mapping C_in channels to a (B, g, k*k, H, W) kernel field.

    3x3 C->C, 3x3 C->C, 1x1 C->C/2, 1x1 C/2->C/2, 1x1 C/2->g*k*k, PReLU
    between layers and none after the last, so kernels stay signed. The last
    conv starts at ``HEAD_GAIN`` of its usual scale: the kernel field is a
    product of two generator outputs and would otherwise start too large.
    """

    HEAD_GAIN = 0.1

    def __init__(self, store: ParamStore, name: str, in_channels: int, cfg: CfbConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = in_channels
        half = max(c // 2, 1)
        widths = [c, c, c, half, half, cfg.g * cfg.k * cfg.k]
        self.net = conv_chain(store, name, widths, [3, 3, 1, 1, 1], rng)
        self.net.layers[-1].w.value *= self.HEAD_GAIN
        self.in_channels = in_channels

    def __call__(self, x):
        check4(x, "kernel generator input")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"kernel generator expects {self.in_channels} channels, got {x.shape[1]}")
        y, ctx = self.net(x)
        b, _, h, w = y.shape
        return y.reshape(b, self.cfg.g, self.cfg.k**2, h, w), ctx

    def backward(self, ctx, gfield):
        b, g, kk, h, w = gfield.shape
        return self.net.backward(ctx, gfield.reshape(b, g * kk, h, w))


def kernel_generator_forward(features: np.ndarray, gen: KernelGenerator) -> np.ndarray:
    return gen(features)[0]


class ConditionalFilterBlock:
    """Conditional filter followed by two 3x3 convs, with an identity skip.

    ``out = img + conv(PReLU(conv(cond_conv(img, mu(img) * gamma(noise)))))``.
    The last conv is zero-initialised unless ``zero_tail=False``.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        cfg: CfbConfig,
        noise_channels: int | None,
        rng: np.random.Generator,
        zero_tail: bool = True,
    ):
        self.cfg = cfg
        c = cfg.channels
        self.img_gen = KernelGenerator(store, f"{name}.mu", c, cfg, rng)
        self.noise_gen = KernelGenerator(store, f"{name}.gamma", noise_channels or c, cfg, rng)
        self.tail = Sequential(
            [
                Conv2d(store, f"{name}.tail0", c, c, 3, rng=rng),
                PReLU(store, f"{name}.tail_act", c),
                Conv2d(store, f"{name}.tail1", c, c, 3, rng=rng, zero=zero_tail),
            ]
        )

    def __call__(self, img, noise, keep_tau: bool = False):
        check4(img, "img_features")
        check4(noise, "noise_features")
        if (img.shape[0],) + img.shape[2:] != (noise.shape[0],) + noise.shape[2:]:
            raise ShapeError(f"image/noise feature batch or spatial dims differ: {img.shape} vs {noise.shape}")
        mu, c_mu = self.img_gen(img)
        gamma, c_gamma = self.noise_gen(noise)
        tau = hadamard_kernels(mu, gamma)
        filt = conditional_conv(img, tau, self.cfg)
        y, c_tail = self.tail(filt)
        ctx = (img, mu, gamma, tau, c_mu, c_gamma, c_tail)
        out = img + y
        if keep_tau:
            return out, ctx, tau
        return out, ctx

    def backward(self, ctx, gout):
        """Returns (grad_img, grad_noise)."""
        img, mu, gamma, tau, c_mu, c_gamma, c_tail = ctx
        gfilt = self.tail.backward(c_tail, gout)
        gimg, gtau = conditional_conv_backward(gfilt, img, tau, self.cfg)
        gmu, ggamma = hadamard_backward(gtau, mu, gamma)
        gimg = gimg + gout + self.img_gen.backward(c_mu, gmu)
        gnoise = self.noise_gen.backward(c_gamma, ggamma)
        return gimg, gnoise


def cfb_forward(img_features, noise_features, block: ConditionalFilterBlock) -> np.ndarray:
    return block(img_features, noise_features)[0]


class ConcatConvBlock:
    """Ablation stand-in for a CFB: ``img + conv3x3(concat(img, noise))``."""

    def __init__(self, store: ParamStore, name: str, channels: int, noise_channels: int, rng, zero_tail: bool = True):
        self.conv = Conv2d(store, f"{name}.fuse", channels + noise_channels, channels, 3, rng=rng, zero=zero_tail)
        self.c = channels

    def __call__(self, img, noise, keep_tau: bool = False):
        x = np.concatenate([img, noise], axis=1)
        y, ctx = self.conv(x)
        if keep_tau:
            return img + y, ctx, None
        return img + y, ctx

    def backward(self, ctx, gout):
        gx = self.conv.backward(ctx, gout)
        return gout + gx[:, : self.c], gx[:, self.c :]
