"""Noise estimation: affine transform blocks and per-stage estimation modules.

An affine transform block (ATB) models ``sigma^2(L) = L * sd^2 + ss^2`` in
feature space: a sigmoid-gated scaling head multiplies the features (the
signal-dependent part) and a translation head adds an offset (the stationary
part).  A noise estimation module (NEM) wraps two ATBs and a fusion conv
between a stage-specific input port and output port.  Stages 2..6 reuse the
stage-1 core through aliased entries in the parameter store.
"""
from __future__ import annotations

import numpy as np

from .tensor_core import (
    Conv2d,
    ParamStore,
    PReLU,
    Sequential,
    ShapeError,
    check4,
    conv_chain,
    sigmoid,
    sigmoid_backward,
    softplus,
    softplus_backward,
)

NEM_WIDTH = 64
CORE_GROUP = "nem_core"


class AffineTransformBlock:
    """``scale(x) * x + shift(x)`` with 1x1 two-layer heads."""

    def __init__(self, store: ParamStore, name: str, rng: np.random.Generator, width: int = NEM_WIDTH):
        self.width = width
        self.scale = conv_chain(store, f"{name}.scale", [width] * 3, [1, 1], rng)
        self.shift = conv_chain(store, f"{name}.shift", [width] * 3, [1, 1], rng)

    def __call__(self, x):
        check4(x, "atb input")
        if x.shape[1] != self.width:
            raise ShapeError(f"affine transform block expects {self.width} channels, got {x.shape[1]}")
        a, c_a = self.scale(x)
        s = sigmoid(a)
        t, c_t = self.shift(x)
        return s * x + t, (x, s, c_a, c_t)

    def backward(self, ctx, g):
        x, s, c_a, c_t = ctx
        gx = g * s
        gx = gx + self.scale.backward(c_a, sigmoid_backward(g * x, s))
        gx = gx + self.shift.backward(c_t, g)
        return gx


def atb_forward(features: np.ndarray, atb: AffineTransformBlock) -> np.ndarray:
    return atb(features)[0]


class ConvStackBlock:
    """Ablation stand-in for an ATB: ten 1x1 convs with PReLU between."""

    def __init__(self, store: ParamStore, name: str, rng: np.random.Generator, width: int = NEM_WIDTH, depth: int = 10):
        self.width = width
        self.net = conv_chain(store, name, [width] * (depth + 1), [1] * depth, rng)

    def __call__(self, x):
        check4(x, "conv stack input")
        if x.shape[1] != self.width:
            raise ShapeError(f"conv stack expects {self.width} channels, got {x.shape[1]}")
        return self.net(x)

    def backward(self, ctx, g):
        return self.net.backward(ctx, g)


class NemCore:
    """Two ATBs, channel concat, then a 1x1 fusion conv with PReLU."""

    def __init__(self, store: ParamStore, name: str, rng, width: int = NEM_WIDTH, use_atb: bool = True):
        block = AffineTransformBlock if use_atb else ConvStackBlock
        self.width = width
        self.atb1 = block(store, f"{name}.atb1", rng, width)
        self.atb2 = block(store, f"{name}.atb2", rng, width)
        self.fuse = Sequential(
            [Conv2d(store, f"{name}.fuse", 2 * width, width, 1, rng=rng), PReLU(store, f"{name}.fuse_act", width)]
        )

    def __call__(self, x):
        a, c1 = self.atb1(x)
        b, c2 = self.atb2(x)
        y, c3 = self.fuse(np.concatenate([a, b], axis=1))
        return y, (c1, c2, c3)

    def backward(self, ctx, g):
        c1, c2, c3 = ctx
        gab = self.fuse.backward(c3, g)
        w = self.width
        return self.atb1.backward(c1, gab[:, :w]) + self.atb2.backward(c2, gab[:, w:])


class NoiseEstimationStage:
    """One NEM stage: ``out_port(core(in_port(x)))`` plus an optional sigma head.

    The sigma head (stage 1 only) is a 3x3 conv to the image channel count
    followed by softplus, so the predicted std is non-negative.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_channels: int,
        out_channels: int,
        core: NemCore,
        rng,
        sigma_channels: int | None = None,
    ):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.core = core
        self.in_port = Conv2d(store, f"{name}.in_port", in_channels, core.width, 1, rng=rng)
        self.out_port = Conv2d(store, f"{name}.out_port", core.width, out_channels, 1, rng=rng)
        self.sigma_head = None
        if sigma_channels:
            self.sigma_head = Conv2d(store, f"{name}.sigma_head", out_channels, sigma_channels, 3, rng=rng)

    def __call__(self, x):
        """Returns ``(noise_features, sigma_pred or None, ctx)``."""
        check4(x, "nem input")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} input channels, got {x.shape[1]}")
        h, c_in = self.in_port(x)
        f, c_core = self.core(h)
        nf, c_out = self.out_port(f)
        sigma, c_sig = None, None
        if self.sigma_head is not None:
            z, c_head = self.sigma_head(nf)
            sigma = softplus(z)
            c_sig = (z, c_head)
        return nf, sigma, (c_in, c_core, c_out, c_sig)

    def backward(self, ctx, g_features, g_sigma=None):
        c_in, c_core, c_out, c_sig = ctx
        g = g_features
        if g_sigma is not None and self.sigma_head is not None:
            z, c_head = c_sig
            g = g + self.sigma_head.backward(c_head, softplus_backward(g_sigma, z))
        g = self.out_port.backward(c_out, g)
        g = self.core.backward(c_core, g)
        return self.in_port.backward(c_in, g)

    # split entry points used by the static (one-off) estimation ablation
    def core_features(self, x):
        h, c_in = self.in_port(x)
        f, c_core = self.core(h)
        return f, (c_in, c_core)

    def core_backward(self, ctx, g):
        c_in, c_core = ctx
        return self.in_port.backward(c_in, self.core.backward(c_core, g))


def nem_forward(stage_input: np.ndarray, stage: NoiseEstimationStage):
    nf, sigma, _ = stage(stage_input)
    return nf, sigma


def share_core(store: ParamStore, src_prefix: str, dst_prefix: str) -> None:
    """Alias every ``src_prefix*`` entry under ``dst_prefix`` with the core group tag."""
    for name in [n for n in store.names() if n.startswith(src_prefix)]:
        store.share(dst_prefix + name[len(src_prefix) :], name, CORE_GROUP)
