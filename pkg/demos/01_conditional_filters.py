#!/usr/bin/env python3
# A walk through the conditional filter: one small kernel per pixel and
# channel group, predicted from image features and noise features.
#
# Run from the repository root:  python3 demos/01_conditional_filters.py

import numpy as np

from cfnet.cond_filter import CfbConfig, ConditionalFilterBlock, conditional_conv, unfold
from cfnet.harness.data import fixture_image
from cfnet.noise_synth import synth_awgn
from cfnet.tensor_core import ParamStore

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

# %% a feature map with 4 channels split into 2 groups (2 channels share a kernel)
cfg = CfbConfig(channels=4, k=3, g=2)
x = rng.standard_normal((1, 4, 6, 6))

# the kernel field tau has one k*k kernel per (group, pixel)
delta = np.zeros((1, cfg.g, 9, 6, 6))
delta[:, :, 4] = 1.0  # centre tap only
print("identity kernels reproduce the input:", np.allclose(conditional_conv(x, delta, cfg), x))

box = np.full((1, cfg.g, 9, 6, 6), 1 / 9)
y = conditional_conv(x, box, cfg)
print("box kernels at an interior pixel:", y[0, 0, 2, 2], "vs mean of the 3x3 window:", x[0, 0, 1:4, 1:4].mean())

# %% what the filter actually sees: unfold lays out every 3x3 neighbourhood
patches = unfold(x, 3)
print("unfolded shape (B, C, k*k, H, W):", patches.shape)

# %% a spatially varying field: smooth on the left half, pass-through on the right
field = np.where(np.arange(6)[None, None, None, None, :] < 3, box, delta)
y = conditional_conv(x, field, cfg)
print("left half smoothed, right half untouched:", np.allclose(y[..., 4:], x[..., 4:]))

# %% the full block: kernels from image features (mu) and noise features (gamma),
# combined by a Hadamard product, then a residual tail.
store = ParamStore()
blk = ConditionalFilterBlock(store, "cfb", CfbConfig(16, 3, 16), 16, rng)
img = fixture_image(3, 32)[None]
noisy, _ = synth_awgn(img, 25.0, seed=1)
feats = np.repeat(noisy, 16, axis=1)
noise_feats = np.repeat(noisy - img, 16, axis=1)
out, ctx, tau = blk(feats, noise_feats, keep_tau=True)
print("tau field:", tau.shape, "| parameters in the block:", store.count())
# the tail is zero-initialised so a fresh block is an identity map
print("fresh block is the identity:", np.array_equal(out, feats))
