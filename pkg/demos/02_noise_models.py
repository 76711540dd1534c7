#!/usr/bin/env python3
# Synthetic noise: white Gaussian noise and the camera-style heteroscedastic
# model whose variance grows with the linear intensity L:
#     var(L) = L * sigma_d**2 + sigma_s**2
#
# python3 demos/02_noise_models.py

import numpy as np

from cfnet.harness.data import fixture_image
from cfnet.noise_synth import IspConfig, NoiseParams, gaussian_field, synth_awgn, synth_hetero
from cfnet.objectives import psnr

# %% the sampler is counter based: any slice of the stream can be drawn on its own
whole = gaussian_field(seed=5, shape=(10,))
tail = gaussian_field(seed=5, shape=(4,), offset=6)
print("same values drawn piecewise:", np.array_equal(whole[6:], tail))

# %% AWGN at sigma = 25 (0-255 scale); the noisy image is not clipped
clean = fixture_image(0, 128)[None]
noisy, sigma = synth_awgn(clean, 25.0, seed=1)
print(f"noisy PSNR {psnr(noisy, clean):.2f} dB (closed form {-20 * np.log10(25 / 255):.2f} dB)")
print("values outside [0, 1]:", int(np.sum((noisy < 0) | (noisy > 1))))

# %% heteroscedastic noise on flat patches of increasing brightness
levels = np.array([0.05, 0.25, 0.5, 0.9])
n = 200_000
flat = np.repeat(levels ** (1 / 2.2), n).reshape(1, 1, len(levels), n)
p = NoiseParams(sigma_d=0.1, sigma_s=0.02)
y, s = synth_hetero(flat, p, IspConfig(gamma=2.2, clip=False), seed=3)
lin_noise = np.sign(y) * np.abs(y) ** 2.2 - levels[None, None, :, None]
for i, L in enumerate(levels):
    print(f"L={L:.2f}  empirical var {lin_noise[0, 0, i].var():.2e}  model {L * 0.1**2 + 0.02**2:.2e}")

# %% the ground-truth sigma map tracks brightness; dark regions are cleaner
y, s = synth_hetero(clean, p, IspConfig(), seed=4)
dark, bright = clean < 0.3, clean > 0.7
print(f"mean sigma dark {s[dark].mean():.3f}  bright {s[bright].mean():.3f}")
