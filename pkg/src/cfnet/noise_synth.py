"""Synthetic noise: AWGN and heteroscedastic Gaussian through a small ISP.

Randomness is counter based.  Each pixel's normal deviate is a pure function
of ``(seed, stream, flat pixel index)``: uniforms come from a SplitMix64 hash
of the counter and are turned into normals with Marsaglia's polar method,
retrying with an incremented attempt counter on rejection.  Any tiling of the
image therefore reproduces exactly the same values.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor_core import check4

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class NoiseParamError(ValueError):
    pass


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed: int, stream: int) -> np.uint64:
    with np.errstate(over="ignore"):
        k = _splitmix(np.array([seed & _MASK64], dtype=np.uint64))
        k = _splitmix(k ^ np.uint64(stream & _MASK64))
    return k[0]


def uniform_counter(seed: int, counters: np.ndarray, stream: int = 0) -> np.ndarray:
    """Uniform [0, 1) doubles, one per uint64 counter."""
    with np.errstate(over="ignore"):
        bits = _splitmix(np.asarray(counters, dtype=np.uint64) ^ _key(seed, stream))
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def gaussian_counter(seed: int, index: np.ndarray, stream: int = 0) -> np.ndarray:
    """Standard normals for flat pixel indices, via the polar method."""
    index = np.asarray(index, dtype=np.uint64)
    out = np.empty(index.shape, dtype=np.float64)
    todo = np.arange(index.size)
    attempt = 0
    flat = index.ravel()
    res = out.ravel()
    while todo.size:
        # counters: (pixel, attempt, lane) packed so lanes and attempts never collide
        base = (flat[todo] << np.uint64(8)) | np.uint64((attempt & 0x7F) << 1)
        if attempt > 0x7F:
            base = base ^ (np.uint64(attempt) << np.uint64(56))
        u = 2.0 * uniform_counter(seed, base, stream) - 1.0
        v = 2.0 * uniform_counter(seed, base | np.uint64(1), stream) - 1.0
        s = u * u + v * v
        ok = (s > 0.0) & (s < 1.0)
        res[todo[ok]] = u[ok] * np.sqrt(-2.0 * np.log(s[ok]) / s[ok])
        todo = todo[~ok]
        attempt += 1
    return res.reshape(index.shape)


def gaussian_field(seed: int, shape: tuple[int, ...], stream: int = 0, offset: int = 0) -> np.ndarray:
    """Normals for a dense array; ``offset`` shifts the flat pixel counter."""
    n = int(np.prod(shape))
    idx = np.arange(offset, offset + n, dtype=np.uint64)
    return gaussian_counter(seed, idx, stream).reshape(shape)


class NoiseMode(enum.Enum):
    AWGN = "awgn"
    HETERO = "hetero"


@dataclass
class NoiseParams:
    sigma_d: float = 0.0
    sigma_s: float = 0.0
    awgn_sigma: float = 0.0
    mode: NoiseMode = NoiseMode.HETERO

    def __post_init__(self):
        if self.sigma_d < 0 or self.sigma_s < 0 or self.awgn_sigma < 0:
            raise NoiseParamError("noise parameters must be non-negative")


@dataclass
class IspConfig:
    gamma: float = 2.2
    quantize_bits: int = 0
    clip: bool = True

    def __post_init__(self):
        if not 1.0 <= self.gamma <= 4.0:
            raise NoiseParamError(f"gamma must lie in [1, 4], got {self.gamma}")
        if self.quantize_bits not in (0, 8, 16):
            raise NoiseParamError(f"quantize_bits must be 0, 8 or 16, got {self.quantize_bits}")


def synth_awgn(clean: np.ndarray, sigma: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Add i.i.d. Gaussian noise; ``sigma`` is on the 0-255 scale.

    The result is not clipped.  Returns ``(noisy, gt_sigma)`` with a constant
    sigma map of ``sigma / 255``.
    """
    check4(clean, "clean")
    if sigma < 0:
        raise NoiseParamError(f"sigma must be non-negative, got {sigma}")
    s = sigma / 255.0
    if s == 0:
        return clean.copy(), np.zeros_like(clean)
    noise = s * gaussian_field(seed, clean.shape)
    return clean + noise.astype(clean.dtype), np.full_like(clean, s)


def hetero_sigma(irradiance: np.ndarray, sigma_d: float, sigma_s: float) -> np.ndarray:
    """Per-pixel std ``sqrt(L * sigma_d**2 + sigma_s**2)``."""
    return np.sqrt(irradiance * sigma_d**2 + sigma_s**2)


def linear_noise(irradiance: np.ndarray, params: NoiseParams, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear-domain noise ``n ~ N(0, L sd^2 + ss^2)`` and its std map."""
    sig = hetero_sigma(irradiance, params.sigma_d, params.sigma_s)
    return sig * gaussian_field(seed, irradiance.shape), sig


def quantize(x: np.ndarray, bits: int) -> np.ndarray:
    if not bits:
        return x
    levels = float((1 << bits) - 1)
    return np.round(x * levels) / levels


def synth_hetero(
    clean_srgb: np.ndarray, params: NoiseParams, isp: IspConfig | None = None, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Heteroscedastic noise injected in linear space, then re-encoded.

    ``gt_sigma`` is the linear-domain standard deviation and depends on the
    clean image only.
    """
    check4(clean_srgb, "clean_srgb")
    isp = isp or IspConfig()
    if params.mode is not NoiseMode.HETERO:
        raise NoiseParamError("synth_hetero needs mode=HETERO")
    if params.sigma_d == 0 and params.sigma_s == 0:
        return clean_srgb.copy(), np.zeros_like(clean_srgb)
    L = np.clip(clean_srgb, 0.0, 1.0) ** isp.gamma
    n, sig = linear_noise(L, params, seed)
    y = L + n
    if isp.clip:
        y = np.clip(y, 0.0, 1.0)
    out = np.sign(y) * np.abs(y) ** (1.0 / isp.gamma)
    out = quantize(out, isp.quantize_bits)
    return out.astype(clean_srgb.dtype), sig.astype(clean_srgb.dtype)


def sample_sigma_range(lo: float, hi: float, seed: int) -> float:
    """Uniform draw from ``[lo, hi]``, a pure function of ``seed``."""
    if lo < 0 or lo > hi:
        raise NoiseParamError(f"need 0 <= lo <= hi, got lo={lo}, hi={hi}")
    u = uniform_counter(seed, np.zeros(1, dtype=np.uint64), stream=0x5157)[0]
    return float(lo + (hi - lo) * u)


def sample_hetero_params(seed: int, sd_range=(0.0, 0.16), ss_range=(0.0, 0.06)) -> NoiseParams:
    """Draw (sigma_d, sigma_s) from configurable ranges."""
    u = uniform_counter(seed, np.arange(2, dtype=np.uint64), stream=0x4E50)
    sd = sd_range[0] + (sd_range[1] - sd_range[0]) * u[0]
    ss = ss_range[0] + (ss_range[1] - ss_range[0]) * u[1]
    return NoiseParams(sigma_d=float(sd), sigma_s=float(ss), mode=NoiseMode.HETERO)
