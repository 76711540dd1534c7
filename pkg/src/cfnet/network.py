"""CFNet assembly: SFEB, six conditional denoising modules in a U-Net, paired
noise-estimation stages and the global residual ``denoised = noisy + R``.

Stage layout (levels are pooling depths)::

    SFEB -> CDM1 (L0) -pool-> CDM2 (L1) -pool-> CDM3 (L2)
         -> CDM4 (L2) -up-> CDM5 (L1) -up-> CDM6 (L0) -> conv -> R

FRB outputs of CDM1 and CDM2 are added to the inputs of CDM6 and CDM5.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .cond_filter import CfbConfig, ConcatConvBlock, ConditionalFilterBlock
from .noise_estimation import NEM_WIDTH, NemCore, NoiseEstimationStage, share_core
from .tensor_core import (
    Conv2d,
    ParamStore,
    ShapeError,
    avg_pool2,
    avg_pool2_backward,
    check4,
    conv_chain,
    softplus,
    softplus_backward,
)

LEVELS = (0, 1, 2, 2, 1, 0)
FULL_SCALE_WIDTHS = (64, 128, 256, 256, 128, 64)
DESK_WIDTHS = (16, 32, 64, 64, 32, 16)


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    """Which contributions are switched on (ATBs, CFBs, dynamic estimation)."""

    atb: bool = True
    cfb: bool = True
    dne: bool = True

    @property
    def name(self) -> str:
        for key, v in VARIANTS.items():
            if v == self:
                return key
        off = [n for n, on in (("ATB", self.atb), ("CFB", self.cfb), ("DNE", self.dne)) if not on]
        return "NO_" + "_".join(off)


VARIANTS = {
    "FULL": Variant(),
    "NO_ATB": Variant(atb=False),
    "NO_CFB": Variant(cfb=False),
    "NO_DNE": Variant(dne=False),
    "NO_CFB_DNE": Variant(cfb=False, dne=False),
    "NO_ATB_DNE": Variant(atb=False, dne=False),
    "NO_ATB_CFB": Variant(atb=False, cfb=False),
    "BASELINE": Variant(atb=False, cfb=False, dne=False),
}


def variant_from_name(name: str) -> Variant:
    try:
        return VARIANTS[name.upper()]
    except KeyError:
        raise ArchError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class ArchConfig:
    width_plan: tuple[int, ...] = DESK_WIDTHS
    t: int = 2
    k: int = 3
    g: int = 16
    input_channels: int = 1
    nem_width: int = NEM_WIDTH
    variant: Variant = field(default_factory=Variant)
    seed: int = 0
    zero_residual: bool = True

    def __post_init__(self):
        wp = tuple(int(w) for w in self.width_plan)
        object.__setattr__(self, "width_plan", wp)
        if len(wp) != 6:
            raise ArchError(f"width_plan needs 6 entries, got {len(wp)}")
        if any(wp[i] != wp[5 - i] for i in range(3)):
            raise ArchError(f"width_plan must be symmetric, got {wp}")
        if any(w % self.g for w in wp):
            raise ArchError(f"every width must be divisible by g={self.g}: {wp}")
        if self.input_channels not in (1, 3):
            raise ArchError("input_channels must be 1 or 3")
        if self.t < 0:
            raise ArchError("t must be non-negative")

    @property
    def base_channels(self) -> int:
        return self.width_plan[0]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        v = d.pop("variant")
        d.update({"atb": v["atb"], "cfb": v["cfb"], "dne": v["dne"]})
        d["width_plan"] = list(self.width_plan)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        d = dict(d)
        v = Variant(bool(d.pop("atb", True)), bool(d.pop("cfb", True)), bool(d.pop("dne", True)))
        if "base_channels" in d:
            base = int(d.pop("base_channels"))
            d.setdefault("width_plan", tuple(base * m for m in (1, 2, 4, 4, 2, 1)))
        if "variant" in d:
            name = d.pop("variant")
            v = variant_from_name(name) if isinstance(name, str) else name
        return cls(variant=v, **d)


def pad_multiple(n: int, m: int = 4) -> int:
    return (-n) % m


class ConditionalDenoisingModule:
    """FRB (five 3x3 convs) then ``t`` conditional filter blocks."""

    def __init__(self, store, name, width, cfg: ArchConfig, rng):
        self.frb = conv_chain(store, f"{name}.frb", [width] * 6, [3] * 5, rng)
        ccfg = CfbConfig(width, cfg.k, cfg.g)
        self.blocks = []
        for j in range(cfg.t):
            if cfg.variant.cfb:
                self.blocks.append(ConditionalFilterBlock(store, f"{name}.cfb{j}", ccfg, width, rng))
            else:
                self.blocks.append(ConcatConvBlock(store, f"{name}.cat{j}", width, width, rng))
        self.width = width

    def __call__(self, x, noise, skip=None, keep_tau=False):
        check4(x, "cdm input")
        if noise.shape != x.shape:
            raise ShapeError(f"noise features {noise.shape} do not match CDM features {x.shape}")
        if skip is not None:
            if skip.shape != x.shape:
                raise ShapeError(f"skip input {skip.shape} does not match CDM features {x.shape}")
            x = x + skip
        f, c_frb = self.frb(x)
        y = f
        c_blocks, taus = [], []
        for blk in self.blocks:
            if keep_tau:
                y, c, tau = blk(y, noise, keep_tau=True)
                taus.append(tau)
            else:
                y, c = blk(y, noise)
            c_blocks.append(c)
        return y, f, (c_frb, c_blocks, taus)

    def backward(self, ctx, gy, gf=None):
        """gy: grad of output; gf: extra grad on the FRB output (skip path).

        Returns (grad_input, grad_noise); grad_input also serves the skip.
        """
        c_frb, c_blocks, _ = ctx
        gnoise = 0.0
        for blk, c in zip(reversed(self.blocks), reversed(c_blocks)):
            gy, gn = blk.backward(c, gy)
            gnoise = gnoise + gn
        if gf is not None:
            gy = gy + gf
        gx = self.frb.backward(c_frb, gy)
        return gx, gnoise


def cdm_forward(features, noise_features, skip_in, module: ConditionalDenoisingModule):
    return module(features, noise_features, skip_in)[0]


class CFNet:
    def __init__(self, cfg: ArchConfig | None = None, dtype=np.float64, store: ParamStore | None = None):
        self.cfg = cfg = cfg or ArchConfig()
        self.store = store = store or ParamStore(dtype)
        rng = np.random.default_rng(cfg.seed)
        wp, cin = cfg.width_plan, cfg.input_channels

        self.sfeb = conv_chain(store, "sfeb", [cin] + [wp[0]] * 3, [3, 3, 3], rng)
        self.cdms = []
        self.links = []
        for i in range(6):
            self.cdms.append(ConditionalDenoisingModule(store, f"cdm{i + 1}", wp[i], cfg, rng))
            if i < 5:
                self.links.append(self._make_link(store, i, rng))
        self.tail = Conv2d(store, "tail", wp[5], cin, 3, rng=rng, zero=cfg.zero_residual)

        self.core = NemCore(store, "nem1.core", rng, cfg.nem_width, use_atb=cfg.variant.atb)
        self.nems: list[NoiseEstimationStage | Conv2d] = [
            NoiseEstimationStage(store, "nem1", cin, wp[0], self.core, rng, sigma_channels=cin)
        ]
        for i in range(1, 6):
            if cfg.variant.dne:
                share_core(store, "nem1.core.", f"nem{i + 1}.core.")
                self.nems.append(NoiseEstimationStage(store, f"nem{i + 1}", wp[i], wp[i], self.core, rng))
            else:
                # one-off estimation: later stages only re-project the stage-1 core features
                self.nems.append(Conv2d(store, f"nem{i + 1}.out_port", cfg.nem_width, wp[i], 1, rng=rng))

    def _make_link(self, store, i, rng):
        wp = self.cfg.width_plan
        a, b = LEVELS[i], LEVELS[i + 1]
        if b > a:
            return ("down", Conv2d(store, f"link{i + 1}", wp[i], wp[i + 1], 3, rng=rng))
        if b < a:
            return ("up", Conv2d(store, f"link{i + 1}", wp[i], wp[i + 1], 3, stride=2, transposed=True, rng=rng))
        if wp[i] != wp[i + 1]:
            return ("same", Conv2d(store, f"link{i + 1}", wp[i], wp[i + 1], 1, rng=rng))
        return ("id", None)

    # -- forward ---------------------------------------------------------------

    def forward(self, noisy: np.ndarray, record: bool = False):
        """Returns ``(denoised, sigma_pred, ctx)``."""
        check4(noisy, "noisy")
        b, c, h, w = noisy.shape
        if c != self.cfg.input_channels:
            raise ShapeError(f"expected {self.cfg.input_channels} input channels, got {c}")
        if h % 4 or w % 4:
            raise ShapeError(f"spatial dims must be divisible by 4, got {h}x{w}; pad first")
        noisy = noisy.astype(self.store.dtype, copy=False)
        ctx: dict = {"link": [None] * 5, "cdm": [None] * 6, "nem": [None] * 6, "nf": [None] * 6}

        x, ctx["sfeb"] = self.sfeb(noisy)
        static = None
        if not self.cfg.variant.dne:
            static, ctx["static"] = self.nems[0].core_features(noisy)
        frb_out = [None] * 6
        sigma = None
        for i in range(6):
            skip = {4: frb_out[1], 5: frb_out[0]}.get(i)
            xin = x if skip is None else x + skip
            nf, sig = self._stage_noise(i, noisy, xin, static, ctx)
            if i == 0:
                sigma = sig
            ctx["nf"][i] = nf
            x, frb_out[i], ctx["cdm"][i] = self.cdms[i](x, nf, skip, keep_tau=record)
            if i < 5:
                x, ctx["link"][i] = self._link_forward(i, x)
        r, ctx["tail"] = self.tail(x)
        return noisy + r, sigma, ctx

    def _stage_noise(self, i, noisy, xin, static, ctx):
        stage = self.nems[i]
        if self.cfg.variant.dne:
            nf, sig, ctx["nem"][i] = stage(noisy if i == 0 else xin)
            return nf, sig
        f = static
        for _ in range(LEVELS[i]):
            f = avg_pool2(f)
        if i == 0:
            nf, c_out = stage.out_port(f)
            z, c_head = stage.sigma_head(nf)
            ctx["nem"][i] = (c_out, z, c_head)
            return nf, softplus(z)
        nf, ctx["nem"][i] = stage(f)
        return nf, None

    def _link_forward(self, i, x):
        kind, conv = self.links[i]
        if kind == "id":
            return x, None
        if kind == "down":
            x = avg_pool2(x)
        return conv(x)

    def _link_backward(self, i, c, g):
        kind, conv = self.links[i]
        if kind == "id":
            return g
        g = conv.backward(c, g)
        if kind == "down":
            g = avg_pool2_backward(g)
        return g

    def __call__(self, noisy):
        y, s, _ = self.forward(noisy)
        return y, s

    # -- backward --------------------------------------------------------------

    def backward(self, ctx, g_denoised: np.ndarray, g_sigma: np.ndarray | None = None) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient wrt ``noisy``."""
        g_noisy = g_denoised.copy()
        g = self.tail.backward(ctx["tail"], g_denoised)
        g_frb = [None] * 6
        g_static = 0.0
        for i in reversed(range(6)):
            if i < 5:
                g = self._link_backward(i, ctx["link"][i], g)
            gx, gnoise = self.cdms[i].backward(ctx["cdm"][i], g, g_frb[i])
            # gx is the grad of the summed CDM input, so it also flows to the skip source
            g_in_nem, g_stat = self._stage_noise_backward(i, ctx, gnoise, g_sigma if i == 0 else None)
            g_static = g_static + g_stat
            if g_in_nem is not None:
                if i == 0:
                    g_noisy = g_noisy + g_in_nem
                else:
                    gx = gx + g_in_nem
            if i == 4:
                g_frb[1] = gx
            elif i == 5:
                g_frb[0] = gx
            g = gx
        if not self.cfg.variant.dne:
            g_noisy = g_noisy + self.nems[0].core_backward(ctx["static"], g_static)
        g_noisy = g_noisy + self.sfeb.backward(ctx["sfeb"], g)
        return g_noisy

    def _stage_noise_backward(self, i, ctx, gnoise, g_sigma):
        stage = self.nems[i]
        if isinstance(gnoise, float):
            gnoise = np.zeros_like(ctx["nf"][i])
        if self.cfg.variant.dne:
            return stage.backward(ctx["nem"][i], gnoise, g_sigma), 0.0
        if i == 0:
            c_out, z, c_head = ctx["nem"][i]
            if g_sigma is not None:
                gnoise = gnoise + stage.sigma_head.backward(c_head, softplus_backward(g_sigma, z))
            gf = stage.out_port.backward(c_out, gnoise)
        else:
            gf = stage.backward(ctx["nem"][i], gnoise)
        for _ in range(LEVELS[i]):
            gf = avg_pool2_backward(gf)
        return None, gf

    # -- introspection -----------------------------------------------------------

    def noise_features(self, ctx) -> list[np.ndarray]:
        return list(ctx["nf"])

    def kernel_fields(self, ctx, stage: int) -> list[np.ndarray]:
        """tau fields of every CFB in CDM ``stage`` (1-based); needs ``record=True``."""
        return [t for t in ctx["cdm"][stage - 1][2] if t is not None]

    def param_count(self, prefix: str = "") -> int:
        return self.store.count(prefix)


def cfnet_forward(noisy: np.ndarray, net: CFNet):
    return net(noisy)


def build_ablation_variant(variant: str | Variant, cfg: ArchConfig | None = None, dtype=np.float64) -> CFNet:
    if isinstance(variant, str):
        variant = variant_from_name(variant)
    elif not isinstance(variant, Variant):
        raise ArchError(f"unknown variant {variant!r}")
    cfg = dataclasses.replace(cfg or ArchConfig(), variant=variant)
    return CFNet(cfg, dtype)
