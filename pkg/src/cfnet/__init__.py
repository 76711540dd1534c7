"""CFNet: conditional filter learning with dynamic noise estimation, in numpy.

Tensors are plain ``(B, C, H, W)`` arrays.  Layers return ``(out, ctx)`` and
expose ``backward(ctx, grad)``, which accumulates parameter gradients into a
shared :class:`~cfnet.tensor_core.ParamStore`.
"""
from .cond_filter import CfbConfig, ConditionalFilterBlock, conditional_conv
from .network import VARIANTS, ArchConfig, CFNet, build_ablation_variant, cfnet_forward
from .noise_synth import IspConfig, NoiseParams, synth_awgn, synth_hetero
from .objectives import asymm_loss, psnr, rec_loss, ssim, total_loss
from .tensor_core import ParamStore

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "CFNet",
    "CfbConfig",
    "ConditionalFilterBlock",
    "IspConfig",
    "NoiseParams",
    "ParamStore",
    "VARIANTS",
    "asymm_loss",
    "build_ablation_variant",
    "cfnet_forward",
    "conditional_conv",
    "psnr",
    "rec_loss",
    "ssim",
    "synth_awgn",
    "synth_hetero",
    "total_loss",
]
