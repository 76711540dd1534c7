"""Training, data handling, inference and verification tools around the network."""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .gradcheck import gradcheck
from .inference import NoiseSpec, denoise, evaluate, export_introspection
from .train import train

__all__ = [
    "NoiseSpec",
    "TrainConfig",
    "denoise",
    "evaluate",
    "export_introspection",
    "gradcheck",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
