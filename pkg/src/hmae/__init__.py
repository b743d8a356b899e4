"""Masked-autoencoder ViT pretraining on random slide crops, frozen-embedding
probes, and evaluation (F1/AUC over repeated splits, attention maps, t-SNE)."""
from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor, no_grad
from .vit import MaeModel, MaskPlan, PatchGrid, ViTConfig

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "MaeModel", "MaskPlan", "PatchGrid", "Tensor", "ViTConfig", "no_grad", "__version__"]
