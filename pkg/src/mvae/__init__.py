"""Multimodal variational autoencoder with product-of-experts inference."""

from .gaussian import DiagGaussian, product_of_experts, quotient_of_experts
from .kernels import BACKEND
from .model import ModalitySpec, MultimodalBatch, MvaeModel, sub_sampled_objective
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DiagGaussian",
    "ModalitySpec",
    "MultimodalBatch",
    "MvaeModel",
    "TrainConfig",
    "product_of_experts",
    "quotient_of_experts",
    "sub_sampled_objective",
    "train",
]
