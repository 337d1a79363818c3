"""Absorb discarded context into low-rank adapters by synchronizing hidden states."""

from .absorption import AbsorptionConfig, AbsorptionReport, absorb_context
from .model import LoraAdapterSet, ModelConfig, ModelWeights, forward_full, init_model, lora_merge
from .streaming import absorber_generate

__all__ = [
    "AbsorptionConfig",
    "AbsorptionReport",
    "LoraAdapterSet",
    "ModelConfig",
    "ModelWeights",
    "absorb_context",
    "absorber_generate",
    "forward_full",
    "init_model",
    "lora_merge",
]
