"""Desk-scale reference engine for a hybrid Transformer / Mamba2 / MoE language model."""

from .errors import TurbosError
from .model import ModelConfig, TINY, TURBOS_128, build_model, decode_step, generate, prefill

__all__ = ["TurbosError", "ModelConfig", "TINY", "TURBOS_128", "build_model", "decode_step", "generate", "prefill"]
__version__ = "0.1.0"
