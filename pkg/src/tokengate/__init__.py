"""Token-gated transformer encoder with polarization training and FLOPs accounting."""

from .encoder import ConfigError, Encoder, ModelConfig
from .flops import FlopsReport, block_flops, model_flops, speedup_format
from .gate import GateParams, mask_match

__version__ = "0.1.0"
