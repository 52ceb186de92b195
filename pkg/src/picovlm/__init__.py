"""picovlm: desk-scale vision-language pre-training with layerwise
cross-attention, on a from-scratch NumPy autograd core."""

__version__ = "0.1.0"

from .tensor import HIGH, STANDARD, MacCounter, Tape, Tensor, mac_scope
from .encoder import EncoderConfig, LayerSelection, VisionEncoder, select_layers
from .lm import LMConfig, ModeSpec, TokenSequence
from .model import VisionLanguageModel
from .optim import AdamW, StageSchedule, lr_at
from .tokenizer import Tokenizer

__all__ = [
    "HIGH", "STANDARD", "MacCounter", "Tape", "Tensor", "mac_scope",
    "EncoderConfig", "LayerSelection", "VisionEncoder", "select_layers",
    "LMConfig", "ModeSpec", "TokenSequence", "VisionLanguageModel",
    "AdamW", "StageSchedule", "lr_at", "Tokenizer",
]
