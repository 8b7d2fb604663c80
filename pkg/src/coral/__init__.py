"""Order-agnostic language modeling with multi-offset prediction and
sliding blockwise decoding, at toy scale on CPU."""

from .model import CoralTransformer, ModelConfig, OffsetConfig

__all__ = ["CoralTransformer", "ModelConfig", "OffsetConfig"]
__version__ = "0.1.0"
