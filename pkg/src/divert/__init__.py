"""Joint image and prompt-embedding attacks that divert a forgery detector's attention."""
from .types import AttackConfig, AttackRecord, ImageTensor, PromptEmbedding, TamperMask, Vocabulary

__all__ = ["AttackConfig", "AttackRecord", "ImageTensor", "PromptEmbedding", "TamperMask", "Vocabulary"]
__version__ = "0.1.0"
