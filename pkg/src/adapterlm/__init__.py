"""Multi-task language modeling with a shared backbone, per-task residual
adapters and task segment embeddings."""

from adapterlm.tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
