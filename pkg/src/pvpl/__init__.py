"""Pseudo-visual-prompt learning in a toy frozen dual-encoder space.

Class-specific image-shaped prompt tensors are trained against text-only
data via a pairwise ranking loss, their knowledge is transferred into
learnable text prompts through a symmetric contrastive loss with dual
adapters, and the result is evaluated as zero-shot multi-label
recognition with mAP.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, grad_check, sgd_step

__all__ = ["Tensor", "grad_check", "sgd_step", "__version__"]
