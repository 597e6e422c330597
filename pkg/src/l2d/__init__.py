"""Multi-label knowledge distillation with label-wise embeddings."""

from l2d._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
