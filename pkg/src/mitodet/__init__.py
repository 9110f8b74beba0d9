"""Mitotic-figure detector with auxiliary tumor-type and patch-foreground
heads, seeded augmentation, and a detection evaluation/ablation harness."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND", "__version__"]
