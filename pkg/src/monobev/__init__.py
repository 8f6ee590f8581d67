"""Monocular birds-eye-view segmentation on a built-in synthetic world.

Pipeline: a small convolutional pyramid extracts perspective features,
column-wise cross-attention decoders run a cycle-calibrated view
transformation into polar BEV space, polar bands are resampled to a
Cartesian grid, ego-motion-aligned history features are fused from a
memory bank, and a top-down head predicts per-class occupancy maps.
Everything, including the reverse-mode gradients, is built on numpy.
"""

__version__ = "0.1.0"

from .autodiff import Value, grad_check, no_grad
from .geometry import BevGridSpec, CameraModel, LevelSpec

__all__ = [
    "Value",
    "grad_check",
    "no_grad",
    "BevGridSpec",
    "CameraModel",
    "LevelSpec",
    "__version__",
]
