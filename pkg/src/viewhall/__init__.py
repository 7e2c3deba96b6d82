"""Cross-view label transfer for semantic segmentation under camera pitch changes."""

from .scene import CLASS_NAMES, NUM_CLASSES

__all__ = ["CLASS_NAMES", "NUM_CLASSES"]
