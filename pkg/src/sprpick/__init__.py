"""First-break picking with latent first-break labels."""

from .types import UNLABELED, Gather, ProbabilityMap, WindowedGather, mask_to_pickset, pickset_to_mask

__version__ = "0.1.0"

__all__ = ["UNLABELED", "Gather", "ProbabilityMap", "WindowedGather", "mask_to_pickset", "pickset_to_mask"]
