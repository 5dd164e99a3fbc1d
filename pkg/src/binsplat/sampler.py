"""Per-iteration pixel sampling: a uniform pool plus mask-balanced quotas."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import SamplingError
from .scene import MaskPyramid


@dataclass
class SamplerConfig:
    random_pixels: int = 256
    balanced_pixels: int = 768
    masks_per_iter: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("random_pixels", "balanced_pixels", "masks_per_iter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


PAPER_SAMPLER = SamplerConfig(random_pixels=2000, balanced_pixels=8000, masks_per_iter=64)


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; its state round-trips through checkpoints."""
    return np.random.Generator(np.random.Philox(int(seed)))


def sample_batch(view: int, pyramid: MaskPyramid, config: SamplerConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Sample labeled pixels of one view; returns a (P, 2) array of (col, row).

    ``random_pixels`` come uniformly without replacement from all labeled
    pixels. Then up to ``masks_per_iter`` finest-level masks are picked
    and each gets ``balanced_pixels // n_selected`` pixels, drawn with
    replacement only when the mask is smaller than its quota. Duplicates
    are dropped and the result is shuffled.
    """
    stack = pyramid.labels[view]
    width = stack.shape[2]
    coarse = stack[0].reshape(-1)
    labeled = np.flatnonzero(coarse)
    if not labeled.size:
        raise SamplingError(f"view {view} has no labeled pixels; skip it")

    picks = []
    k = min(config.random_pixels, labeled.size)
    if k:
        picks.append(rng.choice(labeled, size=k, replace=False))

    fine = stack[-1].reshape(-1)
    if config.balanced_pixels and config.masks_per_iter:
        fine_px = np.flatnonzero(fine)
        order = np.argsort(fine[fine_px], kind="stable")
        fine_px = fine_px[order]
        ids, starts, counts = np.unique(fine[fine_px], return_index=True, return_counts=True)
        n_sel = min(config.masks_per_iter, len(ids), config.balanced_pixels)
        if n_sel:
            quota = config.balanced_pixels // n_sel
            for m in np.sort(rng.choice(len(ids), size=n_sel, replace=False)):
                members = fine_px[starts[m]:starts[m] + counts[m]]
                picks.append(rng.choice(members, size=quota, replace=counts[m] < quota))

    flat = np.unique(np.concatenate(picks)) if picks else np.zeros(0, np.int64)
    flat = rng.permutation(flat)
    return np.stack([flat % width, flat // width], axis=1)
