"""Straight-through binarization, level slicing and per-Gaussian code extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CodeTable, GaussianScene, LevelLayout, pack_codes

THRESHOLD = 0.5


@dataclass(frozen=True)
class LevelSlice:
    level: int
    start: int
    stop: int

    @property
    def width(self):
        return self.stop - self.start

    def __call__(self, x):
        return np.asarray(x)[..., self.start:self.stop]


def level_slices(layout: LevelLayout) -> list[LevelSlice]:
    return [LevelSlice(lv, s.start, s.stop) for lv in range(1, layout.n_levels + 1)
            for s in [layout.level_slice(lv)]]


def ste_binarize(features):
    """Forward pass of the straight-through estimator: 1 where F > 0.5, else 0.

    The tie at exactly 0.5 maps to 0.
    """
    return (np.asarray(features, dtype=np.float64) > THRESHOLD).astype(np.float64)


def ste_backward(upstream):
    """Backward pass of the straight-through estimator (identity Jacobian)."""
    return np.asarray(upstream, dtype=np.float64)


def slice_prefix(bits, level: int, layout: LevelLayout):
    """Levels 1..l of a code vector; a contiguous prefix of storage."""
    return np.asarray(bits)[..., :layout.prefix_width(level)]


def binary_regularizer(features, per_element=False):
    """Mean over pixels of ||1[F > 0.5] - F||^2, and its gradient.

    With ``per_element`` the mean also runs over feature components. The
    indicator is held constant when differentiating. An empty batch gives
    zero loss.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[None]
    if len(f) == 0:
        return 0.0, np.zeros_like(f)
    resid = f - ste_binarize(f)
    count = f.size if per_element else len(f)
    return float(np.sum(resid**2) / count), 2.0 * resid / count


def extract_codes(scene: GaussianScene) -> CodeTable:
    bits = scene.features > THRESHOLD
    return CodeTable(pack_codes(bits, scene.layout), scene.layout)


def select_gaussians(codes: CodeTable, level: int, class_value: int) -> np.ndarray:
    """Indices of Gaussians whose level-l class equals ``class_value``."""
    mask = codes.layout.prefix_mask(level)
    if int(class_value) & ~mask or class_value < 0:
        raise ValueError(f"class value {class_value} does not fit level {level}")
    return np.flatnonzero((codes.codes & np.uint32(mask)) == np.uint32(class_value))
