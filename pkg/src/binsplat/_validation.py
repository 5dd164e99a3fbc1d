"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import os

from .scene import Camera, GaussianScene, LevelLayout, MaskPyramid

THREADS_ENV = "BINSPLAT_THREADS"


def check_scene(scene, allow_empty=False) -> GaussianScene:
    if not isinstance(scene, GaussianScene):
        raise TypeError(f"expected a GaussianScene, got {type(scene).__name__}")
    if len(scene) == 0 and not allow_empty:
        raise ValueError("scene has zero Gaussians")
    return scene


def check_cameras(cameras, n_views=None) -> list:
    if isinstance(cameras, Camera):
        cameras = [cameras]
    cameras = list(cameras)
    if not cameras:
        raise ValueError("need at least one camera")
    for i, cam in enumerate(cameras):
        if not isinstance(cam, Camera):
            raise TypeError(f"camera {i} is a {type(cam).__name__}, not a Camera")
    if n_views is not None and len(cameras) != n_views:
        raise ValueError(f"{len(cameras)} cameras for {n_views} views")
    return cameras


def check_masks(masks, layout: LevelLayout) -> MaskPyramid:
    """Accept a MaskPyramid or a list of (L, H, W) label stacks."""
    if not isinstance(masks, MaskPyramid):
        masks = MaskPyramid.from_labels(list(masks), layout)
    if masks.layout != layout:
        raise ValueError(f"mask layout {masks.layout.level_dims} differs from scene "
                         f"layout {layout.level_dims}")
    return masks


def check_level(level, layout: LevelLayout) -> int:
    """Levels are 1-based."""
    if isinstance(level, bool) or int(level) != level:
        raise TypeError(f"level must be an integer, got {level!r}")
    level = int(level)
    if not 1 <= level <= layout.n_levels:
        raise ValueError(f"level {level} outside 1..{layout.n_levels}")
    return level


def resolve_threads(threads=None) -> int:
    """Explicit value, else $BINSPLAT_THREADS, else 1."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        if not raw:
            return 1
        try:
            threads = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    return int(threads)
