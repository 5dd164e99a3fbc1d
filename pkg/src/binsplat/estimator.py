"""Scikit-learn style front end for training and querying binary codes."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_cameras, check_level, check_masks, check_scene, resolve_threads
from .codec import select_gaussians
from .rasterizer import render_class_map
from .trainer import TrainConfig, train


class BinaryGaussianSegmenter(BaseEstimator):
    """Learn a packed per-Gaussian category code from multi-view mask pyramids.

    Hyperparameters mirror :class:`binsplat.trainer.TrainConfig`. After
    :meth:`fit` the trained scene, code table and loss history are stored
    in ``scene_``, ``codes_`` and ``history_``.

    Examples
    --------
    >>> from binsplat.synth import SynthSpec, generate
    >>> scene, cams, masks, _ = generate(SynthSpec(branching=(2,), level_dims=(8,),
    ...                                            n_views=2, image_size=16, focal=18.0))
    >>> seg = BinaryGaussianSegmenter(iterations=5).fit(scene, masks, cams)
    >>> seg.predict(cams[0], level=1).shape
    (16, 16)
    """

    def __init__(self, iterations=2000, lr_features=0.005, lr_opacity=0.001,
                 opacity_finetune=True, virtual_negative=True, mask_balanced=True,
                 lambda_reg=10.0, lambda_guiding=1.0, lambda_con=1.0,
                 random_pixels=256, balanced_pixels=768, masks_per_iter=64,
                 init_logit_std=0.5, reg_per_element=True, seed=0, threads=None):
        self.iterations = iterations
        self.lr_features = lr_features
        self.lr_opacity = lr_opacity
        self.opacity_finetune = opacity_finetune
        self.virtual_negative = virtual_negative
        self.mask_balanced = mask_balanced
        self.lambda_reg = lambda_reg
        self.lambda_guiding = lambda_guiding
        self.lambda_con = lambda_con
        self.random_pixels = random_pixels
        self.balanced_pixels = balanced_pixels
        self.masks_per_iter = masks_per_iter
        self.init_logit_std = init_logit_std
        self.reg_per_element = reg_per_element
        self.seed = seed
        self.threads = threads

    def _config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        params = {k: v for k, v in self.get_params().items() if k in names}
        params["threads"] = resolve_threads(self.threads)
        return TrainConfig(**params)

    def fit(self, scene, masks, cameras, callback=None):
        """Train on ``scene`` against ``masks`` seen from ``cameras``.

        ``masks`` is a MaskPyramid or a list of (L, H, W) label stacks;
        the input scene is left untouched.
        """
        scene = check_scene(scene)
        masks = check_masks(masks, scene.layout)
        cameras = check_cameras(cameras, masks.n_views)
        result = train(scene, cameras, masks, self._config(), callback=callback)
        self.scene_ = result.scene
        self.codes_ = result.codes
        self.history_ = result.history
        self.n_skipped_views_ = result.skipped_views
        self.layout_ = scene.layout
        return self

    def transform(self, X=None):
        """Packed uint32 code of every Gaussian in the fitted scene."""
        check_is_fitted(self, "codes_")
        return self.codes_.codes.copy()

    def fit_transform(self, scene, masks, cameras):
        return self.fit(scene, masks, cameras).transform()

    def predict(self, cameras, level=None):
        """Level-l class map for one camera, or a list of maps for several.

        ``level`` defaults to the finest level.
        """
        check_is_fitted(self, "codes_")
        level = self.layout_.n_levels if level is None else check_level(level, self.layout_)
        single = not isinstance(cameras, (list, tuple))
        cams = check_cameras(cameras)
        threads = resolve_threads(self.threads)
        maps = [render_class_map(self.scene_, c, level, self.codes_, threads=threads)
                for c in cams]
        return maps[0] if single else maps

    def select(self, level, class_value) -> np.ndarray:
        """Indices of Gaussians whose level-l class equals ``class_value``."""
        check_is_fitted(self, "codes_")
        return select_gaussians(self.codes_, check_level(level, self.layout_), class_value)

    def extract(self, level, class_value):
        """Sub-scene holding one object's Gaussians."""
        return self.scene_.subset(self.select(level, class_value))

    def score(self, masks, cameras, level=None):
        """Mean IoU against ``masks`` (finest level unless ``level`` is given)."""
        from .synth import evaluate
        check_is_fitted(self, "codes_")
        masks = check_masks(masks, self.layout_)
        cameras = check_cameras(cameras, masks.n_views)
        report = evaluate(self.scene_, cameras, masks, self.codes_,
                          threads=resolve_threads(self.threads))
        level = self.layout_.n_levels if level is None else check_level(level, self.layout_)
        return report.levels[level - 1].miou
