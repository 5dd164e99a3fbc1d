"""Optimization loop for per-Gaussian category features (and opacity)."""

from __future__ import annotations

import io as _io
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .codec import extract_codes
from .contrastive import PixelBatch, detect_indivisible, total_loss
from .exceptions import LayoutMismatchError, NumericError, SamplingError
from .io import save_scene
from .rasterizer import composite_backward, composite_forward, logit_gradients, project
from .sampler import SamplerConfig, make_rng, sample_batch
from .scene import CodeTable, GaussianScene, MaskPyramid

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_features: float = 0.005
    lr_opacity: float = 0.001
    opacity_finetune: bool = True
    virtual_negative: bool = True
    mask_balanced: bool = True
    lambda_reg: float = 10.0
    lambda_guiding: float = 1.0
    lambda_con: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_logit_std: float = 0.5
    random_pixels: int = 256
    balanced_pixels: int = 768
    masks_per_iter: int = 64
    pair_cap: int = 0
    reg_per_element: bool = True
    checkpoint_every: int = 0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.lr_features < 0 or self.lr_opacity < 0:
            raise ValueError("learning rates must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    @property
    def weights(self):
        return (self.lambda_reg, self.lambda_guiding, self.lambda_con)

    def sampler(self) -> SamplerConfig:
        if self.mask_balanced:
            return SamplerConfig(self.random_pixels, self.balanced_pixels,
                                 self.masks_per_iter, self.seed)
        # same pixel budget, all drawn uniformly
        return SamplerConfig(self.random_pixels + self.balanced_pixels, 0,
                             self.masks_per_iter, self.seed)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, type(getattr(cls(), key)))
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_mapping(parse_key_values(fh.read(), str(path)))


PAPER_PROFILE = dict(random_pixels=2000, balanced_pixels=8000)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _coerce(key, raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(float(text)) if kind is int and "e" in text.lower() else kind(text)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_key_values(text: str, source="<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


class Adam:
    """Adam with bias correction on a flat float64 parameter array."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


LOG_FIXED = ("iteration", "view", "n_pixels", "total", "reg")


def log_columns(n_levels):
    cols = list(LOG_FIXED)
    for lv in range(1, n_levels + 1):
        cols += [f"pos{lv}", f"neg{lv}", f"skip{lv}"]
    cols += [f"vn{lv}" for lv in range(1, n_levels + 1)]
    return cols


def write_log(history, path, n_levels, seed=None):
    cols = log_columns(n_levels)
    with open(path, "w") as fh:
        if seed is not None:
            fh.write(f"# seed = {seed}\n")
        fh.write(",".join(cols) + "\n")
        for row in history:
            fh.write(",".join(_fmt_cell(row.get(c, "")) for c in cols) + "\n")


def _fmt_cell(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


@dataclass
class Checkpoint:
    """Resumable training state.

    Saved as ``<prefix>.bgs`` (BGS1 snapshot) plus ``<prefix>.state.npz``
    holding optimizer moments, the RNG state, exact float64 parameters and
    the loss history.
    """

    iteration: int
    scene: GaussianScene
    optimizers: dict
    rng_state: dict
    history: list
    config: TrainConfig
    skipped_views: int = 0

    def save(self, prefix):
        save_scene(self.scene, prefix + ".bgs")
        arrays = {}
        for name, opt in self.optimizers.items():
            arrays[f"{name}_m"], arrays[f"{name}_v"] = opt.m, opt.v
            arrays[f"{name}_t"] = np.array(opt.t)
        s = self.scene
        meta = dict(iteration=self.iteration, rng=self.rng_state, history=self.history,
                    config=self.config.to_text(), level_dims=list(s.layout.level_dims),
                    skipped_views=self.skipped_views)
        buf = _io.BytesIO()
        np.savez(buf, positions=s.positions, log_scales=s.log_scales, rotations=s.rotations,
                 opacity_logits=s.opacity_logits, colors=s.colors,
                 feature_logits=s.feature_logits,
                 meta=np.frombuffer(json.dumps(meta, default=_jsonable).encode(), np.uint8),
                 **arrays)
        with open(prefix + ".state.npz", "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, prefix) -> "Checkpoint":
        from .io import load_scene
        snap = load_scene(prefix + ".bgs")
        with np.load(prefix + ".state.npz") as z:
            meta = json.loads(bytes(z["meta"]).decode())
            scene = GaussianScene(z["positions"], z["log_scales"], z["rotations"],
                                  z["opacity_logits"], z["colors"], z["feature_logits"],
                                  snap.layout)
            config = TrainConfig.from_mapping(parse_key_values(meta["config"]))
            opts = {}
            for name in ("features", "opacity"):
                lr = config.lr_features if name == "features" else config.lr_opacity
                opt = Adam(z[f"{name}_m"].shape, lr, config.beta1, config.beta2, config.eps)
                opt.m, opt.v, opt.t = z[f"{name}_m"].copy(), z[f"{name}_v"].copy(), int(
                    z[f"{name}_t"])
                opts[name] = opt
        return cls(meta["iteration"], scene, opts, meta["rng"], meta["history"], config,
                   meta.get("skipped_views", 0))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    raise TypeError(f"cannot serialize {type(obj)}")


def _restore_arrays(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _restore_arrays(v) for k, v in obj.items()}
    return obj


@dataclass
class TrainResult:
    scene: GaussianScene
    codes: CodeTable
    history: list
    skipped_views: int
    checkpoint: Checkpoint = field(repr=False)


def _check_inputs(scene, cameras, pyramid):
    if pyramid.layout != scene.layout:
        raise ValueError(f"mask layout {pyramid.layout.level_dims} differs from scene "
                         f"layout {scene.layout.level_dims}")
    if len(cameras) != pyramid.n_views:
        raise ValueError(f"{len(cameras)} cameras but {pyramid.n_views} mask views")
    for v, cam in enumerate(cameras):
        h, w = pyramid.labels[v].shape[1:]
        if (cam.height, cam.width) != (h, w):
            raise ValueError(f"view {v}: camera is {cam.width}x{cam.height}, masks {w}x{h}")


def train(scene: GaussianScene, cameras, pyramid: MaskPyramid, config: TrainConfig | None = None,
          *, checkpoint_dir=None, callback=None) -> TrainResult:
    """Fit feature logits (and optionally opacity) to the mask pyramid.

    The input scene is not modified. When ``config.init_logit_std`` is
    positive the feature logits are first redrawn from N(0, std^2) so
    that codes start out distinct; 0 keeps the incoming logits. A
    zero-iteration run returns the scene untouched.
    """
    config = config or TrainConfig()
    _check_inputs(scene, cameras, pyramid)
    work = scene.copy()
    rng = make_rng(config.seed)
    if config.init_logit_std > 0 and config.iterations > 0:
        work.feature_logits = rng.normal(scale=config.init_logit_std,
                                         size=work.feature_logits.shape)
    opts = {
        "features": Adam(work.feature_logits.shape, config.lr_features, config.beta1,
                         config.beta2, config.eps),
        "opacity": Adam(work.opacity_logits.shape, config.lr_opacity, config.beta1,
                        config.beta2, config.eps),
    }
    state = Checkpoint(0, work, opts, rng.bit_generator.state, [], config)
    return _run(state, scene, cameras, pyramid, config, checkpoint_dir, callback)


def resume(checkpoint: Checkpoint, cameras, pyramid: MaskPyramid, config: TrainConfig | None = None,
           *, checkpoint_dir=None, callback=None) -> TrainResult:
    """Continue a run from ``checkpoint`` up to ``config.iterations``."""
    config = config or checkpoint.config
    old = checkpoint.config
    if pyramid.layout != checkpoint.scene.layout:
        raise LayoutMismatchError(
            f"layout differs: checkpoint {checkpoint.scene.layout.level_dims} "
            f"vs masks {pyramid.layout.level_dims}")
    changed = [f"{f.name}: {getattr(old, f.name)!r} -> {getattr(config, f.name)!r}"
               for f in fields(TrainConfig)
               if f.name not in ("iterations", "checkpoint_every", "threads")
               and getattr(old, f.name) != getattr(config, f.name)]
    if changed:
        warnings.warn("resuming with a changed config; trajectory will diverge: "
                      + "; ".join(changed), stacklevel=2)
    _check_inputs(checkpoint.scene, cameras, pyramid)
    opts = {}
    for name, opt in checkpoint.optimizers.items():
        lr = config.lr_features if name == "features" else config.lr_opacity
        new = Adam(opt.m.shape, lr, config.beta1, config.beta2, config.eps)
        new.m, new.v, new.t = opt.m.copy(), opt.v.copy(), opt.t
        opts[name] = new
    state = Checkpoint(checkpoint.iteration, checkpoint.scene.copy(), opts,
                       _restore_arrays(checkpoint.rng_state), list(checkpoint.history),
                       config, checkpoint.skipped_views)
    return _run(state, checkpoint.scene, cameras, pyramid, config, checkpoint_dir, callback)


def _run(state, reference, cameras, pyramid, config, checkpoint_dir, callback):
    scene = state.scene
    layout = scene.layout
    rng = np.random.Generator(np.random.Philox())
    rng.bit_generator.state = _restore_arrays(state.rng_state)
    sampler_cfg = config.sampler()
    indivisible = detect_indivisible(pyramid) if config.virtual_negative else frozenset()
    frozen = (scene.positions.copy(), scene.log_scales.copy(), scene.rotations.copy(),
              scene.colors.copy())
    if not config.opacity_finetune:
        frozen += (scene.opacity_logits.copy(),)

    for it in range(state.iteration, config.iterations):
        view = int(rng.integers(pyramid.n_views))
        try:
            pixels = sample_batch(view, pyramid, sampler_cfg, rng)
        except SamplingError:
            state.skipped_views += 1
            logger.warning("iteration %d: view %d has no labels, skipped", it, view)
            continue
        splats = project(scene, cameras[view])
        fmap = composite_forward(splats, pixels, threads=config.threads)
        labels = pyramid.labels[view][:, pixels[:, 1], pixels[:, 0]].T
        batch = PixelBatch(labels, fmap.features, layout)
        pair_mask = _pair_mask(len(batch), config.pair_cap, rng)
        breakdown, grad = total_loss(batch, indivisible, config.weights, pair_mask=pair_mask,
                                       reg_per_element=config.reg_per_element)
        if not math.isfinite(breakdown.total) or not np.all(np.isfinite(grad)):
            raise NumericError(it, breakdown.columns())
        fmap.grad[:] = grad
        grads = composite_backward(splats, fmap, threads=config.threads)
        d_feat, d_opac = logit_gradients(scene, splats, grads)
        state.optimizers["features"].step(scene.feature_logits, d_feat)
        if config.opacity_finetune:
            state.optimizers["opacity"].step(scene.opacity_logits, d_opac)
        row = {"iteration": it, "view": view, "n_pixels": len(batch)}
        row.update(breakdown.columns())
        state.history.append(row)
        if callback is not None:
            callback(it, breakdown)
        if checkpoint_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            state.iteration, state.rng_state = it + 1, rng.bit_generator.state
            os.makedirs(checkpoint_dir, exist_ok=True)
            state.save(os.path.join(checkpoint_dir, f"ckpt_{it + 1:06d}"))

    state.iteration = max(state.iteration, config.iterations)
    state.rng_state = rng.bit_generator.state
    after = (scene.positions, scene.log_scales, scene.rotations, scene.colors)
    if not config.opacity_finetune:
        after += (scene.opacity_logits,)
    if not all(np.array_equal(a, b) for a, b in zip(frozen, after)):
        raise AssertionError("frozen parameters changed during training")
    state.config = config
    return TrainResult(scene, extract_codes(scene), state.history, state.skipped_views, state)


def _pair_mask(n, cap, rng):
    if not cap or n * (n - 1) // 2 <= cap:
        return None
    keep = rng.random((n, n)) < cap / (n * (n - 1) / 2)
    return keep
