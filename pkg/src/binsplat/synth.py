"""Synthetic scenes with ground-truth mask hierarchies, a brute-force oracle
renderer, and segmentation metrics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .scene import Camera, GaussianScene, LevelLayout, MaskPyramid
from .rasterizer import ALPHA_MAX, ALPHA_MIN, COV_REG, EMPTY_T, T_MIN, composite_forward, project
from .sampler import make_rng


def uniform_tree(branching) -> tuple:
    """Nested-tuple tree with ``branching[k]`` children per node at depth k."""
    if not branching:
        return ()
    child = uniform_tree(branching[1:])
    return tuple(child for _ in range(branching[0]))


def tree_depth(tree) -> int:
    if not tree:
        return 0
    depths = {tree_depth(c) for c in tree}
    if len(depths) != 1:
        raise ValueError("all leaves must sit at the same depth")
    return 1 + depths.pop()


@dataclass
class SynthSpec:
    """Recipe for a synthetic hierarchical scene.

    ``tree`` is a nested tuple (a leaf is ``()``); when omitted it is built
    from ``branching``. Leaves are numbered depth-first. Objects listed in
    ``transparent_leaves`` are stored with ``transparent_opacity`` but
    labeled as if opaque. ``planar`` lays every sibling group out in the
    ground plane and ``leaf_flatness`` squashes leaf blobs vertically.
    ``alternate_elevation`` puts every odd view below the ground plane.
    ``backdrop`` adds an opaque wall behind the scene
    as an extra coarse object with a single chain of descendants.
    """

    branching: tuple = (2, 2, 2)
    tree: tuple | None = None
    level_dims: tuple = (8, 12, 12)
    gaussians_per_leaf: int = 75
    spacing: float = 1.0
    spacing_ratio: float = 0.55
    leaf_radius: float = 0.2
    leaf_flatness: float = 0.4
    planar: bool = True
    gaussian_scale: float = 0.05
    opacity: float = 0.95
    transparent_leaves: tuple = ()
    transparent_opacity: float = 0.3
    backdrop: bool = False
    backdrop_distance: float = 1.6
    backdrop_size: float = 3.0
    backdrop_gaussians: int = 400
    n_views: int = 12
    radius: float = 4.0
    elevation_deg: float = 60.0
    alternate_elevation: bool = False
    arc_deg: float = 360.0
    image_size: int = 64
    focal: float = 70.0
    seed: int = 0

    def resolved_tree(self):
        tree = self.tree if self.tree is not None else uniform_tree(tuple(self.branching))
        tree = _freeze(tree)
        if self.backdrop:
            tree = (_chain(tree_depth(tree) - 1),) + tree
        return tree

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SynthSpec":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ValueError(f"unknown synth key {key!r}")
            default = getattr(cls, key, None) if key != "tree" else None
            kwargs[key] = _coerce(raw, default, key)
        return cls(**kwargs)


def _chain(depth):
    node = ()
    for _ in range(depth):
        node = (node,)
    return node


def _freeze(tree):
    return tuple(_freeze(c) for c in tree)


def _coerce(raw, default, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if key == "tree":
        import ast
        return _freeze(ast.literal_eval(text))
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        parts = [p for p in text.strip("()[]").replace(" ", "").split(",") if p]
        return tuple(int(p) for p in parts)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


@dataclass
class SynthTruth:
    """Ground-truth hierarchy emitted by :func:`generate`.

    ``parents[l-1]`` maps level-l node ids to level-(l-1) ids (empty for
    l = 1); ``leaf_ancestors[k]`` lists leaf k's node id at each level.
    """

    parents: list
    leaf_ancestors: np.ndarray
    gaussian_leaf: np.ndarray
    indivisible: set
    transparent_gaussians: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def _number_tree(tree, n_levels):
    counters = [0] * n_levels
    parents = [dict() for _ in range(n_levels)]
    leaves = []

    def walk(node, depth, path):
        for child in node:
            counters[depth] += 1
            nid = counters[depth]
            if depth:
                parents[depth][nid] = path[-1]
            if child:
                walk(child, depth + 1, path + [nid])
            else:
                leaves.append(path + [nid])

    walk(tree, 0, [])
    return parents, np.array(leaves, dtype=np.int64)


def _ball(rng, n, radius):
    """Points uniformly distributed in a ball."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.uniform(size=(n, 1)) ** (1 / 3)


def _random_rotation(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _ring_cameras(spec: SynthSpec):
    cams = []
    for v in range(spec.n_views):
        elev = math.radians(spec.elevation_deg)
        if spec.alternate_elevation and v % 2:
            elev = -elev
        if spec.arc_deg >= 360:
            az = 2 * math.pi * v / spec.n_views
        else:
            span = math.radians(spec.arc_deg)
            az = -span / 2 + span * v / max(spec.n_views - 1, 1)
        eye = spec.radius * np.array([math.cos(elev) * math.cos(az),
                                      math.cos(elev) * math.sin(az), math.sin(elev)])
        cams.append(Camera.look_at(eye, np.zeros(3), fx=spec.focal, width=spec.image_size,
                                   height=spec.image_size, near=0.1, far=50.0))
    return cams


def generate(spec: SynthSpec):
    """Build (scene, cameras, pyramid, truth) for a synthetic spec.

    Per-pixel truth is the leaf of the Gaussian with the largest blending
    weight; pixels whose final transmittance exceeds 0.5 stay unlabeled.
    """
    rng = make_rng(spec.seed)
    tree = spec.resolved_tree()
    n_levels = tree_depth(tree)
    layout = LevelLayout(tuple(spec.level_dims))
    if layout.n_levels != n_levels:
        raise ValueError(f"tree depth {n_levels} does not match layout {layout.level_dims}")
    parents, leaf_anc = _number_tree(tree, n_levels)
    n_leaves = len(leaf_anc)

    # leaf centers: children spread on a circle around the parent
    centers = []

    def place(node, center, depth):
        kids = list(node)
        if not kids:
            centers.append(center)
            return
        r = spec.spacing * spec.spacing_ratio**depth if len(kids) > 1 else 0.0
        normal = rng.normal(size=3)
        if spec.planar:
            normal = np.array([0.0, 0.0, 1.0])
        normal /= np.linalg.norm(normal)
        u = np.cross(normal, [1.0, 0.0, 0.0] if abs(normal[0]) < 0.9 else [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        w = np.cross(normal, u)
        phase = rng.uniform(0, 2 * math.pi)
        for i, kid in enumerate(kids):
            th = phase + 2 * math.pi * i / len(kids)
            place(kid, center + r * (math.cos(th) * u + math.sin(th) * w), depth + 1)

    roots = list(tree)
    first = 1 if spec.backdrop else 0
    if spec.backdrop:
        centers.append(None)  # placeholder, backdrop leaf is leaf 0
    if len(roots) - first == 1:
        place(roots[first], np.zeros(3), 1)
    else:
        place(tuple(roots[first:]), np.zeros(3), 0)

    pos, logs, rots, opac, cols, leaf_of = [], [], [], [], [], []
    transparent = set(spec.transparent_leaves)
    cameras = _ring_cameras(spec)
    for k in range(n_leaves):
        if spec.backdrop and k == 0:
            p, s = _backdrop(spec, rng, cameras)
            m = len(p)
        else:
            m = spec.gaussians_per_leaf
            p = centers[k] + _ball(rng, m, spec.leaf_radius) * [1.0, 1.0, spec.leaf_flatness]
            s = np.log(spec.gaussian_scale * rng.uniform(0.7, 1.3, size=(m, 3)))
        pos.append(p)
        logs.append(s)
        rots.append(_random_rotation(rng, m))
        o = spec.transparent_opacity if k in transparent else spec.opacity
        opac.append(np.full(m, math.log(o / (1 - o))))
        cols.append(np.tile(rng.uniform(0.1, 0.9, size=3), (m, 1)))
        leaf_of.append(np.full(m, k))
    gaussian_leaf = np.concatenate(leaf_of)
    n = len(gaussian_leaf)
    scene = GaussianScene(np.concatenate(pos), np.concatenate(logs), np.concatenate(rots),
                          np.concatenate(opac), np.concatenate(cols),
                          np.zeros((n, layout.total_dim)), layout)

    truth_scene = scene.copy()
    is_transparent = np.isin(gaussian_leaf, list(transparent))
    truth_scene.opacity_logits[is_transparent] = math.log(spec.opacity / (1 - spec.opacity))
    labels = [truth_labels(truth_scene, cam, gaussian_leaf, leaf_anc) for cam in cameras]
    pyramid = MaskPyramid.from_labels(labels, layout)
    indivisible = set()
    for level in range(2, n_levels + 1):
        counts: dict = {}
        for child, parent in parents[level - 1].items():
            counts[parent] = counts.get(parent, 0) + 1
        indivisible |= {(level, p) for p, c in counts.items() if c == 1}
    truth = SynthTruth(parents, leaf_anc, gaussian_leaf, indivisible,
                       np.flatnonzero(is_transparent))
    return scene, cameras, pyramid, truth


def _backdrop(spec, rng, cameras):
    """Flat wall facing the mean camera direction, behind the origin."""
    eyes = np.array([-c.rotation.T @ c.translation for c in cameras])
    view_dir = eyes.mean(axis=0)
    view_dir /= np.linalg.norm(view_dir)
    u = np.cross(view_dir, [0.0, 0.0, 1.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.array([1.0, 0.0, 0.0])
    u /= np.linalg.norm(u)
    w = np.cross(view_dir, u)
    m = spec.backdrop_gaussians
    side = int(math.ceil(math.sqrt(m)))
    grid = (np.arange(side) + 0.5) / side - 0.5
    a, b = np.meshgrid(grid, grid)
    a, b = a.ravel()[:m], b.ravel()[:m]
    pos = (-spec.backdrop_distance * view_dir
           + spec.backdrop_size * (a[:, None] * u + b[:, None] * w))
    pos += rng.normal(scale=0.01, size=pos.shape)
    cell = spec.backdrop_size / side
    scale = np.log(np.tile([cell * 0.8, cell * 0.8, cell * 0.8], (m, 1)))
    return pos, scale


def truth_labels(scene, camera, gaussian_leaf, leaf_anc):
    splats = project(scene, camera, np.zeros((len(scene), 0)))
    fmap = composite_forward(splats, track_argmax=True)
    n_levels = leaf_anc.shape[1]
    out = np.zeros((n_levels, camera.height * camera.width), dtype=np.uint32)
    covered = (fmap.transmittance <= EMPTY_T) & (fmap.argmax >= 0)
    gid = splats.index[fmap.argmax[covered]]
    out[:, covered] = leaf_anc[gaussian_leaf[gid]].T
    return out.reshape(n_levels, camera.height, camera.width)


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


def brute_force_render(scene: GaussianScene, camera: Camera, pixels=None, features=None):
    """Reference composite: every splat for every pixel, one pixel at a time.

    Only the near plane culls; no tiles, no support boxes. Returns
    (features (P, D), transmittance (P,)).
    """
    if features is None:
        features = 1.0 / (1.0 + np.exp(-scene.feature_logits))
    features = np.asarray(features, dtype=np.float64)
    if pixels is None:
        pixels = [(x, y) for y in range(camera.height) for x in range(camera.width)]
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)

    splats = []
    for i in range(len(scene)):
        cam_p = camera.rotation @ scene.positions[i] + camera.translation
        z = cam_p[2]
        if z <= camera.near:
            continue
        w, x, y, zq = scene.rotations[i] / np.linalg.norm(scene.rotations[i])
        rot = np.array([
            [w * w + x * x - y * y - zq * zq, 2 * (x * y - w * zq), 2 * (x * zq + w * y)],
            [2 * (x * y + w * zq), w * w - x * x + y * y - zq * zq, 2 * (y * zq - w * x)],
            [2 * (x * zq - w * y), 2 * (y * zq + w * x), w * w - x * x - y * y + zq * zq],
        ])
        sig = rot @ np.diag(np.exp(2 * scene.log_scales[i])) @ rot.T
        jac = np.array([[camera.fx / z, 0.0, -camera.fx * cam_p[0] / z**2],
                        [0.0, camera.fy / z, -camera.fy * cam_p[1] / z**2]])
        cov = jac @ camera.rotation @ sig @ camera.rotation.T @ jac.T + COV_REG * np.eye(2)
        mean = np.array([camera.fx * cam_p[0] / z + camera.cx,
                         camera.fy * cam_p[1] / z + camera.cy])
        opacity = 1.0 / (1.0 + math.exp(-scene.opacity_logits[i]))
        splats.append((z, i, mean, np.linalg.inv(cov), opacity))
    splats.sort(key=lambda s: (s[0], s[1]))

    out = np.zeros((len(pixels), features.shape[1]))
    trans = np.ones(len(pixels))
    for k, (px, py) in enumerate(pixels):
        center = np.array([px + 0.5, py + 0.5])
        t = 1.0
        acc = np.zeros(features.shape[1])
        for _, i, mean, inv, opacity in splats:
            if t < T_MIN:
                break
            d = center - mean
            alpha = min(ALPHA_MAX, opacity * math.exp(-0.5 * float(d @ inv @ d)))
            if alpha < ALPHA_MIN:
                continue
            acc += features[i] * alpha * t
            t *= 1.0 - alpha
        out[k], trans[k] = acc, t
    return out, trans


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class LevelReport:
    level: int
    miou: float
    mask_iou: dict
    consistency: float


@dataclass
class EvalReport:
    levels: list = field(default_factory=list)
    code_bytes: int | None = None
    n_gaussians: int | None = None
    feature_render_s: float | None = None
    class_render_s: float | None = None

    def to_text(self) -> str:
        lines = ["level  mIoU(%)  consistency(%)  masks"]
        for r in self.levels:
            lines.append(f"{r.level:5d}  {100 * r.miou:7.2f}  {100 * r.consistency:14.2f}"
                         f"  {len(r.mask_iou):5d}")
        if self.code_bytes is not None:
            lines.append(f"code table: {self.n_gaussians} gaussians, {self.code_bytes} bytes")
        if self.class_render_s is not None:
            lines.append(f"render: features {self.feature_render_s:.4f}s, "
                         f"class map {self.class_render_s:.4f}s")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["level,mask,iou"]
        for r in self.levels:
            rows.append(f"{r.level},all,{r.miou:.6f}")
            for m, iou in sorted(r.mask_iou.items()):
                rows.append(f"{r.level},{m},{iou:.6f}")
        return "\n".join(rows) + "\n"


def _truth_maps(truth, level):
    if isinstance(truth, MaskPyramid):
        return [truth.level_map(v, level) for v in range(truth.n_views)]
    return [np.asarray(t) for t in truth]


def match_labels(predicted, truth):
    """Greedy one-to-one matching by descending intersection.

    Predicted label 0 never matches; truth label 0 is not a mask. Returns
    {truth id: (pred id, intersection)} plus per-id pixel counts.
    """
    pred = np.concatenate([np.asarray(p, dtype=np.uint64).ravel() for p in predicted])
    gt = np.concatenate([np.asarray(t, dtype=np.uint64).ravel() for t in truth])
    if pred.shape != gt.shape:
        raise ValueError("predicted and truth shapes differ")
    t_ids, t_counts = np.unique(gt[gt != 0], return_counts=True)
    p_ids, p_counts = np.unique(pred[pred != 0], return_counts=True)
    both = (gt != 0) & (pred != 0)
    pairs, inter = np.unique(np.stack([gt[both], pred[both]], 1), axis=0, return_counts=True)
    order = np.lexsort((pairs[:, 1], pairs[:, 0], -inter))
    used_t, used_p, match = set(), set(), {}
    for k in order:
        t, p = int(pairs[k, 0]), int(pairs[k, 1])
        if t in used_t or p in used_p:
            continue
        used_t.add(t)
        used_p.add(p)
        match[t] = (p, int(inter[k]))
    return match, dict(zip(t_ids.tolist(), t_counts.tolist())), dict(
        zip(p_ids.tolist(), p_counts.tolist()))


def pairwise_consistency(predicted, truth) -> float:
    """Rand index over truth-labeled pixels pooled across all views.

    A pair agrees when 'same truth mask' and 'same predicted label' have
    the same answer. Pooling across views makes a label that changes from
    one view to the next count as disagreement.
    """
    p = np.concatenate([np.asarray(x, dtype=np.uint64).ravel() for x in predicted])
    t = np.concatenate([np.asarray(x, dtype=np.uint64).ravel() for x in truth])
    sel = t != 0
    p, t = p[sel], t[sel]
    n = len(t)
    if n < 2:
        return 1.0

    def same(*cols):
        _, c = np.unique(np.stack(cols, 1), axis=0, return_counts=True)
        c = c.astype(np.float64)
        return float((c * (c - 1) / 2).sum())

    pairs = n * (n - 1) / 2
    return (pairs - same(t) - same(p) + 2 * same(t, p)) / pairs


def eval_miou(predicted, truth, level: int) -> LevelReport:
    """mIoU of predicted label images against one truth level.

    ``predicted`` is a list of per-view label images; ``truth`` a
    MaskPyramid or a list of label images. Unmatched truth masks score 0.
    """
    gt = _truth_maps(truth, level)
    predicted = [np.asarray(p) for p in predicted]
    if len(predicted) != len(gt) or any(p.shape != t.shape for p, t in zip(predicted, gt)):
        raise ValueError("predicted and truth shapes differ")
    match, t_count, p_count = match_labels(predicted, gt)
    ious = {}
    for t, n_t in t_count.items():
        if t in match:
            p, inter = match[t]
            ious[t] = inter / (n_t + p_count[p] - inter)
        else:
            ious[t] = 0.0
    miou = float(np.mean(list(ious.values()))) if ious else 1.0
    return LevelReport(level, miou, ious, pairwise_consistency(predicted, gt))


def _shifted_class_map(scene, camera, level, codes, threads):
    # class + 1 on covered pixels so that code 0 stays distinct from empty
    from .rasterizer import render_class_map
    labels, covered = render_class_map(scene, camera, level, codes, threads=threads,
                                       with_coverage=True)
    return np.where(covered, labels.astype(np.uint64) + 1, 0)


def evaluate(scene, cameras, pyramid, codes, *, threads=1) -> EvalReport:
    """Render every view at every level and score it against ``pyramid``."""
    from .rasterizer import render_class_map, render_features
    report = EvalReport(code_bytes=4 * len(codes), n_gaussians=len(codes))
    for level in range(1, pyramid.n_levels + 1):
        preds = [_shifted_class_map(scene, cam, level, codes, threads) for cam in cameras]
        report.levels.append(eval_miou(preds, pyramid, level))
    t0 = time.perf_counter()
    render_features(scene, cameras[0], threads=threads)
    report.feature_render_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    render_class_map(scene, cameras[0], pyramid.n_levels, codes, threads=threads)
    report.class_render_s = time.perf_counter() - t0
    return report


def random_scene(rng, n=20, layout=None, *, spread=0.6, image_size=8, focal=None):
    """Small random scene plus a camera looking at it, for oracle tests."""
    layout = layout or LevelLayout((4, 4))
    focal = focal or image_size * 1.2
    pos = rng.normal(scale=spread, size=(n, 3)) + np.array([0.0, 0.0, 3.0])
    scene = GaussianScene(
        positions=pos,
        log_scales=np.log(rng.uniform(0.1, 0.5, size=(n, 3))),
        rotations=_random_rotation(rng, n),
        opacity_logits=rng.normal(scale=1.5, size=n),
        colors=rng.uniform(size=(n, 3)),
        feature_logits=rng.normal(scale=2.0, size=(n, layout.total_dim)),
        layout=layout,
    )
    cam = Camera(fx=focal, fy=focal, cx=image_size / 2, cy=image_size / 2,
                 width=image_size, height=image_size, near=0.1, far=50.0)
    return scene, cam
