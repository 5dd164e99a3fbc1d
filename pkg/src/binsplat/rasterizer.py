"""Tile-binned alpha compositing of Gaussian splats with analytic gradients.

Only features and opacity are differentiable; geometry stays frozen.
All arithmetic is float64.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .scene import Camera, CodeTable, GaussianScene, level_class, pack_codes, unpack_codes

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
COV_REG = 0.3
CHUNK = 1024
EMPTY_T = 0.5


def quaternion_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


@dataclass
class SplatList:
    """Visible splats of one view, sorted front to back.

    ``index`` maps each splat back to its Gaussian. ``extent`` holds the
    half-widths of the axis-aligned box outside which the splat's alpha
    is always below the skip threshold.
    """

    index: np.ndarray
    means: np.ndarray
    cov: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    features: np.ndarray
    colors: np.ndarray
    extent: np.ndarray
    width: int
    height: int
    n_gaussians: int
    n_degenerate: int = 0
    _tiles: dict | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.index)

    @property
    def n_tiles_x(self):
        return (self.width + TILE - 1) // TILE

    @property
    def tiles(self) -> dict:
        """Tile id -> splat positions overlapping it, in depth order."""
        if self._tiles is None:
            self._tiles = _bin_tiles(self)
        return self._tiles


def project(scene: GaussianScene, camera: Camera, features=None) -> SplatList:
    """Project Gaussians to screen space, cull, and sort by depth.

    ``features`` overrides the composited per-Gaussian vectors (default:
    sigmoid of the feature logits).
    """
    if features is None:
        features = scene.features
    features = np.asarray(features, dtype=np.float64)
    n = len(scene)
    pos_c = scene.positions @ camera.rotation.T + camera.translation
    z = pos_c[:, 2]
    keep = (z > camera.near) & (z < camera.far)

    idx = np.flatnonzero(keep)
    pc, zk = pos_c[idx], z[idx]
    rot = quaternion_to_matrix(scene.rotations[idx])
    m = rot * np.exp(scene.log_scales[idx])[:, None, :]
    cov3 = m @ np.swapaxes(m, 1, 2)
    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = camera.fx / zk
    jac[:, 0, 2] = -camera.fx * pc[:, 0] / zk**2
    jac[:, 1, 1] = camera.fy / zk
    jac[:, 1, 2] = -camera.fy * pc[:, 1] / zk**2
    t = jac @ camera.rotation
    cov2 = t @ cov3 @ np.swapaxes(t, 1, 2) + COV_REG * np.eye(2)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    good = np.isfinite(det) & (det > 0) & np.isfinite(a) & np.isfinite(c)
    n_degenerate = int((~good).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        conic = np.stack([c / det, -b / det, a / det], axis=1)

    means = np.stack([camera.fx * pc[:, 0] / zk + camera.cx,
                      camera.fy * pc[:, 1] / zk + camera.cy], axis=1)
    opacity = scene.opacities[idx]
    # alpha >= ALPHA_MIN  <=>  mahalanobis^2 <= 2 ln(255 o)
    with np.errstate(divide="ignore"):
        k = 2.0 * np.log(opacity / ALPHA_MIN)
    good &= k > 0
    kk = np.where(good, k, 0.0)
    extent = np.sqrt(np.stack([kk * np.where(good, a, 0), kk * np.where(good, c, 0)], 1))
    extent = extent * (1 + 1e-9) + 1e-9
    on_image = ((means[:, 0] + extent[:, 0] >= 0.5)
                & (means[:, 0] - extent[:, 0] <= camera.width - 0.5)
                & (means[:, 1] + extent[:, 1] >= 0.5)
                & (means[:, 1] - extent[:, 1] <= camera.height - 0.5))
    good &= on_image

    sel = np.flatnonzero(good)
    order = sel[np.lexsort((idx[sel], zk[sel]))]
    return SplatList(
        index=idx[order], means=means[order], cov=cov2[order], conic=conic[order],
        depth=zk[order], opacity=opacity[order], features=features[idx[order]],
        colors=scene.colors[idx[order]], extent=extent[order],
        width=camera.width, height=camera.height, n_gaussians=n,
        n_degenerate=n_degenerate,
    )


def _pixel_range(splats, axis, size):
    lo = np.ceil(splats.means[:, axis] - splats.extent[:, axis] - 0.5)
    hi = np.floor(splats.means[:, axis] + splats.extent[:, axis] - 0.5)
    return (np.clip(lo, 0, size - 1).astype(np.int64),
            np.clip(hi, 0, size - 1).astype(np.int64))


def _bin_tiles(splats: SplatList) -> dict:
    if not len(splats):
        return {}
    x0, x1 = _pixel_range(splats, 0, splats.width)
    y0, y1 = _pixel_range(splats, 1, splats.height)
    tx0, tx1, ty0, ty1 = x0 // TILE, x1 // TILE, y0 // TILE, y1 // TILE
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    owner = np.repeat(np.arange(len(splats)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[owner] + local % nx[owner]
    ty = ty0[owner] + local // nx[owner]
    tile = ty * splats.n_tiles_x + tx
    order = np.argsort(tile, kind="stable")
    tile, owner = tile[order], owner[order]
    bounds = np.flatnonzero(np.diff(tile)) + 1
    return {int(t[0]): o for t, o in zip(np.split(tile, bounds), np.split(owner, bounds))}


# ---------------------------------------------------------------------------
# per-tile kernels
# ---------------------------------------------------------------------------


def _alpha(splats, ids, px):
    """Alpha matrix (P, S) with skipped entries zeroed, plus the raw Gaussian."""
    d = px[:, None, :] - splats.means[ids][None]
    con = splats.conic[ids]
    q = (con[:, 0] * d[..., 0] ** 2 + 2 * con[:, 1] * d[..., 0] * d[..., 1]
         + con[:, 2] * d[..., 1] ** 2)
    gauss = np.exp(-0.5 * q)
    raw = splats.opacity[ids] * gauss
    alpha = np.minimum(ALPHA_MAX, raw)
    alpha[alpha < ALPHA_MIN] = 0.0
    return alpha, gauss, raw >= ALPHA_MAX


def _transmittance(t_start, alpha):
    full = np.cumprod(np.hstack([t_start[:, None], 1.0 - alpha]), axis=1)
    t_before = full[:, :-1]
    active = t_before >= T_MIN
    return t_before, full[:, 1:], active


def _tile_forward(splats, ids, px, with_color, track_argmax):
    n_pix, dim = len(px), splats.features.shape[1]
    feat = np.zeros((n_pix, dim))
    color = np.zeros((n_pix, 3)) if with_color else None
    trans = np.ones(n_pix)
    last = np.full(n_pix, -1, dtype=np.int64)
    best_w = np.zeros(n_pix)
    best = np.full(n_pix, -1, dtype=np.int64)
    starts = []
    for c0 in range(0, len(ids), CHUNK):
        cid = ids[c0:c0 + CHUNK]
        if not np.any(trans >= T_MIN):
            break
        starts.append(trans)
        alpha, _, _ = _alpha(splats, cid, px)
        t_before, t_after, active = _transmittance(trans, alpha)
        w = np.where(active, alpha * t_before, 0.0)
        feat += w @ splats.features[cid]
        if with_color:
            color += w @ splats.colors[cid]
        if track_argmax:
            j = np.argmax(w, axis=1)
            wj = w[np.arange(n_pix), j]
            upd = wj > best_w
            best_w = np.where(upd, wj, best_w)
            best = np.where(upd, cid[j], best)
        k = active.sum(axis=1)
        hit = k > 0
        trans = np.where(hit, t_after[np.arange(n_pix), np.maximum(k - 1, 0)], trans)
        last = np.where(hit, c0 + k - 1, last)
    return feat, color, trans, last, best, starts


def _tile_backward(splats, ids, px, starts, upstream):
    grad_f = np.zeros((len(ids), upstream.shape[1]))
    grad_o = np.zeros(len(ids))
    carry = np.zeros(len(px))
    for c in reversed(range(len(starts))):
        c0 = c * CHUNK
        cid = ids[c0:c0 + CHUNK]
        alpha, gauss, clamped = _alpha(splats, cid, px)
        t_before, _, active = _transmittance(starts[c], alpha)
        w = np.where(active, alpha * t_before, 0.0)
        s = upstream @ splats.features[cid].T
        sw = s * w
        # sum over later splats j > i of s_j w_j
        suffix = np.cumsum(sw[:, ::-1], axis=1)[:, ::-1] - sw + carry[:, None]
        live = active & (alpha > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            d_alpha = np.where(live, s * t_before - suffix / (1.0 - alpha), 0.0)
        grad_f[c0:c0 + len(cid)] = w.T @ upstream
        grad_o[c0:c0 + len(cid)] = (d_alpha * np.where(clamped, 0.0, gauss)).sum(axis=0)
        carry = carry + sw.sum(axis=1)
    return grad_f, grad_o


# ---------------------------------------------------------------------------
# public compositing API
# ---------------------------------------------------------------------------


@dataclass
class RenderedFeatureMap:
    """Composited features at a set of pixels.

    ``features`` is F_p before binarization; ``grad`` is the dLoss/dF_p
    buffer the caller fills before :func:`composite_backward`.
    """

    pixels: np.ndarray
    features: np.ndarray
    transmittance: np.ndarray
    last_contributor: np.ndarray
    color: np.ndarray | None
    grad: np.ndarray
    splats: SplatList = field(repr=False)
    argmax: np.ndarray | None = None
    _state: list = field(default_factory=list, repr=False)

    @property
    def binary(self) -> np.ndarray:
        return (self.features > 0.5).astype(np.float64)


def _map(fn, items, threads):
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _group_pixels(splats, pixels):
    tile = (pixels[:, 1] // TILE) * splats.n_tiles_x + pixels[:, 0] // TILE
    order = np.argsort(tile, kind="stable")
    bounds = np.flatnonzero(np.diff(tile[order])) + 1
    groups = np.split(order, bounds) if len(order) else []
    return [(int(tile[g[0]]), g) for g in groups]


def composite_forward(splats: SplatList, pixels=None, *, with_color=False,
                      track_argmax=False, threads=1) -> RenderedFeatureMap:
    """Front-to-back composite at ``pixels`` ((P, 2) array of (col, row)).

    ``pixels=None`` renders the full frame in row-major order.
    """
    if pixels is None:
        rows, cols = np.mgrid[0:splats.height, 0:splats.width]
        pixels = np.stack([cols.ravel(), rows.ravel()], axis=1)
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if len(pixels) and (pixels.min() < 0 or pixels[:, 0].max() >= splats.width
                        or pixels[:, 1].max() >= splats.height):
        raise ValueError("pixel coordinates outside the image")
    n_pix, dim = len(pixels), splats.features.shape[1]
    centers = pixels.astype(np.float64) + 0.5
    tiles = splats.tiles
    empty = np.zeros(0, dtype=np.int64)
    groups = _group_pixels(splats, pixels)

    def run(group):
        tile_id, sel = group
        return _tile_forward(splats, tiles.get(tile_id, empty), centers[sel],
                             with_color, track_argmax)

    results = _map(run, groups, threads)
    feat = np.zeros((n_pix, dim))
    color = np.zeros((n_pix, 3)) if with_color else None
    trans = np.ones(n_pix)
    last = np.full(n_pix, -1, dtype=np.int64)
    best = np.full(n_pix, -1, dtype=np.int64) if track_argmax else None
    state = []
    for (tile_id, sel), (f, col, t, lst, b, starts) in zip(groups, results):
        feat[sel], trans[sel], last[sel] = f, t, lst
        if with_color:
            color[sel] = col
        if track_argmax:
            best[sel] = b
        state.append((tile_id, sel, starts))
    return RenderedFeatureMap(pixels, feat, trans, last, color, np.zeros((n_pix, dim)),
                              splats, best, state)


@dataclass
class SplatGradients:
    """dLoss/df_i (activated features) and dLoss/do_i per splat."""

    features: np.ndarray
    opacity: np.ndarray


def composite_backward(splats: SplatList, fmap: RenderedFeatureMap, *, threads=1
                       ) -> SplatGradients:
    """Back-propagate ``fmap.grad`` to per-splat feature and opacity gradients.

    Per-tile partial gradients are reduced in tile order, so the result
    does not depend on ``threads``.
    """
    if fmap.splats is not splats:
        raise ValueError("feature map was not rendered from this splat list")
    tiles = splats.tiles
    upstream = np.asarray(fmap.grad, dtype=np.float64)
    if upstream.shape != fmap.features.shape:
        raise ValueError("gradient buffer shape does not match the feature map")
    centers = fmap.pixels.astype(np.float64) + 0.5
    empty = np.zeros(0, dtype=np.int64)

    def run(item):
        tile_id, sel, starts = item
        return _tile_backward(splats, tiles.get(tile_id, empty), centers[sel], starts,
                              upstream[sel])

    results = _map(run, fmap._state, threads)
    grad_f = np.zeros_like(splats.features)
    grad_o = np.zeros(len(splats))
    for (tile_id, _, starts), (gf, go) in zip(fmap._state, results):
        ids = tiles.get(tile_id, empty)[:len(gf)]
        grad_f[ids] += gf
        grad_o[ids] += go
    return SplatGradients(grad_f, grad_o)


def logit_gradients(scene: GaussianScene, splats: SplatList, grads: SplatGradients):
    """Chain splat gradients through the sigmoids onto per-Gaussian logits."""
    n = len(scene)
    f = splats.features
    d_feat = np.zeros((n, scene.layout.total_dim))
    d_feat[splats.index] = grads.features * f * (1.0 - f)
    o = splats.opacity
    d_opac = np.zeros(n)
    d_opac[splats.index] = grads.opacity * o * (1.0 - o)
    return d_feat, d_opac


# ---------------------------------------------------------------------------
# full-frame renders
# ---------------------------------------------------------------------------


def render_features(scene: GaussianScene, camera: Camera, *, threads=1, features=None):
    """Full-frame F (H, W, D) and final transmittance (H, W)."""
    splats = project(scene, camera, features)
    fmap = composite_forward(splats, threads=threads)
    h, w = camera.height, camera.width
    return fmap.features.reshape(h, w, -1), fmap.transmittance.reshape(h, w)


def render_color(scene: GaussianScene, camera: Camera, *, threads=1):
    splats = project(scene, camera, np.zeros((len(scene), 0)))
    fmap = composite_forward(splats, with_color=True, threads=threads)
    return fmap.color.reshape(camera.height, camera.width, 3)


def render_class_map(scene: GaussianScene, camera: Camera, level: int,
                     codes: CodeTable | None = None, *, threads=1, with_coverage=False):
    """Per-pixel Class^l as a uint32 image.

    Gaussians carry binary codes (from ``codes`` or the thresholded
    activations); the composite is thresholded at 0.5 and packed by
    positional binary-to-decimal mapping. Pixels whose final transmittance
    exceeds 0.5 get label 0. Class 0 is a valid code too; pass
    ``with_coverage`` to also get the boolean coverage image that tells
    the two apart.
    """
    layout = scene.layout
    width = layout.prefix_width(level)
    if codes is None:
        bits = (scene.features > 0.5).astype(np.float64)
    else:
        if len(codes) != len(scene):
            raise ValueError("code table size does not match the scene")
        bits = unpack_codes(codes.codes, layout).astype(np.float64)
    feat, trans = render_features(scene, camera, threads=threads, features=bits[:, :width])
    pix_bits = (feat > 0.5).reshape(-1, width)
    padded = np.zeros((len(pix_bits), layout.total_dim), dtype=np.uint8)
    padded[:, :width] = pix_bits
    labels = level_class(pack_codes(padded, layout), layout, level)
    empty = trans.reshape(-1) > EMPTY_T
    labels[empty] = 0
    labels = labels.reshape(camera.height, camera.width)
    if with_coverage:
        return labels, ~empty.reshape(camera.height, camera.width)
    return labels


def write_ppm(image, path):
    img = np.clip(np.round(np.asarray(image, dtype=np.float32) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.reshape(h, w, 3).tobytes())
