"""Independent oracles and harnesses shared by the test modules.

Nothing here calls into the loss or compositing code under test except
``project`` (for screen-space geometry) and ``composite_forward`` (as the
function whose finite differences are taken).
"""

from __future__ import annotations

import numpy as np

from binsplat.rasterizer import composite_backward, composite_forward, logit_gradients, project
from binsplat.contrastive import PixelBatch, total_loss
from binsplat.scene import LevelLayout

ALPHA_MAX, ALPHA_MIN, T_MIN = 0.99, 1.0 / 255.0, 1e-4


# ---------------------------------------------------------------------------
# loss oracle on continuous F-bar
# ---------------------------------------------------------------------------


def oracle_loss(fbar, feats, anchor, labels, layout: LevelLayout, indivisible=(),
                weights=(10.0, 1.0, 1.0)):
    """Total loss with F-bar taken as a free real-valued input.

    ``anchor`` is the indicator held fixed inside the regularizer. Pair
    distances are explicit Euclidean norms of row differences. A norm
    whose anchored argument is zero sits on a kink; it is held at 0,
    which is the zero-subgradient convention.
    """
    fbar = np.asarray(fbar, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    reg = float(np.sum((anchor - feats) ** 2)) / feats.size
    con = 0.0
    vn = 0.0
    i, j = np.triu_indices(n, k=1)
    for level in range(1, layout.n_levels + 1):
        sl = layout.level_slice(level)
        dim = layout.level_dims[level - 1]
        lab = labels[:, level - 1]
        ok = (lab[i] != 0) & (lab[j] != 0)
        if level > 1:
            par = labels[:, level - 2]
            ok &= par[i] == par[j]
        same = lab[i] == lab[j]
        dist = np.linalg.norm(fbar[i, sl] - fbar[j, sl], axis=1)
        dist[np.all(anchor[i, sl] == anchor[j, sl], axis=1)] = 0.0
        pos, neg = ok & same, ok & ~same
        if pos.any():
            con += dist[pos].mean()
        if neg.any():
            con += (dim - dist[neg]).mean()
        if level > 1:
            parents = [p for (lv, p) in indivisible if lv == level]
            member = np.isin(labels[:, level - 2], parents) & (lab != 0)
            if member.any():
                norm = np.linalg.norm(fbar[member][:, sl], axis=1)
                norm[~anchor[member][:, sl].any(axis=1)] = 0.0
                vn += norm.mean()
    w_reg, w_vn, w_con = weights
    return w_reg * reg + w_vn * vn + w_con * con


def nested_labels(rng, n_pixels, n_parents=2, kids=(2, 1)):
    """Random two-level labels; parent k has ``kids[k]`` children."""
    parent = rng.integers(1, n_parents + 1, size=n_pixels)
    child = np.array([10 * p + rng.integers(kids[p - 1]) for p in parent])
    return np.stack([parent, child], axis=1)


# ---------------------------------------------------------------------------
# branch detection for finite differences
# ---------------------------------------------------------------------------


def branch_state(scene, camera, pixels):
    """Per (pixel, splat) branch code: 0 skipped, 1 blended, 2 clamped, 3 terminated."""
    sp = project(scene, camera)
    centers = np.asarray(pixels, dtype=np.float64) + 0.5
    d = centers[:, None, :] - sp.means[None]
    q = (sp.conic[:, 0] * d[..., 0] ** 2 + 2 * sp.conic[:, 1] * d[..., 0] * d[..., 1]
         + sp.conic[:, 2] * d[..., 1] ** 2)
    raw = sp.opacity * np.exp(-0.5 * q)
    alpha = np.where(raw < ALPHA_MIN, 0.0, np.minimum(raw, ALPHA_MAX))
    t_before = np.cumprod(np.hstack([np.ones((len(centers), 1)), 1 - alpha[:, :-1]]), axis=1)
    state = np.where(raw < ALPHA_MIN, 0, np.where(raw >= ALPHA_MAX, 2, 1))
    state = np.where(t_before < T_MIN, 3, state)
    return sp.index.copy(), state


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------


def analytic_logit_grads(scene, camera, pixels, labels, indivisible, weights):
    sp = project(scene, camera)
    fmap = composite_forward(sp, pixels)
    batch = PixelBatch(labels, fmap.features, scene.layout)
    _, grad = total_loss(batch, indivisible, weights, reg_per_element=True)
    fmap.grad[:] = grad
    g = composite_backward(sp, fmap)
    return logit_gradients(scene, sp, g), fmap.features


def gradient_probes(scene, camera, labels, indivisible, rng, *, n_feature=8, n_opacity=6,
                    h=1e-4, weights=(10.0, 1.0, 1.0)):
    """Compare analytic logit gradients with central differences of the oracle loss.

    Returns (analytic, numeric) pairs for probes that keep every branch
    (binarization, clamp, skip, termination) fixed, and the count of
    probes dropped for flipping one.
    """
    rows, cols = np.mgrid[0:camera.height, 0:camera.width]
    pixels = np.stack([cols.ravel(), rows.ravel()], axis=1)
    (d_feat, d_opac), base_f = analytic_logit_grads(scene, camera, pixels, labels,
                                                     indivisible, weights)
    anchor = (base_f > 0.5).astype(np.float64)
    base_state = branch_state(scene, camera, pixels)

    def phi(s):
        f = composite_forward(project(s, camera), pixels).features
        # straight-through: F-bar moves with F around the anchored bits
        return oracle_loss(anchor + (f - base_f), f, anchor, labels, s.layout,
                           indivisible, weights), f

    def unchanged(s, f):
        if not np.array_equal(f > 0.5, anchor > 0.5):
            return False
        idx, st = branch_state(s, camera, pixels)
        return np.array_equal(idx, base_state[0]) and np.array_equal(st, base_state[1])

    pairs, dropped = [], 0
    n, dim = scene.feature_logits.shape
    probes = [("f", int(rng.integers(n)), int(rng.integers(dim))) for _ in range(n_feature)]
    probes += [("o", int(rng.integers(n)), 0) for _ in range(n_opacity)]
    for kind, i, k in probes:
        vals = []
        ok = True
        for sign in (1, -1):
            s = scene.copy()
            if kind == "f":
                s.feature_logits[i, k] += sign * h
            else:
                s.opacity_logits[i] += sign * h
            v, f = phi(s)
            ok &= unchanged(s, f)
            vals.append(v)
        if not ok:
            dropped += 1
            continue
        numeric = (vals[0] - vals[1]) / (2 * h)
        analytic = d_feat[i, k] if kind == "f" else d_opac[i]
        pairs.append((float(analytic), float(numeric)))
    return pairs, dropped


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------------
# acceptance reporting
# ---------------------------------------------------------------------------

ACCEPTANCE = []


def record(criterion, passed, detail):
    """Log one acceptance result; printed in the terminal summary."""
    ACCEPTANCE.append((str(criterion), bool(passed), detail))
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
    return passed
