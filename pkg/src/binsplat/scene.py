"""Scene representation, level layout, mask pyramids and packed codes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NestingError

MAX_CODE_BITS = 32
SH_C0 = 0.28209479177387814


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class LevelLayout:
    """Per-level bit widths of the coarse-to-fine code.

    Level 1 (coarsest) occupies the lowest bits of the packed code, so the
    level-l class is simply the code masked to its low ``prefix_width(l)``
    bits.
    """

    level_dims: tuple[int, ...] = (8, 12, 12)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.level_dims)
        object.__setattr__(self, "level_dims", dims)
        if len(dims) < 1:
            raise ValueError("layout needs at least one level")
        if any(d < 1 for d in dims):
            raise ValueError(f"every level width must be >= 1, got {dims}")
        if sum(dims) > MAX_CODE_BITS:
            raise ValueError(f"total width {sum(dims)} exceeds {MAX_CODE_BITS} bits")

    @property
    def n_levels(self) -> int:
        return len(self.level_dims)

    @property
    def total_dim(self) -> int:
        return sum(self.level_dims)

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for d in self.level_dims:
            out.append(acc)
            acc += d
        return tuple(out)

    def _check_level(self, level):
        if not 1 <= level <= self.n_levels:
            raise ValueError(f"level must be in [1, {self.n_levels}], got {level}")

    def level_slice(self, level: int) -> slice:
        self._check_level(level)
        start = self.offsets[level - 1]
        return slice(start, start + self.level_dims[level - 1])

    def prefix_width(self, level: int) -> int:
        self._check_level(level)
        return sum(self.level_dims[:level])

    def prefix_mask(self, level: int) -> int:
        return (1 << self.prefix_width(level)) - 1

    @classmethod
    def parse(cls, text: str) -> "LevelLayout":
        return cls(tuple(int(t) for t in text.replace(" ", "").split(",") if t))


# ---------------------------------------------------------------------------
# packed codes
# ---------------------------------------------------------------------------


def pack_codes(bits, layout: LevelLayout) -> np.ndarray:
    """Pack an (N, D) array of {0,1} into N uint32 codes.

    Component k of the flattened level vector becomes integer bit k.
    """
    bits = np.asarray(bits)
    if bits.ndim != 2 or bits.shape[1] != layout.total_dim:
        raise ValueError(f"expected (N, {layout.total_dim}) bits, got {bits.shape}")
    weights = np.left_shift(np.uint64(1), np.arange(layout.total_dim, dtype=np.uint64))
    packed = (bits.astype(np.uint64) & np.uint64(1)) * weights
    return packed.sum(axis=1, dtype=np.uint64).astype(np.uint32)


def unpack_codes(codes, layout: LevelLayout) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64).reshape(-1)
    shifts = np.arange(layout.total_dim, dtype=np.uint64)
    return ((codes[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)


def pack_code(bits, layout: LevelLayout) -> int:
    bits = np.asarray(bits)
    if bits.shape != (layout.total_dim,):
        raise ValueError(f"expected {layout.total_dim} bits, got shape {bits.shape}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    return int(pack_codes(bits[None], layout)[0])


def unpack_code(code: int, layout: LevelLayout) -> np.ndarray:
    code = int(code)
    if code < 0 or code >> layout.total_dim:
        raise ValueError(f"code {code} does not fit in {layout.total_dim} bits")
    return unpack_codes([code], layout)[0]


def level_class(codes, layout: LevelLayout, level: int):
    """Class^l: the code restricted to the bits of levels 1..l."""
    return np.asarray(codes, dtype=np.uint32) & np.uint32(layout.prefix_mask(level))


@dataclass
class CodeTable:
    codes: np.ndarray
    layout: LevelLayout

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint32).reshape(-1)
        if self.layout.total_dim < MAX_CODE_BITS:
            high = self.codes >> np.uint32(self.layout.total_dim)
            if np.any(high):
                raise ValueError("codes carry bits above the layout width")

    def __len__(self):
        return len(self.codes)

    def classes(self, level: int) -> np.ndarray:
        return level_class(self.codes, self.layout, level)

    def bits(self) -> np.ndarray:
        return unpack_codes(self.codes, self.layout)


# ---------------------------------------------------------------------------
# cameras and Gaussians
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera with an OpenCV-style world-to-camera transform.

    The camera looks down its +z axis; pixel (col, row) has its center at
    (col + 0.5, row + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fx, fy=None,
                width, height, near=0.01, far=100.0):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(fx=fx, fy=fx if fy is None else fy, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, rotation=rot,
                   translation=-rot @ eye, near=near, far=far)

    @property
    def extrinsics(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])


def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero-length quaternion")
    return q / norm


@dataclass
class GaussianScene:
    """Structure-of-arrays store for N Gaussians sharing one layout.

    Rotations are (w, x, y, z) quaternions, scales are stored as logs and
    opacities as logits. ``feature_logits`` are the trainable per-Gaussian
    category features; their sigmoid is what gets composited.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    feature_logits: np.ndarray
    layout: LevelLayout = field(default_factory=LevelLayout)

    def __post_init__(self):
        n = len(np.asarray(self.positions).reshape(-1, 3))
        self.positions = _as_f64(self.positions, (n, 3), "positions")
        self.log_scales = _as_f64(self.log_scales, (n, 3), "log_scales")
        rot = _as_f64(self.rotations, (n, 4), "rotations")
        if n:
            norm = np.linalg.norm(rot, axis=1)
            if np.any(np.abs(norm - 1.0) > 1e-6):
                rot = normalize_quaternions(rot)
        self.rotations = rot
        self.opacity_logits = _as_f64(self.opacity_logits, (n,), "opacity_logits")
        self.colors = _as_f64(self.colors, (n, 3), "colors")
        self.feature_logits = _as_f64(self.feature_logits, (n, self.layout.total_dim),
                                      "feature_logits")

    def __len__(self):
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def features(self) -> np.ndarray:
        return sigmoid(self.feature_logits)

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.positions.copy(), self.log_scales.copy(),
                             self.rotations.copy(), self.opacity_logits.copy(),
                             self.colors.copy(), self.feature_logits.copy(), self.layout)

    def subset(self, indices) -> "GaussianScene":
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianScene(self.positions[idx], self.log_scales[idx], self.rotations[idx],
                             self.opacity_logits[idx], self.colors[idx],
                             self.feature_logits[idx], self.layout)

    def with_layout(self, layout: LevelLayout, feature_logits=None) -> "GaussianScene":
        if feature_logits is None:
            feature_logits = np.zeros((len(self), layout.total_dim))
        return GaussianScene(self.positions, self.log_scales, self.rotations,
                             self.opacity_logits, self.colors, feature_logits, layout)

    @classmethod
    def empty(cls, layout: LevelLayout | None = None) -> "GaussianScene":
        layout = layout or LevelLayout()
        z = np.zeros
        return cls(z((0, 3)), z((0, 3)), z((0, 4)), z(0), z((0, 3)),
                   z((0, layout.total_dim)), layout)


def _as_f64(a, shape, name):
    a = np.array(a, dtype=np.float64)
    if a.size == 0 and np.prod(shape) == 0:
        return a.reshape(shape)
    if a.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


# ---------------------------------------------------------------------------
# mask pyramids
# ---------------------------------------------------------------------------


@dataclass
class MaskPyramid:
    """Per-view stacks of label maps, one map per level.

    ``labels[v]`` is a (L, H, W) uint32 array; 0 means unlabeled. Mask ids
    are shared across views, so a registry entry aggregates every view.
    Construct through :func:`load_masks`, :meth:`from_labels` or
    :func:`enforce_nesting` so the nesting check always runs.
    """

    labels: list
    layout: LevelLayout
    registries: list = field(default_factory=list)
    parents: list = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.labels)

    @property
    def n_levels(self) -> int:
        return self.layout.n_levels

    def level_map(self, view: int, level: int) -> np.ndarray:
        return self.labels[view][level - 1]

    def children(self, level: int) -> dict:
        """Map each level-(l-1) id to the set of its level-l child ids."""
        out: dict = {}
        for child, parent in self.parents[level - 1].items():
            out.setdefault(parent, set()).add(child)
        return out

    @classmethod
    def from_labels(cls, labels, layout: LevelLayout) -> "MaskPyramid":
        stacks = [_as_label_stack(lab, layout) for lab in labels]
        registries, parents = validate_nesting(stacks)
        return cls(stacks, layout, registries, parents)


def _as_label_stack(lab, layout):
    lab = np.asarray(lab)
    if lab.ndim == 2:
        lab = lab[None]
    if lab.ndim != 3 or lab.shape[0] != layout.n_levels:
        raise ValueError(f"expected ({layout.n_levels}, H, W) labels, got {lab.shape}")
    if np.any(lab < 0):
        raise ValueError("labels must be non-negative")
    return np.ascontiguousarray(lab, dtype=np.uint32)


def validate_nesting(stacks):
    """Check NESTING on every view and build registries and parent links.

    Raises :class:`NestingError` at the first offending pixel, scanning
    views in order, then levels coarse to fine, then pixels row-major.
    """
    if not stacks:
        raise ValueError("mask pyramid has no views")
    n_levels = stacks[0].shape[0]
    registries = [dict() for _ in range(n_levels)]
    parents = [dict() for _ in range(n_levels)]
    for v, stack in enumerate(stacks):
        if stack.shape[0] != n_levels:
            raise ValueError(f"view {v} has {stack.shape[0]} levels, expected {n_levels}")
        flat = stack.reshape(n_levels, -1)
        for lv in range(n_levels):
            ids, counts = np.unique(flat[lv], return_counts=True)
            for i, c in zip(ids.tolist(), counts.tolist()):
                if i:
                    registries[lv][i] = registries[lv].get(i, 0) + c
        for lv in range(1, n_levels):
            child, parent = flat[lv], flat[lv - 1]
            bad = np.zeros(child.shape, dtype=bool)
            bad |= (child != 0) & (parent == 0)
            labeled = np.flatnonzero(child)
            if labeled.size:
                ids, first, inv = np.unique(child[labeled], return_index=True,
                                            return_inverse=True)
                ref_parent = parent[labeled][first]
                # a child id already linked in an earlier view keeps that parent
                known = parents[lv]
                ref_parent = np.array([known.get(i, p) for i, p in
                                       zip(ids.tolist(), ref_parent.tolist())],
                                      dtype=np.uint32)
                bad[labeled] |= parent[labeled] != ref_parent[inv]
            if bad.any():
                px = int(np.argmax(bad))
                raise NestingError(v, px, lv + 1,
                                   f"label {int(child[px])} under parent {int(parent[px])}")
            if labeled.size:
                for i, p in zip(ids.tolist(), ref_parent.tolist()):
                    parents[lv][i] = p
    return registries, parents


def enforce_nesting(raw, layout: LevelLayout) -> MaskPyramid:
    """Split masks so that every level-l mask lies inside one level-(l-1) mask.

    Level-l masks are intersected with the (already split) level-(l-1)
    masks; the resulting pieces get new ids 1, 2, ... in lexicographic
    order of (parent id, original id), pooled over all views so ids stay
    consistent between views. Pixels labeled at level l but not at l-1
    become unlabeled.
    """
    stacks = [_as_label_stack(lab, layout).copy() for lab in raw]
    n_levels = layout.n_levels
    for lv in range(1, n_levels):
        keys = []
        for stack in stacks:
            child, parent = stack[lv], stack[lv - 1]
            child[parent == 0] = 0
            sel = child != 0
            keys.append(np.stack([parent[sel], child[sel]], axis=1).astype(np.uint64))
        all_keys = np.concatenate(keys) if keys else np.zeros((0, 2), np.uint64)
        uniq = np.unique(all_keys, axis=0)
        for stack, k in zip(stacks, keys):
            if not len(k):
                continue
            new_ids = _row_lookup(uniq, k) + 1
            stack[lv][stack[lv] != 0] = new_ids.astype(np.uint32)
    return MaskPyramid.from_labels(stacks, layout)


def _row_lookup(table, rows):
    """Index of each row of ``rows`` in the lexicographically sorted ``table``."""
    enc_t = table[:, 0] << np.uint64(32) | table[:, 1]
    enc_r = rows[:, 0] << np.uint64(32) | rows[:, 1]
    return np.searchsorted(enc_t, enc_r)
