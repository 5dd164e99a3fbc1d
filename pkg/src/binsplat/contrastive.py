"""Progressive multi-level contrastive loss, virtual-negative guidance, total loss.

Distances are taken between binarized level features; their gradients
reach the pre-binarized features through the straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import binary_regularizer, ste_backward, ste_binarize
from .scene import LevelLayout, MaskPyramid


@dataclass
class PixelBatch:
    """Sampled pixels of one view with their labels and rendered features.

    ``labels`` is (P, L) with 0 meaning unlabeled at that level;
    ``features`` is (P, D) pre-binarized F_p.
    """

    labels: np.ndarray
    features: np.ndarray
    layout: LevelLayout

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1, self.layout.n_levels)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(
            -1, self.layout.total_dim)
        if len(self.labels) != len(self.features):
            raise ValueError("labels and features disagree on batch size")
        if len(self.labels) and np.any(self.labels[:, 0] == 0):
            raise ValueError("every batch pixel must be labeled at level 1")

    def __len__(self):
        return len(self.labels)

    @property
    def binary(self):
        return ste_binarize(self.features)


@dataclass
class LevelTerms:
    positive: float = 0.0
    negative: float = 0.0
    n_positive: int = 0
    n_negative: int = 0
    n_skipped: int = 0
    n_excluded: int = 0

    @property
    def value(self):
        return self.positive + self.negative


@dataclass
class LossBreakdown:
    levels: list = field(default_factory=list)
    virtual_negative: list = field(default_factory=list)
    regularizer: float = 0.0
    weights: tuple = (10.0, 1.0, 1.0)
    total: float = 0.0

    def columns(self) -> dict:
        row = {"total": self.total, "reg": self.regularizer}
        for lv, t in enumerate(self.levels, 1):
            row[f"pos{lv}"] = t.positive
            row[f"neg{lv}"] = t.negative
            row[f"skip{lv}"] = t.n_skipped
        for lv, v in enumerate(self.virtual_negative, 1):
            row[f"vn{lv}"] = v
        return row


def _pair_distances(bits):
    """Exact L2 distances between binary rows via Hamming counts."""
    ham = bits @ (1.0 - bits).T
    return np.sqrt(ham + ham.T)


def _distance_grad(bits, dist, coef):
    """Gradient of sum_{p<q} coef_pq * ||b_p - b_q|| w.r.t. each b_p.

    ``coef`` is symmetric; the zero-distance subgradient is 0.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(dist > 0, coef / dist, 0.0)
    return bits * c.sum(axis=1, keepdims=True) - c @ bits


def level_loss(batch: PixelBatch, level: int, *, pair_mask=None):
    """Contrastive term of one level with its gradient w.r.t. F-bar.

    Level 1 contrasts every labeled pair. For l >= 2, pairs in different
    level-(l-1) masks are skipped and pairs with an unlabeled pixel at
    level l are excluded. Positive and negative cases are each averaged
    over their own pair count.
    """
    layout = batch.layout
    sl = layout.level_slice(level)
    dim = layout.level_dims[level - 1]
    bits = batch.binary[:, sl]
    n = len(batch)
    grad = np.zeros_like(batch.features)
    terms = LevelTerms()
    if n < 2:
        return terms, grad

    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    if pair_mask is not None:
        upper &= pair_mask
    lab = batch.labels[:, level - 1]
    labeled = lab != 0
    valid = upper & labeled[:, None] & labeled[None, :]
    same = lab[:, None] == lab[None, :]
    pos = valid & same
    if level == 1:
        neg = valid & ~same
        skip = np.zeros_like(valid)
    else:
        parent = batch.labels[:, level - 2]
        same_parent = parent[:, None] == parent[None, :]
        neg = valid & ~same & same_parent
        skip = valid & ~same & ~same_parent
    terms.n_positive, terms.n_negative = int(pos.sum()), int(neg.sum())
    terms.n_skipped = int(skip.sum())
    terms.n_excluded = int(upper.sum()) - int(valid.sum())

    dist = _pair_distances(bits)
    coef = np.zeros((n, n))
    if terms.n_positive:
        terms.positive = float(dist[pos].sum() / terms.n_positive)
        coef[pos] = 1.0 / terms.n_positive
    if terms.n_negative:
        terms.negative = float((dim - dist[neg]).sum() / terms.n_negative)
        coef[neg] = -1.0 / terms.n_negative
    coef = coef + coef.T
    grad[:, sl] = _distance_grad(bits, dist, coef)
    return terms, grad


def detect_indivisible(pyramid: MaskPyramid) -> set:
    """(level, parent id) for every level-(l-1) mask with exactly one child at level l."""
    out = set()
    for level in range(2, pyramid.n_levels + 1):
        for parent, kids in pyramid.children(level).items():
            if len(kids) == 1:
                out.add((level, parent))
    return out


def virtual_negative_loss(batch: PixelBatch, indivisible: set):
    """Per-level mean of ||F-bar^l_p|| over pixels in positive-only groups.

    Pushing these codes to all-zero keeps them maximally far from the
    all-one virtual negative.
    """
    layout = batch.layout
    values = [0.0] * layout.n_levels
    grad = np.zeros_like(batch.features)
    if not indivisible or not len(batch):
        return values, grad
    bits = batch.binary
    for level in range(2, layout.n_levels + 1):
        parents = {p for (lv, p) in indivisible if lv == level}
        if not parents:
            continue
        member = (np.isin(batch.labels[:, level - 2], list(parents))
                  & (batch.labels[:, level - 1] != 0))
        count = int(member.sum())
        if not count:
            continue
        sl = layout.level_slice(level)
        b = bits[member][:, sl]
        norm = np.linalg.norm(b, axis=1)
        values[level - 1] = float(norm.sum() / count)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(norm[:, None] > 0, b / norm[:, None], 0.0) / count
        grad[np.flatnonzero(member)[:, None], np.arange(sl.start, sl.stop)[None]] = g
    return values, grad


def total_loss(batch: PixelBatch, indivisible=frozenset(), weights=(10.0, 1.0, 1.0),
               *, pair_mask=None, reg_per_element=False):
    """Weighted sum of regularizer, virtual-negative and level terms.

    Returns the breakdown and dLoss/dF_p for every batch pixel.
    """
    w_reg, w_vn, w_con = weights
    reg, grad = binary_regularizer(batch.features, reg_per_element)
    grad = w_reg * grad
    vn, vn_grad = virtual_negative_loss(batch, indivisible)
    grad_bar = w_vn * vn_grad
    levels = []
    for level in range(1, batch.layout.n_levels + 1):
        terms, g = level_loss(batch, level, pair_mask=pair_mask)
        levels.append(terms)
        grad_bar += w_con * g
    grad = grad + ste_backward(grad_bar)
    total = w_reg * reg + w_vn * sum(vn) + w_con * sum(t.value for t in levels)
    return LossBreakdown(levels, vn, reg, tuple(weights), float(total)), grad
