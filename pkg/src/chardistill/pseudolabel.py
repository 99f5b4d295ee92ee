"""Character-structure discovery on unlabeled images.

Pipeline: 2-means intensity binarization, a border-vote polarity fix that
keeps the text side as foreground, density-based clustering of foreground
pixels into per-character masks, and an IoU-driven grid search over the
clustering hyper-parameters.

The clustering is deterministic by construction: points are processed in
canonical row-major order, cluster ids follow discovery order, and a border
point reachable from several clusters always lands in the one discovered
first.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .imaging import ImageBuffer

NOISE = -1

DEFAULT_EPS_GRID = (1.0, 1.5, 2.0, 3.0, 4.0, 6.0)
DEFAULT_MIN_SAMPLES_GRID = (2, 4, 6, 8, 10, 12)


class DegenerateImageError(ValueError):
    """Raised when an image cannot be split into two intensity clusters."""


@dataclasses.dataclass(frozen=True)
class ClusterConfig:
    eps: float = 1.5
    min_samples: int = 4

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")


@dataclasses.dataclass(frozen=True)
class PolarityReport:
    """Border sums and the resulting vote of the polarity selection."""

    left: int
    right: int
    top: int
    bottom: int
    gamma: int
    inverted: bool


@dataclasses.dataclass
class CharMaskSet:
    """Ordered per-character binary masks over one image.

    Masks are {0,1} uint8 arrays of identical shape, pairwise disjoint, and
    ordered by ascending foreground centroid x.
    """

    masks: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.masks)

    def shape(self) -> tuple[int, int] | None:
        return self.masks[0].shape if self.masks else None

    def validate(self) -> None:
        union = None
        for mask in self.masks:
            if mask.ndim != 2:
                raise ValueError("masks must be 2-D")
            if mask.shape != self.masks[0].shape:
                raise ValueError("masks differ in shape")
            vals = np.unique(mask)
            if not np.isin(vals, [0, 1]).all():
                raise ValueError("masks must be {0,1}-valued")
            if not mask.any():
                raise ValueError("empty character mask")
            if union is None:
                union = mask.astype(bool)
            else:
                if (union & mask.astype(bool)).any():
                    raise ValueError("masks overlap")
                union |= mask.astype(bool)


def kmeans2(gray: ImageBuffer) -> tuple[np.ndarray, tuple[float, float]]:
    """1-D 2-means over pixel intensities via Lloyd iterations.

    Centers start at the min and max intensity; a pixel equidistant from
    both centers joins the higher one. Label 1 marks the higher-center
    cluster. Returns the binary assignment map and the (low, high) centers.
    """
    if gray.channels != 1:
        raise ValueError("kmeans2 expects a single-channel image")
    values = gray.data[:, :, 0].ravel()
    if values.min() == values.max():
        raise DegenerateImageError("degenerate intensity distribution")
    c_low, c_high = float(values.min()), float(values.max())
    high = values >= (c_low + c_high) / 2.0
    for _ in range(100):
        c_low = float(values[~high].mean())
        c_high = float(values[high].mean())
        new_high = values >= (c_low + c_high) / 2.0
        if np.array_equal(new_high, high):
            break
        high = new_high
    theta = high.reshape(gray.data.shape[:2]).astype(np.uint8)
    return theta, (c_low, c_high)


def select_text_polarity(theta: np.ndarray) -> tuple[np.ndarray, PolarityReport]:
    """Flip the binarization when at least three borders are mostly cluster-1.

    Border sums over the first/last column (L, R) and first/last row (T, B)
    vote on whether cluster 1 is actually background; three or more votes
    invert the mask.
    """
    theta = np.asarray(theta)
    height, width = theta.shape
    left = int(theta[:, 0].sum())
    right = int(theta[:, -1].sum())
    top = int(theta[0, :].sum())
    bottom = int(theta[-1, :].sum())
    gamma = int(top >= width / 2) + int(bottom >= width / 2) \
        + int(left >= height / 2) + int(right >= height / 2)
    inverted = gamma >= 3
    m_pl = (1 - theta).astype(np.uint8) if inverted else theta.astype(np.uint8)
    report = PolarityReport(left=left, right=right, top=top, bottom=bottom,
                            gamma=gamma, inverted=inverted)
    return m_pl, report


def _neighbor_lists(pts: np.ndarray, eps: float) -> list[np.ndarray]:
    """Indices within eps of each point (self included), in input order."""
    n = len(pts)
    eps2 = eps * eps
    neighbors: list[np.ndarray] = []
    chunk = max(1, int(4e6 // max(n, 1)))
    for start in range(0, n, chunk):
        block = pts[start:start + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        for row in d2 <= eps2:
            neighbors.append(np.flatnonzero(row))
    return neighbors


def dbscan(points: Sequence[tuple[float, float]], cfg: ClusterConfig) -> np.ndarray:
    """Classic DBSCAN with Euclidean distance and deterministic labeling.

    Points are expected deduplicated and in canonical (row-major) order;
    that order drives seed selection and therefore cluster numbering. A
    point is core iff its eps-ball holds at least ``min_samples`` points,
    itself included. Returns one cluster id per point, or ``NOISE``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    neighbors = _neighbor_lists(pts, cfg.eps)
    core = np.array([len(nb) >= cfg.min_samples for nb in neighbors])

    cluster = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != NOISE:
            continue
        stack = [seed]
        labels[seed] = cluster
        while stack:
            j = stack.pop()
            for k in neighbors[j]:
                if labels[k] != NOISE:
                    continue
                labels[k] = cluster
                if core[k]:
                    stack.append(int(k))
        cluster += 1
    return labels


def _disk_offsets(eps: float) -> np.ndarray:
    r = int(np.floor(eps))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= eps * eps
    return np.stack([dy[keep], dx[keep]], axis=1)


def label_mask_clusters(mask: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    """DBSCAN over the foreground pixels of a raster mask.

    Equivalent to :func:`dbscan` on the row-major list of foreground (x, y)
    coordinates, but computed with shifted-array operations: neighbor counts
    by stencil accumulation, core connectivity via a sparse component
    search, and border attachment as a minimum over shifted label maps.
    Returns a label map with 0 for background/noise and ids starting at 1.
    """
    fg = np.asarray(mask) > 0
    height, width = fg.shape
    offsets = _disk_offsets(cfg.eps)
    r = int(np.abs(offsets).max(initial=0))
    pad = np.zeros((height + 2 * r, width + 2 * r), dtype=bool)
    pad[r:r + height, r:r + width] = fg

    counts = np.zeros((height, width), dtype=np.int32)
    for dy, dx in offsets:
        counts += pad[r + dy:r + dy + height, r + dx:r + dx + width]
    core = fg & (counts >= cfg.min_samples)

    core_idx = np.flatnonzero(core.ravel())  # row-major, ascending
    if core_idx.size == 0:
        return np.zeros((height, width), dtype=np.int32)
    lut = np.full(height * width, -1, dtype=np.int64)
    lut[core_idx] = np.arange(core_idx.size)

    rows, cols = [], []
    core_pad = np.zeros_like(pad)
    core_pad[r:r + height, r:r + width] = core
    for dy, dx in offsets:
        if (dy, dx) == (0, 0):
            continue
        shifted = core_pad[r + dy:r + dy + height, r + dx:r + dx + width]
        both = core & shifted
        src = np.flatnonzero(both.ravel())
        if src.size:
            dst = src + dy * width + dx
            rows.append(lut[src])
            cols.append(lut[dst])
    if rows:
        row = np.concatenate(rows)
        col = np.concatenate(cols)
        graph = coo_matrix((np.ones(len(row), dtype=np.int8), (row, col)),
                           shape=(core_idx.size, core_idx.size))
    else:
        graph = coo_matrix((core_idx.size, core_idx.size), dtype=np.int8)
    _, comp = connected_components(graph, directed=False)

    # Renumber components by first appearance in row-major order, matching
    # the discovery order of the sequential algorithm.
    order = np.full(comp.max() + 1, -1, dtype=np.int64)
    next_id = 0
    for c in comp:
        if order[c] < 0:
            order[c] = next_id
            next_id += 1
    core_labels = order[comp]  # 0-based per core pixel

    label_map = np.zeros((height, width), dtype=np.int32)
    label_map.ravel()[core_idx] = core_labels + 1

    # Border points take the smallest cluster id among core neighbors.
    label_pad = np.zeros((height + 2 * r, width + 2 * r), dtype=np.int32)
    label_pad[r:r + height, r:r + width] = label_map
    best = np.full((height, width), np.iinfo(np.int32).max, dtype=np.int32)
    for dy, dx in offsets:
        shifted = label_pad[r + dy:r + dy + height, r + dx:r + dx + width]
        candidate = np.where(shifted > 0, shifted, np.iinfo(np.int32).max)
        best = np.minimum(best, candidate)
    border = fg & (label_map == 0) & (best < np.iinfo(np.int32).max)
    label_map[border] = best[border]
    return label_map


def foreground_points(mask: np.ndarray) -> np.ndarray:
    """Row-major (x, y) coordinates of the foreground pixels."""
    ys, xs = np.nonzero(np.asarray(mask) > 0)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def char_masks_from_seg(m_seg: np.ndarray, cfg: ClusterConfig) -> CharMaskSet:
    """Cluster a text/background mask into per-character masks.

    Noise pixels are dropped; masks are ordered left to right by centroid x.
    When clustering finds nothing but foreground exists, the whole
    foreground is kept as a single mask so downstream consistency training
    degrades to foreground level instead of vanishing.
    """
    m_seg = np.asarray(m_seg)
    label_map = label_mask_clusters(m_seg, cfg)
    n_clusters = int(label_map.max(initial=0))
    if n_clusters == 0:
        fg = (m_seg > 0).astype(np.uint8)
        if fg.any():
            return CharMaskSet([fg])
        return CharMaskSet([])
    masks = []
    for cid in range(1, n_clusters + 1):
        masks.append((label_map == cid).astype(np.uint8))

    def sort_key(mask: np.ndarray):
        ys, xs = np.nonzero(mask)
        return (xs.mean(), ys.mean(), ys[0] * mask.shape[1] + xs[0])

    masks.sort(key=sort_key)
    return CharMaskSet(masks)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return float((a & b).sum()) / union


def mask_set_iou(pred: CharMaskSet, gt: CharMaskSet) -> float:
    """Greedy one-to-one matching score, averaged over the ground-truth masks.

    Pairs are matched in order of descending IoU; unmatched ground-truth
    masks contribute zero.
    """
    if pred.masks and gt.masks and pred.shape() != gt.shape():
        raise ValueError(f"mask dimensions differ: {pred.shape()} vs {gt.shape()}")
    if not gt.masks:
        return 1.0 if not pred.masks else 0.0
    if not pred.masks:
        return 0.0
    pairs = []
    for gi, g in enumerate(gt.masks):
        for pi, p in enumerate(pred.masks):
            iou = binary_iou(p, g)
            if iou > 0:
                pairs.append((-iou, gi, pi))
    pairs.sort()
    used_g: set[int] = set()
    used_p: set[int] = set()
    total = 0.0
    for neg_iou, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        total += -neg_iou
    return total / len(gt.masks)


@dataclasses.dataclass(frozen=True)
class GridPoint:
    eps: float
    min_samples: int
    mean_iou: float


def grid_search(dataset: Iterable[tuple[np.ndarray, CharMaskSet]],
                eps_grid: Sequence[float] = DEFAULT_EPS_GRID,
                min_samples_grid: Sequence[int] = DEFAULT_MIN_SAMPLES_GRID,
                ) -> tuple[ClusterConfig, list[GridPoint]]:
    """Mean clustering IoU for every (eps, min_samples) pair.

    Returns the best configuration (ties broken by smaller eps, then
    smaller min_samples) and the full eps-major table.
    """
    data = list(dataset)
    if not data or not eps_grid or not min_samples_grid:
        raise ValueError("grid_search needs a non-empty dataset and non-empty grids")
    table = []
    best: tuple[float, float, int] | None = None  # (-score, eps, min_samples)
    for eps in eps_grid:
        for ms in min_samples_grid:
            cfg = ClusterConfig(eps=float(eps), min_samples=int(ms))
            scores = [mask_set_iou(char_masks_from_seg(m_seg, cfg), gt)
                      for m_seg, gt in data]
            mean = float(np.mean(scores))
            table.append(GridPoint(eps=float(eps), min_samples=int(ms), mean_iou=mean))
            key = (-mean, float(eps), int(ms))
            if best is None or key < best:
                best = key
    assert best is not None
    return ClusterConfig(eps=best[1], min_samples=best[2]), table


def write_grid_csv(table: Sequence[GridPoint], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("eps,min_samples,mean_iou\n")
        for point in table:
            fh.write(f"{point.eps},{point.min_samples},{point.mean_iou:.6f}\n")
