"""SLIC over-segmentation and per-superpixel descriptors."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from skimage.measure import label as connected_components

from .imaging import rgb_to_lab

__all__ = [
    "SuperpixelFeatures",
    "slic_segment",
    "enforce_connectivity",
    "superpixel_features",
    "label_count",
]


@dataclass(frozen=True)
class SuperpixelFeatures:
    """Mean colour/position of each superpixel, indexed by label id.

    ``xy`` holds (x, y) = (column, row) means in pixel units.
    """

    lab: np.ndarray
    xy: np.ndarray
    count: np.ndarray

    def __len__(self):
        return len(self.count)

    def vectors(self, spatial_scale: float = 1.0) -> np.ndarray:
        """(K, 5) matrix of (L, a, b, x*scale, y*scale)."""
        return np.hstack([self.lab, self.xy * spatial_scale])


def label_count(labels: np.ndarray) -> int:
    return int(labels.max()) + 1 if labels.size else 0


def _lab_gradient(lab):
    pad = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = pad[1:-1, 2:] - pad[1:-1, :-2]
    dy = pad[2:, 1:-1] - pad[:-2, 1:-1]
    return (dx**2).sum(axis=2) + (dy**2).sum(axis=2)


def _grid_seeds(lab, n):
    h, w = lab.shape[:2]
    step = math.sqrt(h * w / n)
    rows = min(h, max(1, round(h / step)))
    cols = min(w, max(1, round(w / step)))
    ys = ((np.arange(rows) + 0.5) * h / rows).astype(np.int64)
    xs = ((np.arange(cols) + 0.5) * w / cols).astype(np.int64)
    grad = _lab_gradient(lab)
    seeds = []
    for y in ys:
        for x in xs:
            best = (grad[y, x], y, x)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and grad[yy, xx] < best[0]:
                        best = (grad[yy, xx], yy, xx)
            seeds.append((best[1], best[2]))
    return np.array(seeds, dtype=np.float64)


def slic_segment(
    img: np.ndarray,
    n: int = 300,
    compactness: float = 10.0,
    iterations: int = 10,
) -> np.ndarray:
    """Partition an RGB image into roughly ``n`` compact superpixels.

    Returns an ``(H, W)`` int64 label image with ids in ``[0, K)``; every
    superpixel is 4-connected. No randomness is involved.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    if n < 1:
        raise ValueError("n must be at least 1")
    if n > h * w:
        raise ValueError(f"n={n} exceeds the pixel count {h * w}")

    lab = rgb_to_lab(img)
    step = math.sqrt(h * w / n)
    radius = int(math.ceil(step))
    spatial = (compactness / step) ** 2

    seeds = _grid_seeds(lab, n)
    k = len(seeds)
    yi = np.rint(seeds[:, 0]).astype(np.int64)
    xi = np.rint(seeds[:, 1]).astype(np.int64)
    centers = np.hstack([lab[yi, xi], seeds])  # (L, a, b, y, x)

    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    labels = np.full((h, w), -1, dtype=np.int64)
    for _ in range(iterations):
        dist = np.full((h, w), np.inf)
        labels.fill(-1)
        for c in range(k):
            cy, cx = centers[c, 3], centers[c, 4]
            y0, y1 = max(0, int(cy) - radius), min(h, int(cy) + radius + 1)
            x0, x1 = max(0, int(cx) - radius), min(w, int(cx) + radius + 1)
            d_lab = ((lab[y0:y1, x0:x1] - centers[c, :3]) ** 2).sum(axis=2)
            d_xy = (rows[y0:y1] - cy) ** 2 + (cols[:, x0:x1] - cx) ** 2
            d = d_lab + spatial * d_xy
            win = dist[y0:y1, x0:x1]
            closer = d < win
            win[closer] = d[closer]
            labels[y0:y1, x0:x1][closer] = c
        missing = labels < 0
        if missing.any():
            py, px = np.nonzero(missing)
            d = ((lab[py, px][:, None, :] - centers[None, :, :3]) ** 2).sum(axis=2)
            d += spatial * ((py[:, None] - centers[None, :, 3]) ** 2 + (px[:, None] - centers[None, :, 4]) ** 2)
            labels[py, px] = np.argmin(d, axis=1)

        flat = labels.ravel()
        cnt = np.bincount(flat, minlength=k).astype(np.float64)
        feats = np.concatenate(
            [lab.reshape(-1, 3), np.broadcast_to(rows, (h, w)).reshape(-1, 1), np.broadcast_to(cols, (h, w)).reshape(-1, 1)],
            axis=1,
        )
        sums = np.stack([np.bincount(flat, weights=feats[:, j], minlength=k) for j in range(5)], axis=1)
        alive = cnt > 0
        centers[alive] = sums[alive] / cnt[alive, None]

    # drop seeds that ended with no pixels before connectivity repair
    _, labels = np.unique(labels, return_inverse=True)
    return enforce_connectivity(labels.reshape(h, w))


def _component_adjacency(comp):
    pairs = []
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        pairs.append(np.stack([a[diff], b[diff]], axis=1))
    pairs = np.concatenate(pairs)
    pairs = np.concatenate([pairs, pairs[:, ::-1]])
    adj: dict[int, Counter] = {}
    if len(pairs):
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        for (a, b), c in zip(uniq.tolist(), counts.tolist()):
            adj.setdefault(a, Counter())[b] = c
    return adj


def enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Make every label 4-connected.

    The largest component of each label keeps the label. Other fragments
    smaller than a quarter of the mean superpixel area are absorbed by the
    neighbour sharing the longest border; larger fragments get fresh ids.
    Output ids are compacted to ``0..K-1`` in order of the input ids, so a
    connected labeling with contiguous ids is returned unchanged.
    """
    labels = np.asarray(labels, dtype=np.int64)
    h, w = labels.shape
    present = np.unique(labels)
    k = len(present)
    comp = connected_components(labels + 1, connectivity=1, background=0) - 1
    n_comp = int(comp.max()) + 1
    if n_comp == k:
        return np.searchsorted(present, labels).astype(np.int64)

    flat_comp = comp.ravel()
    sizes = np.bincount(flat_comp, minlength=n_comp)
    first = np.full(n_comp, labels.size, dtype=np.int64)
    np.minimum.at(first, flat_comp, np.arange(labels.size))
    comp_label = labels.ravel()[first]

    # anchor = largest component of each label, ties to lowest component id
    anchor = {}
    for c in range(n_comp):
        lbl = int(comp_label[c])
        if lbl not in anchor or sizes[c] > sizes[anchor[lbl]]:
            anchor[lbl] = c
    anchors = set(anchor.values())

    min_size = (h * w / k) / 4.0
    adj = _component_adjacency(comp)
    parent = np.arange(n_comp)
    size = sizes.astype(np.int64).copy()
    small = sorted(
        (c for c in range(n_comp) if c not in anchors and sizes[c] < min_size),
        key=lambda c: (sizes[c], c),
    )
    for c in small:
        if parent[c] != c:
            continue
        border = adj.get(c, Counter())
        border.pop(c, None)
        if not border:
            continue
        target = min(border, key=lambda g: (-border[g], g))
        parent[parent == c] = target
        size[target] += size[c]
        merged = adj.setdefault(target, Counter())
        for g, cnt in border.items():
            if g == target:
                continue
            merged[g] += cnt
            nb = adj[g]
            nb[target] += nb.pop(c, 0)
        merged.pop(c, None)
        adj.pop(c, None)

    out_label = np.empty(n_comp, dtype=np.int64)
    next_id = int(present.max()) + 1
    for c in range(n_comp):
        if parent[c] != c:
            continue
        if c in anchors:
            out_label[c] = comp_label[c]
        else:
            out_label[c] = next_id
            next_id += 1
    out_label = out_label[parent]
    out = out_label[comp]
    _, inv = np.unique(out, return_inverse=True)
    return inv.reshape(h, w).astype(np.int64)


def superpixel_features(lab: np.ndarray, labels: np.ndarray) -> SuperpixelFeatures:
    """Exact per-superpixel means of (L, a, b) and (x, y)."""
    lab = np.asarray(lab, dtype=np.float64)
    labels = np.asarray(labels)
    if lab.shape[:2] != labels.shape:
        raise ValueError(f"image {lab.shape[:2]} and labeling {labels.shape} differ in size")
    k = label_count(labels)
    flat = labels.ravel()
    count = np.bincount(flat, minlength=k)
    ys, xs = np.indices(labels.shape)
    sums = [np.bincount(flat, weights=lab[..., j].ravel(), minlength=k) for j in range(3)]
    sx = np.bincount(flat, weights=xs.ravel().astype(np.float64), minlength=k)
    sy = np.bincount(flat, weights=ys.ravel().astype(np.float64), minlength=k)
    mean_lab = np.stack(sums, axis=1) / count[:, None]
    mean_xy = np.stack([sx, sy], axis=1) / count[:, None]
    return SuperpixelFeatures(lab=mean_lab, xy=mean_xy, count=count)
