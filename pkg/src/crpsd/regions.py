"""Adaptive region generation from superpixels.

Superpixels become nodes of a directed k-nearest-neighbour graph over their
(L, a, b, x, y) descriptors. Graph Degree Linkage agglomeration merges them
until no pair of clusters is affine enough, so the number of regions depends
on the image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import rgb_to_lab
from .superpixel import SuperpixelFeatures, label_count, slic_segment, superpixel_features

__all__ = [
    "AffinityGraph",
    "ClusterConfig",
    "RegionPartition",
    "build_knn_graph",
    "gdl_cluster",
    "centerline_superpixels",
    "generate_regions",
    "spatial_scale",
    "format_merge_trace",
]

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 15
    # Clustering stops once the best pair affinity drops below |t|.
    t: float = -0.04
    # sigma^2 = a * mean squared neighbour distance
    a: float = 2.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.a <= 0:
            raise ValueError("a must be positive")

    @property
    def affinity_floor(self) -> float:
        return abs(self.t)


@dataclass(frozen=True)
class AffinityGraph:
    """Directed k-NN graph: ``neighbors[i]`` are the out-neighbours of node i."""

    neighbors: np.ndarray
    weights: np.ndarray

    @property
    def node_count(self) -> int:
        return self.neighbors.shape[0]

    def edges(self):
        for i in range(self.node_count):
            for j, wt in zip(self.neighbors[i], self.weights[i]):
                yield i, int(j), float(wt)

    def dense(self) -> np.ndarray:
        n = self.node_count
        w = np.zeros((n, n))
        rows = np.repeat(np.arange(n), self.neighbors.shape[1])
        w[rows, self.neighbors.ravel()] = self.weights.ravel()
        return w


@dataclass
class RegionPartition:
    region_of: np.ndarray
    region_count: int
    pixel_regions: np.ndarray | None = None
    merges: list = field(default_factory=list)

    def members(self, region: int) -> np.ndarray:
        return np.flatnonzero(self.region_of == region)


def spatial_scale(width: int, height: int) -> float:
    """Factor bringing pixel coordinates onto the 0..100 range of L*."""
    return 100.0 / max(width, height)


def build_knn_graph(features, k: int = 15, a: float = 2.0) -> AffinityGraph:
    """k-NN graph over feature vectors with Gaussian edge weights.

    ``features`` is an (N, D) array. Neighbour ties go to the smaller node id.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 nodes to build a graph")
    kk = min(k, n - 1)
    sq = (x**2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps lower ids first among equal distances
    order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    nd2 = np.take_along_axis(d2, order, axis=1)
    sigma2 = max(a * float(nd2.mean()), SIGMA_FLOOR)
    return AffinityGraph(neighbors=order, weights=np.exp(-nd2 / sigma2))


def gdl_cluster(graph: AffinityGraph, config: ClusterConfig = ClusterConfig()) -> RegionPartition:
    """Graph Degree Linkage agglomeration with an affinity stopping floor.

    The affinity between clusters a and b is::

        1/|a|^2 * 1' W_ab W_ba 1 + 1/|b|^2 * 1' W_ba W_ab 1

    Each step merges the most affine pair (ties: lexicographically smallest
    id pair); the merged cluster keeps the smaller id.
    """
    w = graph.dense()
    n = w.shape[0]
    member = np.eye(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    size = np.ones(n)
    out_to = w.copy()  # out_to[c, j] = sum_{i in c} W[i, j]
    in_from = w.T.copy()  # in_from[c, j] = sum_{i in c} W[j, i]

    def linkage_row(c):
        # s[x] = 1' W_{c,x} W_{x,c} 1 for every cluster x
        prod = out_to[c] * in_from[c]
        return member.astype(np.float64) @ prod

    prod_all = out_to * in_from
    s = prod_all @ member.T.astype(np.float64)  # s[c, x]
    aff = s / size[:, None] ** 2 + s.T / size[None, :] ** 2
    np.fill_diagonal(aff, -np.inf)

    floor = config.affinity_floor
    merges = []
    while alive.sum() > 1:
        upper = np.triu(aff, k=1)
        upper[np.tril_indices(n)] = -np.inf
        flat = int(np.argmax(upper))
        ca, cb = divmod(flat, n)
        best = upper[ca, cb]
        if not np.isfinite(best) or best < floor:
            break
        merges.append((ca, cb, float(best)))
        member[ca] |= member[cb]
        out_to[ca] += out_to[cb]
        in_from[ca] += in_from[cb]
        size[ca] += size[cb]
        alive[cb] = False
        member[cb] = False
        aff[cb, :] = -np.inf
        aff[:, cb] = -np.inf

        row = linkage_row(ca)  # W_{ca,x} W_{x,ca}
        col = (out_to[:, member[ca]] * in_from[:, member[ca]]).sum(axis=1)  # W_{x,ca} W_{ca,x}
        new = row / size[ca] ** 2 + col / size**2
        new[~alive] = -np.inf
        new[ca] = -np.inf
        aff[ca, :] = new
        aff[:, ca] = new

    roots = np.flatnonzero(alive)
    region_of = np.empty(n, dtype=np.int64)
    for rid, r in enumerate(roots):
        region_of[member[r]] = rid
    return RegionPartition(region_of=region_of, region_count=len(roots), merges=merges)


def format_merge_trace(partition: RegionPartition) -> str:
    return "".join(f"{a} {b} {aff:.12g}\n" for a, b, aff in partition.merges)


def generate_regions(
    img: np.ndarray,
    n: int = 300,
    compactness: float = 10.0,
    config: ClusterConfig = ClusterConfig(),
):
    """SLIC + k-NN graph + GDL on an RGB image.

    Returns ``(labels, features, partition)``; ``partition.pixel_regions``
    is filled in.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    labels = slic_segment(img, n=n, compactness=compactness)
    feats = superpixel_features(rgb_to_lab(img), labels)
    if len(feats) < 2:
        partition = RegionPartition(region_of=np.zeros(len(feats), dtype=np.int64), region_count=1)
    else:
        graph = build_knn_graph(feats.vectors(spatial_scale(w, h)), k=config.k, a=config.a)
        partition = gdl_cluster(graph, config)
    partition.pixel_regions = partition.region_of[labels]
    return labels, feats, partition


def centerline_superpixels(
    partition: RegionPartition,
    labels: np.ndarray,
    m: int = 5,
    seed=None,
    features: SuperpixelFeatures | None = None,
) -> list[list[int]]:
    """Pick up to ``m`` superpixels per region lying far from its boundary.

    Superpixels are ranked by the chamfer (taxicab) distance from their mean
    coordinate to the region border; the image border counts as border. The
    ``2m`` deepest form the pool from which ``m`` are drawn without
    replacement. Regions with at most ``m`` superpixels return all of them.
    """
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    if features is None:
        features = superpixel_features(np.zeros(labels.shape + (3,)), labels)
    if len(partition.region_of) != label_count(labels):
        raise ValueError("partition does not match the labeling")
    h, w = labels.shape
    cx = np.clip(np.rint(features.xy[:, 0]).astype(np.int64), 0, w - 1)
    cy = np.clip(np.rint(features.xy[:, 1]).astype(np.int64), 0, h - 1)
    pixel_regions = partition.region_of[labels]

    chosen = []
    for r in range(partition.region_count):
        sps = partition.members(r)
        mask = np.pad(pixel_regions == r, 1)
        depth = ndimage.distance_transform_cdt(mask, metric="taxicab")[1:-1, 1:-1]
        score = depth[cy[sps], cx[sps]]
        ranked = sps[np.lexsort((sps, -score))]
        if len(ranked) <= m:
            chosen.append([int(s) for s in ranked])
            continue
        pool = ranked[: 2 * m]
        pick = rng.choice(len(pool), size=m, replace=False)
        chosen.append([int(s) for s in pool[np.sort(pick)]])
    return chosen
