"""Cascaded two-stage fruit counting over an extracted point cloud.

Stage one: radius outlier removal, then DBSCAN, then triage of clusters by
convex-hull volume relative to a template fruit into single / multi / tiny.
Nearby tiny clusters are merged and re-triaged (promoted to singles or
discarded). Stage two: each multi cluster is split agglomeratively into
k = 1..N sub-clusters; a template sphere point set is placed at every
sub-cluster centroid and the candidate k with the smallest symmetric
Hausdorff distance to the cluster points wins (smallest k on ties).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial import ConvexHull, QhullError, cKDTree

LABEL_SINGLE = "single"
LABEL_MULTI = "multi"
LABEL_TINY = "tiny"


@dataclass
class CountConfig:
    outlier_radius: float = 0.012
    outlier_min_neighbors: int = 8
    dbscan_eps: float = 0.012
    dbscan_min_pts: int = 10
    template_radius: float = 0.03
    template_samples: int = 256
    band_lo: float = 0.3
    band_hi: float = 1.8
    max_fruits_per_cluster: int = 6
    hull_vertices_only: bool = False
    # candidate counts whose Hausdorff score is within this relative margin
    # of the minimum count as ties (smallest k wins); 0 = exact ties only
    refine_tie_tolerance: float = 0.0
    agglomeration_cap: int = 4000

    def __post_init__(self):
        if self.dbscan_eps <= 0:
            raise ValueError("dbscan_eps must be positive")
        if self.outlier_radius <= 0:
            raise ValueError("outlier_radius must be positive")
        if self.outlier_min_neighbors < 1 or self.dbscan_min_pts < 1:
            raise ValueError("neighbor minimums must be at least 1")
        if self.template_radius <= 0:
            raise ValueError("template_radius must be positive")
        if self.template_samples < 4:
            raise ValueError("need at least 4 template samples")
        if not 0.0 < self.band_lo < 1.0 < self.band_hi:
            raise ValueError("volume band must satisfy 0 < lo < 1 < hi")
        if self.max_fruits_per_cluster < 2:
            raise ValueError("multi-cluster bound must be at least 2")
        if self.refine_tie_tolerance < 0:
            raise ValueError("refine_tie_tolerance must be nonnegative")

    @property
    def template_volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.template_radius**3


@dataclass
class Cluster:
    indices: np.ndarray
    points: np.ndarray
    centroid: np.ndarray
    volume: float
    label: str = ""

    @classmethod
    def from_points(cls, indices, points) -> "Cluster":
        if len(points) == 0:
            raise ValueError("clusters must be non-empty")
        # canonical member order makes centroids/volumes independent of the
        # input cloud permutation
        order = np.lexsort((points[:, 0], points[:, 1], points[:, 2]))
        points = points[order]
        return cls(np.asarray(indices)[order], points, points.mean(axis=0),
                   cluster_volume(points))


@dataclass
class CountReport:
    total: int
    singles: int
    multi_clusters: int
    fruits_from_multi: int
    tiny_promoted: int
    tiny_discarded: int
    noise_points: int
    centers: np.ndarray
    config: CountConfig

    def to_dict(self) -> dict:
        return {
            "total": int(self.total),
            "singles": int(self.singles),
            "multi_clusters": int(self.multi_clusters),
            "fruits_from_multi": int(self.fruits_from_multi),
            "tiny_promoted": int(self.tiny_promoted),
            "tiny_discarded": int(self.tiny_discarded),
            "noise_points": int(self.noise_points),
            "centers": np.asarray(self.centers, dtype=np.float64).tolist(),
            "config": asdict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_dict(d) -> CountReport:
    return CountReport(
        d["total"], d["singles"], d["multi_clusters"], d["fruits_from_multi"],
        d["tiny_promoted"], d["tiny_discarded"], d["noise_points"],
        np.asarray(d["centers"], dtype=np.float64).reshape(-1, 3),
        CountConfig(**d["config"]),
    )


def fibonacci_sphere(n, radius) -> np.ndarray:
    """Deterministic near-uniform point lattice on a sphere surface."""
    i = np.arange(n)
    phi = np.arccos(1.0 - 2.0 * (i + 0.5) / n)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    pts = np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1
    )
    return radius * pts


def make_template(config: CountConfig) -> np.ndarray:
    return fibonacci_sphere(config.template_samples, config.template_radius)


def remove_outliers(points, radius, min_neighbors):
    """Keep points with at least `min_neighbors` other points within `radius`."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if min_neighbors < 1:
        raise ValueError("min_neighbors must be at least 1")
    if len(points) == 0:
        return points, np.zeros(0, dtype=bool)
    tree = cKDTree(points)
    counts = tree.query_ball_point(points, radius, return_length=True) - 1  # exclude self
    keep = counts >= min_neighbors
    return points[keep], keep


def dbscan(points, eps, min_pts):
    """Density-based clustering; returns labels (−1 = noise).

    Core points have at least min_pts neighbors within eps (self included);
    clusters are the eps-connected components of core points; a non-core
    point within eps of a core joins its nearest core's cluster (a
    deterministic, order-independent border rule). Labels are numbered by
    first appearance in input order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts at least 1")
    tree = cKDTree(points)
    counts = tree.query_ball_point(points, eps, return_length=True)
    core = counts >= min_pts
    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return labels

    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    pairs = tree.query_pairs(eps, output_type="ndarray")
    if pairs.size:
        both_core = core[pairs[:, 0]] & core[pairs[:, 1]]
        for a, b in pairs[both_core]:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[rb] = ra

    comp = np.array([find(i) for i in core_idx])
    labels_for_core = np.full(n, -1, dtype=np.int64)
    next_label = 0
    root_label: dict[int, int] = {}
    for i, root in zip(core_idx, comp):
        if root not in root_label:
            root_label[root] = next_label
            next_label += 1
        labels_for_core[i] = root_label[root]
    labels[core_idx] = labels_for_core[core_idx]

    border = np.flatnonzero(~core)
    if border.size:
        core_tree = cKDTree(points[core_idx])
        dist, nearest = core_tree.query(points[border])
        attach = dist <= eps
        labels[border[attach]] = labels_for_core[core_idx[nearest[attach]]]
    return labels


def clusters_from_labels(points, labels) -> list[Cluster]:
    out = []
    for lbl in range(labels.max() + 1 if labels.size else 0):
        idx = np.flatnonzero(labels == lbl)
        if idx.size:
            out.append(Cluster.from_points(idx, points[idx]))
    return out


def cluster_volume(points) -> float:
    """Convex-hull volume; degenerate sets (<4 points or coplanar) give 0."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 4:
        return 0.0
    try:
        return float(ConvexHull(points).volume)
    except QhullError:
        return 0.0


def triage(clusters, config: CountConfig) -> list[Cluster]:
    """Assign single/multi/tiny labels by volume relative to the template."""
    v_t = config.template_volume
    for c in clusters:
        ratio = c.volume / v_t
        if ratio < config.band_lo:
            c.label = LABEL_TINY
        elif ratio <= config.band_hi:
            c.label = LABEL_SINGLE
        else:
            c.label = LABEL_MULTI
    return clusters


def merge_tiny(tiny_clusters, config: CountConfig):
    """Merge nearby tiny clusters, re-triage, promote or discard.

    Tiny clusters whose centroids are closer than the template radius are
    grouped by single linkage; each merged (or standalone) group passing the
    volume band becomes a single, everything else is discarded.
    """
    if not tiny_clusters:
        return [], []
    cents = np.stack([c.centroid for c in tiny_clusters])
    n = len(tiny_clusters)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    tree = cKDTree(cents)
    for a, b in tree.query_pairs(config.template_radius):
        # query_pairs is inclusive at r; the merge rule wants strictly closer
        if np.linalg.norm(cents[a] - cents[b]) < config.template_radius:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[rb] = ra

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    promoted, discarded = [], []
    v_t = config.template_volume
    for members in groups.values():
        idx = np.concatenate([tiny_clusters[i].indices for i in members])
        pts = np.concatenate([tiny_clusters[i].points for i in members])
        merged = Cluster.from_points(idx, pts)
        ratio = merged.volume / v_t
        if config.band_lo <= ratio <= config.band_hi:
            merged.label = LABEL_SINGLE
            promoted.append(merged)
        else:
            merged.label = LABEL_TINY
            discarded.append(merged)
    return promoted, discarded


def hausdorff(x, y) -> float:
    """Symmetric Hausdorff distance between two non-empty point sets."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("hausdorff distance requires non-empty point sets")
    d_xy = cKDTree(y).query(x)[0].max()
    d_yx = cKDTree(x).query(y)[0].max()
    return float(max(d_xy, d_yx))


def _ward_centroids(points, k, cap):
    """Centroids of a Ward split of `points` into k groups."""
    if k == 1 or len(points) < 2:
        return points.mean(axis=0, keepdims=True)
    pts = points
    if len(pts) > cap:
        sel = np.linspace(0, len(pts) - 1, cap).astype(np.int64)
        pts = pts[sel]
    z = linkage(pts, method="ward")
    lab = fcluster(z, t=min(k, len(pts)), criterion="maxclust")
    return np.stack([pts[lab == g].mean(axis=0) for g in np.unique(lab)])


def hull_surface_samples(points, n_samples=1024):
    """Deterministic uniform sampling of the convex-hull surface.

    Returns the hull vertices plus area-weighted samples on the hull facets;
    falls back to the points themselves for degenerate hulls. Input order
    must be canonical for reproducibility (Cluster.from_points sorts).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 4:
        return points
    try:
        hull = ConvexHull(points)
    except QhullError:
        return points
    tri = points[hull.simplices]  # (F, 3, 3)
    ab = tri[:, 1] - tri[:, 0]
    ac = tri[:, 2] - tri[:, 0]
    areas = 0.5 * np.linalg.norm(np.cross(ab, ac), axis=1)
    total = areas.sum()
    if total <= 0:
        return points[hull.vertices]
    rng = np.random.default_rng(0)
    face = rng.choice(len(areas), size=n_samples, p=areas / total)
    u = rng.random((n_samples, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    samples = tri[face, 0] + u[:, :1] * ab[face] + u[:, 1:] * ac[face]
    return np.concatenate([points[hull.vertices], samples])


def refine_multi(points, config: CountConfig, template=None):
    """Fruit count for a multi cluster; returns (k_star, centroids (k*, 3)).

    For each candidate k the cluster is split agglomeratively (Ward), the
    template sphere is placed at every sub-centroid, and the symmetric
    Hausdorff distance between the union of placed templates and the cluster
    points is scored; the smallest distance wins, smallest k on exact ties.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if template is None:
        template = make_template(config)
    target = points
    if config.hull_vertices_only and len(points) >= 4:
        # the hull restriction scores the template against the cluster's
        # outer envelope (vertices plus uniform facet samples)
        target = hull_surface_samples(points)
    scores = []
    centroids_per_k = []
    for k in range(1, config.max_fruits_per_cluster + 1):
        centroids = _ward_centroids(points, k, config.agglomeration_cap)
        placed = (centroids[:, None, :] + template[None, :, :]).reshape(-1, 3)
        scores.append(hausdorff(placed, target))
        centroids_per_k.append(centroids)
    # under-splitting is penalized sharply while over-splitting costs little,
    # so the smallest k inside the tie margin of the minimum wins
    cutoff = min(scores) * (1.0 + config.refine_tie_tolerance)
    best_k = next(k for k, d in enumerate(scores, start=1) if d <= cutoff)
    return best_k, centroids_per_k[best_k - 1]


def count(cloud, config: CountConfig) -> CountReport:
    """Full cascade; accepts a FruitPointCloud or an (N, 3) array."""
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return CountReport(0, 0, 0, 0, 0, 0, 0, np.empty((0, 3)), config)

    kept, _ = remove_outliers(points, config.outlier_radius, config.outlier_min_neighbors)
    labels = dbscan(kept, config.dbscan_eps, config.dbscan_min_pts)
    noise = int((labels == -1).sum())
    clusters = triage(clusters_from_labels(kept, labels), config)

    singles = [c for c in clusters if c.label == LABEL_SINGLE]
    multis = [c for c in clusters if c.label == LABEL_MULTI]
    tinies = [c for c in clusters if c.label == LABEL_TINY]
    promoted, discarded = merge_tiny(tinies, config)
    singles.extend(promoted)

    template = make_template(config)
    centers = [c.centroid for c in singles]
    fruits_from_multi = 0
    for c in multis:
        k, sub_centroids = refine_multi(c.points, config, template)
        fruits_from_multi += k
        centers.extend(sub_centroids)

    total = len(singles) + fruits_from_multi
    centers_arr = np.stack(centers) if centers else np.empty((0, 3))
    return CountReport(
        total=total,
        singles=len(singles),
        multi_clusters=len(multis),
        fruits_from_multi=fruits_from_multi,
        tiny_promoted=len(promoted),
        tiny_discarded=len(discarded),
        noise_points=noise,
        centers=centers_arr,
        config=config,
    )
