"""Cascaded counting: every stage against an independent brute-force oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fruitvox import count
from fruitvox.count import (CountConfig, LABEL_MULTI, LABEL_SINGLE, LABEL_TINY,
                            Cluster, fibonacci_sphere)


def brute_force_hausdorff(x, y):
    d = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def brute_force_dbscan(points, eps, min_pts):
    """Independent DBSCAN oracle: O(n^2) density-reachability with the same
    deterministic nearest-core border rule."""
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    core = (d <= eps).sum(axis=1) >= min_pts  # self included
    # connected components over core-core edges
    comp = np.full(n, -1)
    cid = 0
    for i in np.flatnonzero(core):
        if comp[i] >= 0:
            continue
        stack = [i]
        comp[i] = cid
        while stack:
            j = stack.pop()
            for nb in np.flatnonzero(core & (d[j] <= eps)):
                if comp[nb] < 0:
                    comp[nb] = cid
                    stack.append(nb)
        cid += 1
    labels[core] = comp[core]
    for i in np.flatnonzero(~core):
        cores = np.flatnonzero(core)
        if cores.size == 0:
            continue
        nearest = cores[np.argmin(d[i, cores])]
        if d[i, nearest] <= eps:
            labels[i] = comp[nearest]
    return labels


def partitions_equal(a, b):
    """Label arrays describe the same partition up to renumbering."""
    if a.shape != b.shape:
        return False
    if ((a == -1) != (b == -1)).any():
        return False
    mapping = {}
    for la, lb in zip(a, b):
        if la == -1:
            continue
        if mapping.setdefault(la, lb) != lb:
            return False
    return len(set(mapping.values())) == len(mapping)


class TestRemoveOutliers:
    def test_isolated_point_removed(self):
        pts = np.array([[0, 0, 0], [5, 5, 5.0]])
        kept, mask = count.remove_outliers(pts, radius=1.0, min_neighbors=1)
        assert len(kept) == 0

    def test_dense_blob_kept(self, rng):
        pts = rng.normal(scale=0.05, size=(100, 3))
        kept, _ = count.remove_outliers(pts, radius=0.5, min_neighbors=3)
        assert len(kept) == 100

    def test_empty_input(self):
        kept, _ = count.remove_outliers(np.empty((0, 3)), 1.0, 1)
        assert len(kept) == 0

    def test_counts_exclude_self(self):
        pts = np.zeros((3, 3))
        pts[1, 0] = 0.1
        pts[2, 0] = 5.0
        kept, mask = count.remove_outliers(pts, radius=0.5, min_neighbors=1)
        assert mask.tolist() == [True, True, False]


class TestDbscan:
    def test_two_blobs(self, rng):
        a = rng.normal(scale=0.5 / 3, size=(50, 3))
        b = rng.normal(scale=0.5 / 3, size=(50, 3)) + [10, 0, 0]
        pts = np.concatenate([a, b])
        labels = count.dbscan(pts, eps=1.0, min_pts=3)
        assert labels.max() == 1
        assert (labels >= 0).all()
        oracle = brute_force_dbscan(pts, 1.0, 3)
        assert partitions_equal(labels, oracle)

    def test_empty(self):
        assert count.dbscan(np.empty((0, 3)), 1.0, 3).shape == (0,)

    def test_all_noise(self, rng):
        pts = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0], [0, 0, 3], [3, 3, 3.0]])
        labels = count.dbscan(pts, eps=1.0, min_pts=3)
        assert (labels == -1).all()
        assert partitions_equal(labels, brute_force_dbscan(pts, 1.0, 3))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 120))
        centers = rng.uniform(0, 1, size=(max(1, n // 20), 3))
        pts = centers[rng.integers(0, len(centers), n)] + rng.normal(scale=0.04, size=(n, 3))
        eps = float(rng.uniform(0.03, 0.2))
        min_pts = int(rng.integers(1, 6))
        labels = count.dbscan(pts, eps, min_pts)
        oracle = brute_force_dbscan(pts, eps, min_pts)
        assert partitions_equal(labels, oracle)

    def test_permutation_invariance(self, rng):
        pts = rng.normal(size=(80, 3)) * [0.1, 0.1, 0.1] + rng.integers(0, 3, (80, 1))
        labels = count.dbscan(pts, 0.35, 4)
        perm = rng.permutation(80)
        labels_p = count.dbscan(pts[perm], 0.35, 4)
        assert partitions_equal(labels[perm], labels_p)


class TestClusterVolume:
    def test_unit_cube_corners(self):
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                           dtype=np.float64)
        assert count.cluster_volume(corners) == pytest.approx(1.0, abs=1e-9)

    def test_degenerate_sets(self, rng):
        assert count.cluster_volume(rng.random((3, 3))) == 0.0
        coplanar = np.column_stack([rng.random(20), rng.random(20), np.zeros(20)])
        assert count.cluster_volume(coplanar) == 0.0

    def test_sphere_surface_converges_to_ball_volume(self, rng):
        pts = fibonacci_sphere(10_000, 1.0)
        vol = count.cluster_volume(pts)
        assert vol == pytest.approx(4.0 * np.pi / 3.0, rel=0.05)


class TestTriage:
    def _cluster_with_volume(self, volume):
        c = Cluster(np.arange(4), np.zeros((4, 3)), np.zeros(3), volume)
        return c

    def test_band_labels(self):
        cfg = CountConfig(template_radius=1.0, band_lo=0.3, band_hi=1.8,
                          dbscan_eps=1.0, outlier_radius=1.0)
        vt = cfg.template_volume
        assert vt == pytest.approx(4.0 * np.pi / 3.0, rel=1e-12)
        single = self._cluster_with_volume(4.0)  # ratio 0.955
        multi = self._cluster_with_volume(12.0)  # ratio 2.86
        tiny = self._cluster_with_volume(0.1)  # ratio 0.024
        count.triage([single, multi, tiny], cfg)
        assert single.label == LABEL_SINGLE
        assert multi.label == LABEL_MULTI
        assert tiny.label == LABEL_TINY


class TestMergeTiny:
    def _hemisphere(self, center, radius, up=1.0, n=160):
        pts = fibonacci_sphere(n, radius)
        return center + pts[pts[:, 2] * up > 0]

    def test_two_half_shells_merge_to_single(self):
        cfg = CountConfig(template_radius=1.0, dbscan_eps=1.0, outlier_radius=1.0)
        # two half-fruit shells whose centroids sit 0.5 template radii apart
        a_pts = self._hemisphere(np.zeros(3), 1.0, up=1.0)
        b_pts = self._hemisphere(np.array([0.0, 0.0, 0.5]), 1.0, up=-1.0)
        a = Cluster.from_points(np.arange(len(a_pts)), a_pts)
        b = Cluster.from_points(np.arange(len(b_pts)), b_pts)
        assert np.linalg.norm(a.centroid - b.centroid) == pytest.approx(0.5, abs=0.1)
        a.label = b.label = LABEL_TINY
        promoted, discarded = count.merge_tiny([a, b], cfg)
        assert len(promoted) == 1 and not discarded
        assert promoted[0].label == LABEL_SINGLE

    def test_far_small_cluster_discarded(self, rng):
        cfg = CountConfig(template_radius=1.0, dbscan_eps=1.0, outlier_radius=1.0)
        pts = rng.normal(scale=1e-4, size=(5, 3)) + 100.0
        c = Cluster.from_points(np.arange(5), pts)
        c.label = LABEL_TINY
        promoted, discarded = count.merge_tiny([c], cfg)
        assert not promoted and len(discarded) == 1

    def test_no_tiny_clusters_is_noop(self):
        cfg = CountConfig(template_radius=1.0, dbscan_eps=1.0, outlier_radius=1.0)
        assert count.merge_tiny([], cfg) == ([], [])


class TestHausdorff:
    def test_identity(self, rng):
        x = rng.random((40, 3))
        assert count.hausdorff(x, x) == 0.0

    def test_single_pair(self):
        assert count.hausdorff(np.array([[0, 0, 0.0]]), np.array([[3, 4, 0.0]])) == pytest.approx(5.0)

    def test_line_example(self):
        x = np.array([[0, 0, 0], [1, 0, 0.0]])
        y = np.array([[0.4, 0, 0.0]])
        # directed distances are 0.6 (x->y) and 0.4 (y->x)
        assert count.hausdorff(x, y) == pytest.approx(0.6, abs=1e-12)
        assert brute_force_hausdorff(x, y) == pytest.approx(0.6, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            count.hausdorff(np.empty((0, 3)), np.ones((3, 3)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(int(rng.integers(1, 60)), 3))
        y = rng.normal(size=(int(rng.integers(1, 60)), 3))
        assert count.hausdorff(x, y) == pytest.approx(brute_force_hausdorff(x, y), abs=1e-12)

    def test_symmetry_and_triangle_inequality(self, rng):
        x, y, z = (rng.normal(size=(25, 3)) + off for off in (0, 0.5, 1.0))
        assert count.hausdorff(x, y) == count.hausdorff(y, x)
        assert count.hausdorff(x, z) <= count.hausdorff(x, y) + count.hausdorff(y, z) + 1e-9


def sphere_cloud(center, radius, n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


class TestRefineMulti:
    def _config(self, r=1.0):
        return CountConfig(template_radius=r, dbscan_eps=1.0, outlier_radius=1.0)

    @pytest.mark.parametrize("k_true", [1, 2, 3, 4, 5, 6])
    def test_recovers_sphere_group_cardinality(self, k_true, rng):
        """Well-separated sphere shells: refine must return the exact k and a
        brute-force scan over all candidate k confirms the argmin."""
        cfg = self._config()
        centers = np.array([[2.4 * i, 0.15 * (i % 2), 0.0] for i in range(k_true)])
        pts = np.concatenate([sphere_cloud(c, 1.0, 250, rng) for c in centers])
        k, sub_centers = count.refine_multi(pts, cfg)
        assert k == k_true
        assert len(sub_centers) == k_true
        # every estimated center lands within half a radius of a true one
        d = np.linalg.norm(sub_centers[:, None] - centers[None, :], axis=2)
        assert (d.min(axis=1) < 0.5).all()
        # independent argmin check
        template = count.make_template(cfg)
        ds = []
        for kk in range(1, 7):
            cents = count._ward_centroids(pts, kk, cfg.agglomeration_cap)
            placed = (cents[:, None, :] + template[None, :, :]).reshape(-1, 3)
            ds.append(brute_force_hausdorff(placed, pts))
        assert int(np.argmin(ds)) + 1 == k_true

    def test_single_sphere_mislabeled_multi(self, rng):
        cfg = self._config()
        pts = sphere_cloud(np.zeros(3), 1.0, 300, rng)
        k, _ = count.refine_multi(pts, cfg)
        assert k == 1

    def test_coincident_spheres_tie_break_smallest_k(self, rng):
        cfg = self._config()
        pts = sphere_cloud(np.zeros(3), 1.0, 200, rng)
        doubled = np.concatenate([pts, pts])
        k, _ = count.refine_multi(doubled, cfg)
        assert k == 1

    @pytest.mark.parametrize("shell_radius", [0.6, 0.8, 0.95])
    def test_all_points_within_radius_of_centroid_gives_one(self, shell_radius, rng):
        """Shell-like clusters contained in one template radius refine to 1."""
        cfg = self._config(r=1.0)
        pts = sphere_cloud(np.zeros(3), shell_radius, 300, rng)
        pts *= rng.uniform(0.9, 1.0, size=(len(pts), 1))  # thick, noisy shell
        assert (np.linalg.norm(pts - pts.mean(axis=0), axis=1) < 1.0).all()
        k, _ = count.refine_multi(pts, cfg)
        assert k == 1


class TestCountPipeline:
    def test_empty_cloud(self):
        cfg = CountConfig(template_radius=1.0, dbscan_eps=1.0, outlier_radius=1.0)
        rep = count.count(np.empty((0, 3)), cfg)
        assert rep.total == 0
        assert rep.centers.shape == (0, 3)

    def _ten_spheres(self, rng, r=1.0):
        centers = np.array([(4.0 * i, 3.5 * j, 0.0) for i in range(5) for j in range(2)])
        pts = np.concatenate([sphere_cloud(c, r, 300, rng) for c in centers])
        return centers, pts

    def _config(self):
        return CountConfig(template_radius=1.0, dbscan_eps=0.6, dbscan_min_pts=5,
                           outlier_radius=0.6, outlier_min_neighbors=3)

    def test_ten_separated_fruits(self, rng):
        centers, pts = self._ten_spheres(rng)
        rep = count.count(pts, self._config())
        assert rep.total == 10
        assert rep.singles == 10 and rep.multi_clusters == 0
        d = np.linalg.norm(rep.centers[:, None] - centers[None, :], axis=2)
        assert (d.min(axis=1) < 0.25).all()

    def test_touching_pair_counted_as_two(self, rng):
        cfg = self._config()
        centers = np.array([[0, 0, 0], [2.2, 0, 0], [10, 0, 0], [0, 10, 0.0]])
        pts = np.concatenate([sphere_cloud(c, 1.0, 350, rng) for c in centers])
        rep = count.count(pts, cfg)
        assert rep.total == 4
        assert rep.multi_clusters == 1 and rep.fruits_from_multi == 2
        assert rep.singles == 2

    def test_permutation_invariance(self, rng):
        _, pts = self._ten_spheres(rng)
        rep1 = count.count(pts, self._config())
        for seed in range(3):
            perm = np.random.default_rng(seed).permutation(len(pts))
            rep2 = count.count(pts[perm], self._config())
            assert rep2.total == rep1.total

    def test_rigid_motion_invariance(self, rng):
        _, pts = self._ten_spheres(rng)
        cfg = self._config()
        base = count.count(pts, cfg).total
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                        [np.sin(theta), np.cos(theta), 0], [0, 0, 1.0]])
        moved = pts @ rot.T + np.array([5.0, -3.0, 2.0])
        assert count.count(moved, cfg).total == base

    def test_report_roundtrip(self, rng):
        _, pts = self._ten_spheres(rng)
        rep = count.count(pts, self._config())
        back = count.report_from_dict(__import__("json").loads(rep.to_json()))
        assert back.total == rep.total
        np.testing.assert_allclose(back.centers, rep.centers)
        assert back.config == rep.config


class TestTemplate:
    def test_fibonacci_sphere_radius(self):
        pts = fibonacci_sphere(256, 0.03)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 0.03, atol=1e-9)

    def test_deterministic(self):
        np.testing.assert_array_equal(fibonacci_sphere(64, 1.0), fibonacci_sphere(64, 1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        CountConfig(dbscan_eps=0.0)
    with pytest.raises(ValueError):
        CountConfig(band_lo=0.0)
    with pytest.raises(ValueError):
        CountConfig(band_lo=1.2)
    with pytest.raises(ValueError):
        CountConfig(band_hi=0.9)
    with pytest.raises(ValueError):
        CountConfig(max_fruits_per_cluster=1)
