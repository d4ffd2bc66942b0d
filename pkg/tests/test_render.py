"""Rays, stratified sampling, and compositing quadrature."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fruitvox import field, render
from fruitvox.cameras import look_at_camera
from tests.conftest import voxelize_scene


class TestGenerateRay:
    def test_principal_point_gives_optical_axis(self, front_camera):
        ray = render.generate_ray(front_camera, (front_camera.cx, front_camera.cy))
        np.testing.assert_allclose(ray.direction, front_camera.optical_axis, atol=1e-12)

    def test_focal_offset_gives_45_degrees(self):
        cam = look_at_camera((0, 0, 0), (0, 0, 1), focal_px=16.0, width=64, height=64)
        ray = render.generate_ray(cam, (cam.cx + cam.fx, cam.cy))
        angle = np.arccos(np.dot(ray.direction, cam.optical_axis))
        assert angle == pytest.approx(np.pi / 4, abs=1e-12)

    def test_deterministic(self, front_camera):
        r1 = render.generate_ray(front_camera, (10, 20), (0.0, 0.0))
        r2 = render.generate_ray(front_camera, (10, 20), (0.0, 0.0))
        np.testing.assert_array_equal(r1.direction, r2.direction)
        np.testing.assert_array_equal(r1.origin, r2.origin)

    def test_rejects_out_of_bounds_pixel(self, front_camera):
        with pytest.raises(ValueError):
            render.generate_ray(front_camera, (front_camera.width, 0))

    def test_direction_is_unit(self, front_camera):
        ray = render.generate_ray(front_camera, (3, 61), (0.25, 0.75))
        assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-12


class TestStratifiedSamples:
    def test_single_sample_in_range(self):
        ray = render.Ray((0, 0, 0), (0, 0, 1), 1.0, 3.0)
        t, delta = render.stratified_samples(ray, 1, np.random.default_rng(0))
        assert t.shape == (1,) and 1.0 <= t[0] <= 3.0

    def test_midpoints_without_jitter(self):
        ray = render.Ray((0, 0, 0), (0, 0, 1), 0.0, 1.0)
        t, delta = render.stratified_samples(ray, 4)
        np.testing.assert_allclose(t, [0.125, 0.375, 0.625, 0.875])
        # spacings between consecutive midpoints are the bin width; the last
        # spacing is measured to t_far
        np.testing.assert_allclose(delta[:-1], 0.25)
        assert delta[-1] == pytest.approx(0.125)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 64), st.integers(0, 2**31 - 1))
    def test_strictly_increasing_and_positive_spacing(self, k, seed):
        ray = render.Ray((0, 0, 0), (1, 0, 0), 0.5, 2.5)
        t, delta = render.stratified_samples(ray, k, np.random.default_rng(seed))
        assert (np.diff(t) > 0).all() if k > 1 else True
        assert (delta > 0).all()
        assert t[0] >= 0.5 and t[-1] <= 2.5

    def test_one_sample_per_bin(self):
        ray = render.Ray((0, 0, 0), (1, 0, 0), 0.0, 1.0)
        t, _ = render.stratified_samples(ray, 8, np.random.default_rng(5))
        bins = np.floor(t * 8).astype(int)
        np.testing.assert_array_equal(bins, np.arange(8))


class TestComposite:
    def test_empty_space(self):
        sigma = np.zeros((3, 8))
        delta = np.full((3, 8), 0.1)
        values = np.ones((3, 8, 2))
        out, w = render.composite(sigma, delta, values)
        assert not out.any() and not w.any()

    def test_opaque_first_sample(self):
        sigma = np.array([[500.0, 1.0]])
        delta = np.array([[0.1, 0.1]])
        values = np.array([[[0.8], [0.2]]])
        out, w = render.composite(sigma, delta, values)
        assert w[0, 0] == pytest.approx(1.0, abs=1e-9)
        assert out[0, 0] == pytest.approx(0.8, rel=1e-6)

    def test_ln2_closed_form(self):
        # sigma*delta = ln 2 per sample: alpha = 1/2, weights (1/2, 1/4)
        sigma = np.full((1, 2), np.log(2.0) / 0.25)
        delta = np.full((1, 2), 0.25)
        v = np.array([[[1.0], [1.0]]])
        out, w = render.composite(sigma, delta, v)
        np.testing.assert_allclose(w, [[0.5, 0.25]], rtol=1e-12)
        assert out[0, 0] == pytest.approx(0.75, rel=1e-12)

    def test_scalar_channel_shape(self):
        sigma = np.ones((4, 6))
        delta = np.full((4, 6), 0.05)
        vals = np.ones((4, 6))
        out, w = render.composite(sigma, delta, vals)
        assert out.shape == (4,) and w.shape == (4, 6)

    def test_rejects_nonfinite_sigma(self):
        with pytest.raises(ValueError):
            render.composite(np.array([[np.nan, 1.0]]), np.ones((1, 2)), np.ones((1, 2)))

    def test_rejects_negative_sigma(self):
        with pytest.raises(ValueError):
            render.composite(np.array([[-0.1, 1.0]]), np.ones((1, 2)), np.ones((1, 2)))


class TestCompositeInvariants:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 48))
    def test_weight_conservation_and_monotonicity(self, seed, k):
        rng = np.random.default_rng(seed)
        sigma = rng.gamma(1.0, 20.0, size=(4, k))
        delta = rng.uniform(1e-4, 0.05, size=(4, k))
        values = rng.random((4, k, 1))
        _, w, transmittance, _ = render.composite_full(sigma, delta, values)
        np.testing.assert_allclose(
            w.sum(axis=1), 1.0 - np.exp(-(sigma * delta).sum(axis=1)), atol=1e-9)
        assert (w >= 0).all()
        assert (np.diff(transmittance, axis=1) <= 1e-15).all()

    def test_zero_density_refinement_invariance(self):
        rng = np.random.default_rng(9)
        sigma = rng.gamma(1.0, 10.0, size=(1, 6))
        delta = rng.uniform(0.01, 0.1, size=(1, 6))
        j = 3
        sigma[0, j] = 0.0  # the sample being refined must carry zero density
        values = rng.random((1, 6, 3))
        out, _ = render.composite(sigma, delta, values)
        # split the zero-density sample into two half-width zero samples
        sigma2 = np.insert(sigma, j, 0.0, axis=1)
        delta2 = np.insert(delta, j, delta[0, j] / 2, axis=1)
        delta2[0, j + 1] = delta[0, j] / 2
        values2 = np.insert(values, j, values[0, j], axis=1)
        out2, _ = render.composite(sigma2, delta2, values2)
        np.testing.assert_allclose(out, out2, atol=1e-12)


class TestCompositeBackward:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        b, k, c = 3, 7, 2
        sigma = rng.gamma(1.0, 5.0, size=(b, k))
        delta = rng.uniform(0.01, 0.2, size=(b, k))
        values = rng.random((b, k, c))
        g_out = rng.normal(size=(b, c))
        out, w, transmittance, alpha = render.composite_full(sigma, delta, values)
        g_sigma, g_values = render.composite_backward(delta, values, w, transmittance,
                                                      alpha, g_out)
        h = 1e-6
        for bi in range(b):
            for ki in range(k):
                sp = sigma.copy()
                sp[bi, ki] += h
                sm = sigma.copy()
                sm[bi, ki] -= h
                op, *_ = render.composite_full(sp, delta, values)
                om, *_ = render.composite_full(sm, delta, values)
                fd = ((op - om) / (2 * h) * g_out).sum(axis=1)[bi]
                assert abs(fd - g_sigma[bi, ki]) <= 1e-6 + 1e-5 * abs(fd)
                vp = values.copy()
                vp[bi, ki, 0] += h
                vm = values.copy()
                vm[bi, ki, 0] -= h
                op, *_ = render.composite_full(sigma, delta, vp)
                om, *_ = render.composite_full(sigma, delta, vm)
                fd = ((op - om) / (2 * h) * g_out).sum(axis=1)[bi]
                assert abs(fd - g_values[bi, ki, 0]) <= 1e-6 + 1e-5 * abs(fd)


class TestRenderPixel:
    def test_empty_grid_is_background(self, front_camera):
        grid = field.init_grid(8, init_raw_density=-40.0)
        rgb, sem_logit, opacity = render.render_pixel(grid, front_camera, (32, 32), 32)
        assert np.abs(rgb).max() < 1e-12
        assert opacity < 1e-12
        assert sem_logit == pytest.approx(float(field.logit(render.SEM_EPS)), rel=1e-6)

    def test_ray_missing_grid_is_background(self, front_camera):
        grid = field.init_grid(8, init_raw_density=3.0)
        # aim away from the unit cube
        rgb, _, opacity = render.render_pixel(grid, front_camera, (0, 0), 16)
        ray = render.generate_ray(front_camera, (0, 0), (0.5, 0.5))
        if render.clip_to_box(ray, grid.lo, grid.hi) is None:
            assert opacity == 0.0 and not rgb.any()

    def test_seeded_determinism(self, front_camera, random_grid):
        a = render.render_pixel(random_grid, front_camera, (12, 40), 24, seed=9)
        b = render.render_pixel(random_grid, front_camera, (12, 40), 24, seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1] and a[2] == b[2]

    def test_opaque_red_fruit_renders_red(self):
        """Voxelized analytic fruit: ray through its center is fruit-colored
        and semantically confident."""
        from fruitvox import scenegen

        spec = scenegen.SceneSpec(seed=2, fruit_count=1, fruit_radius=0.08,
                                  crown_center=(0.5, 0.5, 0.6), crown_radius=0.1,
                                  foliage_amplitude=0.0, fruit_density=400.0)
        scene = scenegen.generate_scene(spec)
        # pin the fruit above the trunk top and shoot a side-on ray at it
        scene.fruit_centers[0] = (0.5, 0.5, 0.72)
        grid = voxelize_scene(scene, resolution=128)
        cam = look_at_camera((0.5, -1.0, 0.72), (0.5, 0.5, 0.72), focal_px=96.0,
                             width=64, height=64)
        rgb, sem_logit, opacity = render.render_pixel(grid, cam, (32, 32), 256)
        np.testing.assert_allclose(rgb, scenegen.FRUIT_COLOR, atol=0.05)
        prob = 1.0 / (1.0 + np.exp(-sem_logit))
        assert prob >= 0.9
        assert opacity > 0.95


def test_render_image_matches_render_pixel(random_grid, front_camera):
    rgb, prob = render.render_image(random_grid, front_camera, k=16)
    px_rgb, sem_logit, _ = render.render_pixel(random_grid, front_camera, (7, 5), 16)
    np.testing.assert_allclose(rgb[5, 7], px_rgb, atol=1e-12)
