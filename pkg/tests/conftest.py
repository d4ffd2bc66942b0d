import numpy as np
import pytest

from fruitvox import field, scenegen
from fruitvox.cameras import look_at_camera, sample_hemisphere_cameras

ACCEPTANCE_KEY = pytest.StashKey()


@pytest.fixture
def criterion_reporter(request):
    """Record an acceptance pass/fail line for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def report(name, ok, detail):
        line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        print("\n" + line)
        lines.append(line)
        assert ok, f"{name} failed: {detail}"

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_scene():
    """Six fruits (one touching pair), light foliage; shared by slow-ish tests."""
    spec = scenegen.SceneSpec(seed=11, fruit_count=6, fruit_radius=0.035,
                              crown_radius=0.16, cluster_fraction=0.34,
                              foliage_amplitude=3.0)
    return scenegen.generate_scene(spec)


@pytest.fixture(scope="session")
def small_frames(small_scene):
    cams = sample_hemisphere_cameras(10, 1.0, small_scene.spec.crown_center, seed=5,
                                     width=72, height=72, focal_px=90.0)
    return [scenegen.render_frame(small_scene, c, steps=128) for c in cams]


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def random_grid(rng):
    """8^3 grid with random raw channels, unit-cube bounds."""
    grid = field.init_grid(8)
    grid.raw[:] = rng.normal(scale=1.0, size=grid.raw.shape)
    return grid


@pytest.fixture()
def front_camera():
    return look_at_camera((0.5, 0.5, -1.2), (0.5, 0.5, 0.5), focal_px=96.0,
                          width=64, height=64)


def voxelize_scene(scene, resolution=96, bounds=None):
    """Analytic scene -> FieldGrid via inverse activations (test oracle glue).

    Zero-density nodes take the density-weighted mean content color and
    semantic value so boundary interpolation does not bleed arbitrary
    empty-space values into surface samples (they carry no weight of their
    own, exactly like a trained field).
    """
    if bounds is None:
        bounds = (scene.lo, scene.hi)
    grid = field.init_grid(resolution, bounds=bounds,
                           init_raw_density=-12.0, init_raw_semantic=-12.0)
    pos = grid.node_positions()
    sigma, rgb, frac = scenegen.scene_fields(scene, pos)
    nonzero = sigma > 1e-9
    grid.raw_density[:] = field.softplus_inv(np.maximum(sigma, 1e-9))
    grid.raw_density[~nonzero] = -12.0
    if nonzero.any():
        w = sigma[nonzero]
        rgb[~nonzero] = (rgb[nonzero] * w[:, None]).sum(axis=0) / w.sum()
        frac[~nonzero] = (frac[nonzero] * w).sum() / w.sum()
    grid.raw_rgb[:] = field.logit(np.clip(rgb, 1e-6, 1 - 1e-6))
    grid.raw[:, field.CH_SEMANTIC] = field.logit(np.clip(frac, 1e-6, 1 - 1e-6))
    return grid
