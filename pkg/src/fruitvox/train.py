"""Field optimization on posed RGB + mask frames.

The objective is the sum of the mean squared photometric error and the mean
binary cross-entropy of the accumulated semantic probability. Gradient
routing is asymmetric by construction: the photometric loss updates the
density and color channels, while the semantic loss updates only the
semantic channel and never touches density (the density term of the
compositing weights is treated as a constant in the semantic backward pass).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import field, render
from .field import CH_DENSITY, CH_RGB, CH_SEMANTIC, FieldGrid

SEM_EPS = render.SEM_EPS


class TrainingDiverged(RuntimeError):
    """Raised when the total loss becomes non-finite."""


@dataclass
class TrainConfig:
    iterations: int = 1000
    rays_per_batch: int = 4096
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    samples_per_ray: int = 128

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.rays_per_batch < 1:
            raise ValueError("need at least one ray per batch")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.samples_per_ray < 1:
            raise ValueError("need at least one sample per ray")


@dataclass
class LossReport:
    l_photo: float
    l_sem: float
    l_total: float

    def __post_init__(self):
        for name in ("l_photo", "l_sem", "l_total"):
            if not np.isfinite(getattr(self, name)):
                raise TrainingDiverged(f"{name} is not finite")
        if self.l_photo < 0 or self.l_sem < 0:
            raise ValueError("loss terms must be nonnegative")


def photometric_loss(pred, target) -> float:
    """Mean over rays of the squared L2 color error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction/target batch shapes differ")
    return float(((pred - target) ** 2).sum(axis=-1).mean())


def semantic_loss(pred_prob, target) -> float:
    """Mean binary cross-entropy; predictions are clamped away from {0, 1}."""
    p = np.clip(np.asarray(pred_prob, dtype=np.float64), SEM_EPS, 1.0 - SEM_EPS)
    y = np.asarray(target, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("prediction/target batch shapes differ")
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


class FrameSet:
    """Frames stacked for uniform ray batching over all (frame, pixel) pairs."""

    def __init__(self, frames):
        if not frames:
            raise ValueError("need at least one frame")
        h, w = frames[0].rgb.shape[:2]
        for f in frames:
            if f.rgb.shape[:2] != (h, w):
                raise ValueError("all frames must share one image size")
        self.height, self.width = h, w
        self.n_frames = len(frames)
        self.rgb = np.stack([f.rgb for f in frames]).reshape(self.n_frames, -1, 3)
        self.mask = np.stack([f.mask for f in frames]).reshape(self.n_frames, -1)
        self.rotations = np.stack([f.camera.rotation for f in frames])
        self.positions = np.stack([f.camera.position for f in frames])
        self.fx = np.array([f.camera.fx for f in frames])
        self.fy = np.array([f.camera.fy for f in frames])
        self.cx = np.array([f.camera.cx for f in frames])
        self.cy = np.array([f.camera.cy for f in frames])

    @property
    def total_pixels(self) -> int:
        return self.n_frames * self.height * self.width

    def batch(self, flat_idx, jitter):
        """Rays and targets for flat (frame, pixel) indices.

        Returns (origins, dirs, target_rgb, target_mask, ray_ids) where
        ray_ids is the (frame, py, px) triple per ray for error reporting.
        """
        per = self.height * self.width
        f = flat_idx // per
        p = flat_idx % per
        py, px = p // self.width, p % self.width
        u = px + jitter[:, 0]
        v = py + jitter[:, 1]
        cam_dirs = np.stack(
            [(u - self.cx[f]) / self.fx[f], (v - self.cy[f]) / self.fy[f], np.ones_like(u)],
            axis=1,
        )
        dirs = np.einsum("bij,bj->bi", self.rotations[f], cam_dirs)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = self.positions[f]
        target_rgb = self.rgb[f, p].astype(np.float64)
        target_mask = self.mask[f, p].astype(np.float64)
        return origins, dirs, target_rgb, target_mask, np.stack([f, py, px], axis=1)


def backward(grid: FieldGrid, fwd, target_rgb, target_mask, *,
             include_photometric=True, include_semantic=True, ray_ids=None) -> LossReport:
    """Accumulate loss gradients into the grid buffers; returns the losses.

    `fwd` is a recorded forward pass from render.render_rays(record=True).
    The semantic loss contributes gradients only to the semantic channel.
    """
    b = target_rgb.shape[0]
    pred_rgb = fwd["rgb"]
    pred_prob = fwd["prob"]
    bad = ~(np.isfinite(pred_rgb).all(axis=1) & np.isfinite(pred_prob))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        where = f"ray {i}"
        if ray_ids is not None:
            where += " (frame {}, px {},{})".format(ray_ids[i, 0], ray_ids[i, 2], ray_ids[i, 1])
        raise TrainingDiverged(f"non-finite render output at {where}")

    l_photo = photometric_loss(pred_rgb, target_rgb) if include_photometric else 0.0
    l_sem = semantic_loss(pred_prob, target_mask) if include_semantic else 0.0

    k = fwd["sigma"].shape[1]
    g_act = np.zeros((b, k, field.N_CHANNELS))

    if include_photometric:
        g_rgb_out = 2.0 * (pred_rgb - target_rgb) / b
        g_sigma, g_values = render.composite_backward(
            fwd["delta"], fwd["sample_rgb"], fwd["weights"], fwd["transmittance"],
            fwd["alpha"], g_rgb_out,
        )
        g_act[..., CH_DENSITY] = g_sigma
        g_act[..., CH_RGB] = g_values

    if include_semantic:
        p = pred_prob
        clamped = (p < SEM_EPS) | (p > 1.0 - SEM_EPS)
        pc = np.clip(p, SEM_EPS, 1.0 - SEM_EPS)
        g_prob_out = np.where(clamped, 0.0, (-target_mask / pc + (1.0 - target_mask) / (1.0 - pc)) / b)
        # density is a constant for this path: only the per-sample semantic
        # values receive gradient, never the compositing weights
        g_act[..., CH_SEMANTIC] = fwd["weights"] * g_prob_out[:, None]

    if not fwd["hit"].all():
        g_act[~fwd["hit"]] = 0.0
    field.backward_activated(grid, fwd["pts"].reshape(-1, 3),
                             fwd["act"].reshape(-1, field.N_CHANNELS),
                             g_act.reshape(-1, field.N_CHANNELS))

    return LossReport(l_photo, l_sem, l_photo + l_sem)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_grid(cls, grid: FieldGrid) -> "AdamState":
        # np.zeros is lazy (copy-on-write zero pages): voxels that never
        # receive gradient stay on the shared zero page
        return cls(np.zeros(grid.raw.shape), np.zeros(grid.raw.shape))


def step(grid: FieldGrid, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update from the accumulated gradients."""
    state.t += 1
    from . import kernels

    kernels.adam_step(grid.raw, grid.grad, state.m, state.v, state.t,
                      config.learning_rate, config.beta1, config.beta2, config.epsilon)


def train(frames, config: TrainConfig, grid: FieldGrid | None = None, log_every=0):
    """Run the sample > render > loss > backward > step loop.

    Returns (grid, [LossReport per iteration]). Deterministic for a fixed
    config; `config.iterations == 0` returns the grid unchanged.
    """
    if grid is None:
        grid = field.init_grid(128)
    fs = FrameSet(frames)
    state = AdamState.for_grid(grid)
    rng = np.random.default_rng(config.seed)
    reports: list[LossReport] = []
    for it in range(config.iterations):
        idx = rng.integers(0, fs.total_pixels, size=config.rays_per_batch)
        jitter = rng.random((config.rays_per_batch, 2))
        origins, dirs, t_rgb, t_mask, ray_ids = fs.batch(idx, jitter)
        fwd = render.render_rays(grid, origins, dirs, config.samples_per_ray, rng, record=True)
        field.zero_gradients(grid)
        report = backward(grid, fwd, t_rgb, t_mask, ray_ids=ray_ids)
        step(grid, state, config)
        reports.append(report)
        if log_every and (it + 1) % log_every == 0:
            print(f"iter {it + 1:5d}  photo {report.l_photo:.5f}  sem {report.l_sem:.5f}")
    return grid, reports


def write_loss_csv(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "l_photo", "l_sem", "l_total"])
        for i, r in enumerate(reports):
            writer.writerow([i, repr(r.l_photo), repr(r.l_sem), repr(r.l_total)])
