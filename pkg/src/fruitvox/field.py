"""Dense voxel field storing density, appearance, and fruit-semantic channels.

One flat float64 array holds the raw (pre-activation) values of all channels,
x-fastest voxel order; a matching array holds accumulated gradients.
Activations fix the value ranges: density through softplus (>= 0), color and
semantic probability through sigmoid ((0, 1)). Queries outside the bounds
return empty space: zero density, black color, semantic logit -inf.

Checkpoint layout (little-endian, see README "File formats"):

    8 bytes   magic b"FVGRID1\\0"
    u32       version (1)
    u32 x 3   resolution rx, ry, rz
    f64 x 3   bounds lo
    f64 x 3   bounds hi
    f64 x N   raw density, x-fastest voxel order (N = rx*ry*rz)
    f64 x 3N  raw rgb, r,g,b per voxel, voxels x-fastest
    f64 x N   raw semantic logit, x-fastest
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit as sigmoid

from . import kernels

MAGIC = b"FVGRID1\0"
VERSION = 1

# columns of the packed raw/grad arrays
CH_DENSITY = 0
CH_RGB = slice(1, 4)
CH_SEMANTIC = 4
N_CHANNELS = 5

SEMANTIC_OOB_LOGIT = -np.inf


class GridFormatError(ValueError):
    """Raised for malformed grid checkpoint files."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_deriv(x):
    return sigmoid(x)


def softplus_inv(y):
    """Inverse of softplus; y must be > 0."""
    y = np.asarray(y, dtype=np.float64)
    safe = np.minimum(y, 30.0)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(safe, 1e-300))))


def sigmoid_deriv(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class FieldSample:
    """Activated field values at one spatial position."""

    position: np.ndarray
    sigma: float
    color: np.ndarray
    semantic_logit: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass
class FieldGrid:
    """Voxel lattice over an axis-aligned box with per-corner raw channels."""

    resolution: np.ndarray  # (3,) int
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)
    raw: np.ndarray  # (N, 5) float64: density, r, g, b, semantic
    grad: np.ndarray = dc_field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.resolution = np.asarray(self.resolution, dtype=np.int64)
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.resolution.shape != (3,) or (self.resolution < 2).any():
            raise ValueError("resolution must be >= 2 on every axis")
        if not (self.lo < self.hi).all():
            raise ValueError("bounds must satisfy lo < hi on every axis")
        n = int(self.resolution.prod())
        if self.raw.shape != (n, N_CHANNELS):
            raise ValueError(f"raw channel array must have shape ({n}, {N_CHANNELS})")
        if self.grad is None:
            self.grad = np.zeros(self.raw.shape)

    @property
    def n_voxels(self) -> int:
        return self.raw.shape[0]

    @property
    def raw_density(self):
        return self.raw[:, CH_DENSITY]

    @property
    def raw_rgb(self):
        return self.raw[:, CH_RGB]

    @property
    def raw_semantic(self):
        return self.raw[:, CH_SEMANTIC]

    @property
    def grad_density(self):
        return self.grad[:, CH_DENSITY]

    @property
    def grad_rgb(self):
        return self.grad[:, CH_RGB]

    @property
    def grad_semantic(self):
        return self.grad[:, CH_SEMANTIC]

    def voxel_size(self):
        return (self.hi - self.lo) / (self.resolution - 1)

    def node_positions(self):
        """All lattice node coordinates, x-fastest, shape (N, 3)."""
        axes = [np.linspace(self.lo[a], self.hi[a], self.resolution[a]) for a in range(3)]
        zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def flat_index(self, ix, iy, iz):
        rx, ry = int(self.resolution[0]), int(self.resolution[1])
        return ix + rx * (iy + ry * iz)


def init_grid(resolution, bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
              init_raw_density=-4.0, init_raw_semantic=-4.0, init_raw_rgb=0.0) -> FieldGrid:
    """Create a grid with constant raw channel values."""
    resolution = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
    if (resolution < 2).any():
        raise ValueError("resolution must be >= 2 on every axis")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    n = int(resolution.prod())
    raw = np.empty((n, N_CHANNELS), dtype=np.float64)
    raw[:, CH_DENSITY] = init_raw_density
    raw[:, CH_RGB] = init_raw_rgb
    raw[:, CH_SEMANTIC] = init_raw_semantic
    return FieldGrid(resolution, lo, hi, raw)


def query_raw(grid: FieldGrid, pts):
    """Interpolated raw channels at pts (P, 3); returns (raw (P, 5), inside (P,))."""
    return kernels.trilinear_gather(grid.raw, grid.resolution, grid.lo, grid.hi, pts)


def activate(raw, inside):
    """Raw interpolants -> (sigma, rgb, semantic probability), zeroed outside."""
    sigma = softplus(raw[:, CH_DENSITY])
    rgb = sigmoid(raw[:, CH_RGB])
    prob = sigmoid(raw[:, CH_SEMANTIC])
    if not inside.all():
        out = ~inside
        sigma[out] = 0.0
        rgb[out] = 0.0
        prob[out] = 0.0
    return sigma, rgb, prob


def forward_activated(grid: FieldGrid, pts):
    """Fused query: activated [sigma, r, g, b, prob] (P, 5) plus inside mask."""
    return kernels.field_forward(grid.raw, grid.resolution, grid.lo, grid.hi, pts)


def backward_activated(grid: FieldGrid, pts, act, upstream_act):
    """Scatter activated-space gradients (chained through the activations)."""
    kernels.field_backward(grid.grad, grid.resolution, grid.lo, grid.hi,
                           pts, act, upstream_act)


def query_many(grid: FieldGrid, pts):
    """Activated field values at pts; returns (sigma, rgb, prob, inside)."""
    act, inside = forward_activated(grid, pts)
    return act[:, CH_DENSITY], act[:, CH_RGB], act[:, CH_SEMANTIC], inside


def query(grid: FieldGrid, x) -> FieldSample:
    """Activated field values at a single position."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    raw, inside = query_raw(grid, x)
    sigma, rgb, _ = activate(raw, inside)
    if inside[0]:
        sem_logit = float(raw[0, CH_SEMANTIC])
    else:
        sem_logit = SEMANTIC_OOB_LOGIT
    return FieldSample(x[0], float(sigma[0]), rgb[0], sem_logit)


def scatter_raw(grid: FieldGrid, pts, upstream_raw):
    """Accumulate raw-space gradients (P, 5) into the grid's gradient buffers."""
    kernels.trilinear_scatter(grid.grad, grid.resolution, grid.lo, grid.hi,
                              pts, upstream_raw)


def scatter_gradient(grid: FieldGrid, x, channel: str, upstream_grad):
    """Backpropagate activated-space gradients at positions x into corner buffers.

    `upstream_grad` is d(loss)/d(activated value at x): shape (P,) for
    "density"/"semantic", (P, 3) for "rgb". Out-of-bounds positions are
    silently skipped.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    raw, inside = query_raw(grid, pts)
    up = np.asarray(upstream_grad, dtype=np.float64)
    full = np.zeros((pts.shape[0], N_CHANNELS), dtype=np.float64)
    if channel == "density":
        full[:, CH_DENSITY] = up.reshape(-1) * softplus_deriv(raw[:, CH_DENSITY])
    elif channel == "rgb":
        full[:, CH_RGB] = up.reshape(-1, 3) * sigmoid_deriv(raw[:, CH_RGB])
    elif channel == "semantic":
        full[:, CH_SEMANTIC] = up.reshape(-1) * sigmoid_deriv(raw[:, CH_SEMANTIC])
    else:
        raise ValueError(f"unknown channel {channel!r}")
    full[~inside] = 0.0
    scatter_raw(grid, pts, full)


def zero_gradients(grid: FieldGrid):
    grid.grad[:] = 0.0


def save_grid(grid: FieldGrid, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<3I", *(int(r) for r in grid.resolution)))
        fh.write(struct.pack("<3d", *grid.lo))
        fh.write(struct.pack("<3d", *grid.hi))
        fh.write(np.ascontiguousarray(grid.raw_density, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(grid.raw_rgb, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(grid.raw_semantic, dtype="<f8").tobytes())


def load_grid(path) -> FieldGrid:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise GridFormatError(f"bad magic {magic!r}; not a fruitvox grid file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise GridFormatError(f"unsupported grid version {version}")
        resolution = struct.unpack("<3I", fh.read(12))
        lo = struct.unpack("<3d", fh.read(24))
        hi = struct.unpack("<3d", fh.read(24))
        n = int(np.prod(resolution))
        body = fh.read()
    expected = n * N_CHANNELS * 8
    if len(body) != expected:
        raise GridFormatError(f"truncated grid file: expected {expected} data bytes, got {len(body)}")
    raw = np.empty((n, N_CHANNELS), dtype=np.float64)
    raw[:, CH_DENSITY] = np.frombuffer(body, dtype="<f8", count=n, offset=0)
    raw[:, CH_RGB] = np.frombuffer(body, dtype="<f8", count=3 * n, offset=n * 8).reshape(n, 3)
    raw[:, CH_SEMANTIC] = np.frombuffer(body, dtype="<f8", count=n, offset=4 * n * 8)
    return FieldGrid(np.asarray(resolution), np.asarray(lo), np.asarray(hi), raw)
