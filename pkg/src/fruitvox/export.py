"""Fruit point-cloud extraction from a trained field.

One face of the region of interest is treated as an orthographic image
plane; a perpendicular ray is marched through every pixel in uniform steps
and sample points that clear both the density and the semantic-probability
threshold are kept. Output ordering is canonical: ray index (row-major over
the face lattice), then step.

PLY format: ASCII, properties x y z sigma semantic (float32); see README.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import field
from .field import FieldGrid

PLY_PROPERTIES = ("x", "y", "z", "sigma", "semantic")


class PlyFormatError(ValueError):
    """Raised for malformed PLY files; message carries the line number."""


@dataclass
class ExportConfig:
    lateral_resolution: int = 256
    steps: int = 256
    density_threshold: float = 1.0
    semantic_threshold: float = 0.9
    axis: str = "z"  # march direction; the face lattice spans the other two axes
    roi_lo: np.ndarray | None = None  # default: grid bounds
    roi_hi: np.ndarray | None = None

    def __post_init__(self):
        if self.lateral_resolution < 2 or self.steps < 2:
            raise ValueError("resolutions must be at least 2")
        if self.density_threshold < 0:
            raise ValueError("density threshold must be nonnegative")
        if not 0.0 <= self.semantic_threshold <= 1.0:
            raise ValueError("semantic threshold must be in [0, 1]")
        if self.axis not in ("x", "y", "z"):
            raise ValueError("axis must be one of x, y, z")
        if self.roi_lo is not None:
            self.roi_lo = np.asarray(self.roi_lo, dtype=np.float64)
        if self.roi_hi is not None:
            self.roi_hi = np.asarray(self.roi_hi, dtype=np.float64)
        if self.roi_lo is not None and self.roi_hi is not None and not (self.roi_lo < self.roi_hi).all():
            raise ValueError("ROI must satisfy lo < hi on every axis")


@dataclass
class FruitPointCloud:
    points: np.ndarray  # (P, 3)
    sigma: np.ndarray  # (P,)
    semantic: np.ndarray  # (P,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        self.semantic = np.asarray(self.semantic, dtype=np.float64).reshape(-1)
        if not (self.points.shape[0] == self.sigma.shape[0] == self.semantic.shape[0]):
            raise ValueError("points and per-point attributes must align")

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "FruitPointCloud":
        return cls(np.empty((0, 3)), np.empty(0), np.empty(0))


def _face_axes(axis: str):
    march = "xyz".index(axis)
    lateral = [a for a in range(3) if a != march]
    return march, lateral


def sample_volume(grid: FieldGrid, config: ExportConfig, chunk=262144) -> FruitPointCloud:
    """March orthographic rays through the ROI and keep fruit points."""
    lo = config.roi_lo if config.roi_lo is not None else grid.lo
    hi = config.roi_hi if config.roi_hi is not None else grid.hi
    march, lateral = _face_axes(config.axis)
    res = config.lateral_resolution

    def centers(axis_idx, n):
        return lo[axis_idx] + (np.arange(n) + 0.5) * (hi[axis_idx] - lo[axis_idx]) / n

    u = centers(lateral[0], res)
    v = centers(lateral[1], res)
    w = centers(march, config.steps)
    pts = np.empty((res, res, config.steps, 3))
    pts[..., lateral[0]] = u[:, None, None]
    pts[..., lateral[1]] = v[None, :, None]
    pts[..., march] = w[None, None, :]
    pts = pts.reshape(-1, 3)

    keep_pts, keep_sigma, keep_sem = [], [], []
    for start in range(0, pts.shape[0], chunk):
        block = pts[start : start + chunk]
        raw, inside = field.query_raw(grid, block)
        sigma, _, prob = field.activate(raw, inside)
        keep = (sigma >= config.density_threshold) & (prob >= config.semantic_threshold)
        if keep.any():
            keep_pts.append(block[keep])
            keep_sigma.append(sigma[keep])
            keep_sem.append(prob[keep])
    if not keep_pts:
        return FruitPointCloud.empty()
    return FruitPointCloud(np.concatenate(keep_pts), np.concatenate(keep_sigma),
                           np.concatenate(keep_sem))


def crop(cloud: FruitPointCloud, lo, hi) -> FruitPointCloud:
    """Points inside the closed axis-aligned box; idempotent."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if not (lo < hi).all():
        raise ValueError("degenerate crop box: need lo < hi on every axis")
    keep = ((cloud.points >= lo) & (cloud.points <= hi)).all(axis=1)
    return FruitPointCloud(cloud.points[keep], cloud.sigma[keep], cloud.semantic[keep])


def write_ply(cloud: FruitPointCloud, path):
    with open(path, "w") as fh:
        fh.write("ply\n")
        fh.write("format ascii 1.0\n")
        fh.write("comment fruitvox fruit point cloud\n")
        fh.write(f"element vertex {len(cloud)}\n")
        for prop in PLY_PROPERTIES:
            fh.write(f"property float {prop}\n")
        fh.write("end_header\n")
        data = np.column_stack(
            [cloud.points, cloud.sigma, cloud.semantic]
        ).astype(np.float32)
        for row in data:
            fh.write(" ".join(f"{x:.9g}" for x in row) + "\n")


def read_ply(path) -> FruitPointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()

    def fail(lineno, msg):
        raise PlyFormatError(f"{path}:{lineno}: {msg}")

    if not lines or lines[0].strip() != "ply":
        fail(1, "missing 'ply' magic")
    n_vertex = None
    props = []
    body_start = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                fail(i, f"unsupported format {' '.join(tok[1:])!r}")
        elif tok[0] == "element":
            if tok[1] != "vertex":
                fail(i, f"unsupported element {tok[1]!r}")
            n_vertex = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i
            break
        else:
            fail(i, f"unexpected header token {tok[0]!r}")
    if body_start is None:
        fail(len(lines), "missing end_header")
    if n_vertex is None:
        fail(body_start, "missing 'element vertex' declaration")
    if tuple(props) != PLY_PROPERTIES:
        fail(body_start, f"expected properties {PLY_PROPERTIES}, got {tuple(props)}")
    body = lines[body_start : body_start + n_vertex]
    if len(body) < n_vertex:
        fail(len(lines), f"truncated body: expected {n_vertex} rows, found {len(body)}")
    data = np.empty((n_vertex, 5), dtype=np.float32)
    for j, line in enumerate(body):
        tok = line.split()
        if len(tok) != 5:
            fail(body_start + 1 + j, f"expected 5 values, got {len(tok)}")
        try:
            data[j] = [float(x) for x in tok]
        except ValueError:
            fail(body_start + 1 + j, f"non-numeric vertex row {line!r}")
    return FruitPointCloud(data[:, :3].astype(np.float64), data[:, 3].astype(np.float64),
                           data[:, 4].astype(np.float64))
