"""Synthetic orchard scenes with exact ground truth.

A scene is a trunk cylinder, a noise-modulated foliage blob, and spherical
fruits packed into the crown; all densities are analytic, so frames rendered
from it are an exact oracle: RGB is composited with the same quadrature the
field renderer uses, and a mask pixel is set iff the accumulated fruit
fraction along its ray exceeds 0.5 (which requires an actual ray-sphere
intersection).

Dataset directory layout (see README "File formats"):

    images/frame_0000.png   8-bit RGB
    masks/frame_0000.png    8-bit grayscale, 0 or 255
    transforms.json         fl_x fl_y cx cy w h + per-frame file_path,
                            mask_path, transform_matrix (4x4 row-major c2w)
    gt_fruits.json          fruit centers, radius, count
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels, render
from .cameras import Camera, sample_hemisphere_cameras  # noqa: F401  (re-export)

SCENE_LO = np.zeros(3)
SCENE_HI = np.ones(3)

FRUIT_COLOR = np.array([0.82, 0.12, 0.10])
TRUNK_COLOR = np.array([0.36, 0.22, 0.10])
FOLIAGE_COLOR = np.array([0.14, 0.42, 0.12])

# non-clustered fruits get this many radii of center separation (spec floor: 2)
MIN_SEPARATION_FACTOR = 2.4
# clustered groups: pairwise member separation, in fruit radii (within the
# [1.0, 1.6] touching-group envelope)
GROUP_SEPARATION_RANGE = (1.35, 1.6)
MAX_PLACEMENT_ATTEMPTS = 10_000

NOISE_RES = (14, 28)
NOISE_WEIGHTS = (0.65, 0.35)
NOISE_GAP = 0.35  # foliage density vanishes where remapped noise is below this
FOLIAGE_BAKE_RES = 96  # the foliage field is trilinear over this baked lattice


class PackingError(RuntimeError):
    """Fruit placement could not satisfy the separation constraints."""


@dataclass
class SceneSpec:
    seed: int = 0
    fruit_count: int = 50
    fruit_radius: float = 0.03
    crown_center: np.ndarray = dc_field(default_factory=lambda: np.array([0.5, 0.5, 0.62]))
    crown_radius: float = 0.24
    cluster_fraction: float = 0.2
    trunk_radius: float = 0.018
    trunk_height: float = 0.58
    foliage_amplitude: float = 6.0
    fruit_density: float = 60.0
    trunk_density: float = 80.0

    def __post_init__(self):
        self.crown_center = np.asarray(self.crown_center, dtype=np.float64)
        if self.fruit_count < 0:
            raise ValueError("fruit_count must be nonnegative")
        if self.fruit_radius <= 0:
            raise ValueError("fruit_radius must be positive")
        if not 0.0 <= self.cluster_fraction <= 1.0:
            raise ValueError("cluster_fraction must be in [0, 1]")
        if self.crown_radius <= 0 or self.trunk_radius <= 0:
            raise ValueError("primitive radii must be positive")


@dataclass
class Scene:
    spec: SceneSpec
    fruit_centers: np.ndarray  # (F, 3)
    fruit_groups: np.ndarray  # (F,) group id, -1 for ungrouped fruits
    foliage_lattice: tuple  # (values (n^3, 2): density, color modulation; res)
    lo: np.ndarray = dc_field(default_factory=lambda: SCENE_LO.copy())
    hi: np.ndarray = dc_field(default_factory=lambda: SCENE_HI.copy())

    @property
    def trunk_z_range(self):
        top = float(self.spec.crown_center[2])
        return top - self.spec.trunk_height, top

    def content_bounds(self):
        """Tight box outside which the density is exactly zero.

        Covers the crown sphere (plus one baked-lattice cell of interpolation
        spill), the trunk cylinder, and every fruit sphere, clamped to the
        scene box.
        """
        spec = self.spec
        margin = 2.0 / FOLIAGE_BAKE_RES
        crown_lo = spec.crown_center - (spec.crown_radius + margin)
        crown_hi = spec.crown_center + (spec.crown_radius + margin)
        z_lo, z_hi = self.trunk_z_range
        trunk_lo = np.array([spec.crown_center[0] - spec.trunk_radius,
                             spec.crown_center[1] - spec.trunk_radius, z_lo])
        trunk_hi = np.array([spec.crown_center[0] + spec.trunk_radius,
                             spec.crown_center[1] + spec.trunk_radius, z_hi])
        lo = np.minimum(crown_lo, trunk_lo)
        hi = np.maximum(crown_hi, trunk_hi)
        if len(self.fruit_centers):
            lo = np.minimum(lo, self.fruit_centers.min(axis=0) - spec.fruit_radius)
            hi = np.maximum(hi, self.fruit_centers.max(axis=0) + spec.fruit_radius)
        return np.maximum(self.lo, lo), np.minimum(self.hi, hi)


@dataclass
class PosedFrame:
    camera: Camera
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        h, w = self.rgb.shape[:2]
        if (w, h) != (self.camera.width, self.camera.height):
            raise ValueError("rgb dimensions do not match camera")
        if self.mask.shape != (h, w):
            raise ValueError("mask dimensions do not match rgb")
        vals = np.unique(self.mask)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("mask must be binary")


def _noise_lattice(rng, res):
    return rng.random((res**3, 1)), (res, res, res)


def _sample_noise(lattices, weights, pts):
    total = np.zeros(pts.shape[0])
    for (values, res), w in zip(lattices, weights):
        out, _ = kernels.trilinear_gather(values, res, SCENE_LO, SCENE_HI,
                                          np.clip(pts, 0.0, 1.0))
        total += w * out[:, 0]
    return total


def _uniform_in_ball(rng, center, radius):
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    return center + radius * rng.random() ** (1.0 / 3.0) * v


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _group_members(rng, anchor, size, side):
    """Member centers for a touching group with all pairwise separations = side."""
    if size == 2:
        u = _random_unit(rng)
        return np.stack([anchor, anchor + side * u])
    # equilateral triangle with side `side` in a random plane through anchor
    u = _random_unit(rng)
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    circum = side / np.sqrt(3.0)
    angles = np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
    return anchor + circum * (np.outer(np.cos(angles), e1) + np.outer(np.sin(angles), e2))


def _group_sizes(rng, target):
    sizes = []
    rem = target
    while rem >= 2:
        if rem == 2 or rem == 4:
            s = 2
        elif rem == 3:
            s = 3
        else:
            s = 3 if rng.random() < 0.5 else 2
        sizes.append(s)
        rem -= s
    return sizes


def _bake_foliage(spec: SceneSpec, rng) -> tuple:
    """Evaluate the two-octave foliage noise onto one dense lattice.

    Channel 0 is the foliage density (crown envelope times gappy noise
    occupancy), channel 1 a color-modulation factor; the baked trilinear
    field IS the scene's foliage definition.
    """
    lattices = [_noise_lattice(rng, r) for r in NOISE_RES]
    color_lattice = _noise_lattice(rng, NOISE_RES[0])
    n = FOLIAGE_BAKE_RES
    axes = np.linspace(0.0, 1.0, n)
    zz, yy, xx = np.meshgrid(axes, axes, axes, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    d2 = ((pts - spec.crown_center) ** 2).sum(axis=1)
    envelope = np.maximum(0.0, 1.0 - d2 / spec.crown_radius**2)
    noise = _sample_noise(lattices, NOISE_WEIGHTS, pts)
    occupancy = np.clip((noise - NOISE_GAP) / (1.0 - NOISE_GAP), 0.0, 1.0)
    density = spec.foliage_amplitude * envelope * occupancy**2
    mod = _sample_noise([color_lattice], (1.0,), pts)
    return np.stack([density, mod], axis=1), (n, n, n)


def generate_scene(spec: SceneSpec) -> Scene:
    """Place fruits (deterministic per seed) and build the foliage field."""
    rng = np.random.default_rng(spec.seed)
    foliage_lattice = _bake_foliage(spec, rng)

    r = spec.fruit_radius
    min_sep = MIN_SEPARATION_FACTOR * r
    centers: list[np.ndarray] = []
    groups: list[int] = []

    def far_enough(candidates, own_group_start=None):
        if not centers:
            return True
        existing = np.asarray(centers)
        d = np.linalg.norm(existing[None, :, :] - np.asarray(candidates)[:, None, :], axis=2)
        return bool((d > min_sep).all())

    def in_crown(candidates):
        d = np.linalg.norm(np.asarray(candidates) - spec.crown_center, axis=1)
        return bool((d <= spec.crown_radius).all())

    target_clustered = int(round(spec.cluster_fraction * spec.fruit_count))
    sizes = _group_sizes(rng, target_clustered)

    group_id = 0
    for size in sizes:
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            side = rng.uniform(*GROUP_SEPARATION_RANGE) * r
            anchor = _uniform_in_ball(rng, spec.crown_center, spec.crown_radius - side)
            members = _group_members(rng, anchor, size, side)
            if in_crown(members) and far_enough(members):
                for m in members:
                    centers.append(m)
                    groups.append(group_id)
                group_id += 1
                break
        else:
            raise PackingError(
                f"could not place a {size}-fruit group after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )

    n_singles = spec.fruit_count - len(centers)
    for _ in range(n_singles):
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            c = _uniform_in_ball(rng, spec.crown_center, spec.crown_radius)
            if far_enough([c]):
                centers.append(c)
                groups.append(-1)
                break
        else:
            raise PackingError(
                f"could not place fruit {len(centers) + 1}/{spec.fruit_count} "
                f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )

    fruit_centers = np.asarray(centers).reshape(-1, 3)
    return Scene(spec, fruit_centers, np.asarray(groups, dtype=np.int64), foliage_lattice)


def foliage_density_and_mod(scene: Scene, pts):
    values, res = scene.foliage_lattice
    out, _ = kernels.trilinear_gather(values, res, SCENE_LO, SCENE_HI,
                                      np.clip(pts, 0.0, 1.0))
    return out[:, 0], out[:, 1]


def foliage_density(scene: Scene, pts):
    return foliage_density_and_mod(scene, pts)[0]


def trunk_density(scene: Scene, pts):
    spec = scene.spec
    z_lo, z_hi = scene.trunk_z_range
    radial2 = ((pts[:, :2] - spec.crown_center[:2]) ** 2).sum(axis=1)
    inside = (radial2 < spec.trunk_radius**2) & (pts[:, 2] >= z_lo) & (pts[:, 2] <= z_hi)
    return np.where(inside, spec.trunk_density, 0.0)


def fruit_density(scene: Scene, pts):
    spec = scene.spec
    sigma = np.zeros(pts.shape[0])
    r2 = spec.fruit_radius**2
    for c in scene.fruit_centers:
        d2 = ((pts - c) ** 2).sum(axis=1)
        sigma[d2 < r2] += spec.fruit_density
    return sigma


def _mix_colors(s_fruit, s_trunk, s_fol, mod, sigma):
    """Density-weighted color and fruit fraction; zero where sigma is zero."""
    n = sigma.shape[0]
    rgb = np.zeros((n, 3))
    frac = np.zeros(n)
    nz = sigma > 0
    if nz.any():
        inv = 1.0 / sigma[nz]
        fol_rgb = FOLIAGE_COLOR[None, :] * (0.45 + 0.85 * mod[nz])[:, None]
        rgb[nz] = (
            s_fruit[nz, None] * FRUIT_COLOR
            + s_trunk[nz, None] * TRUNK_COLOR
            + s_fol[nz, None] * fol_rgb
        ) * inv[:, None]
        frac[nz] = s_fruit[nz] * inv
    return rgb, frac


def scene_fields(scene: Scene, pts):
    """Analytic per-point densities; returns (sigma, rgb, fruit_fraction)."""
    pts = np.asarray(pts, dtype=np.float64)
    s_fruit = fruit_density(scene, pts)
    s_trunk = trunk_density(scene, pts)
    s_fol, mod = foliage_density_and_mod(scene, pts)
    sigma = s_fruit + s_trunk + s_fol
    rgb, frac = _mix_colors(s_fruit, s_trunk, s_fol, mod, sigma)
    return sigma, rgb, frac


def _fruit_sigma_on_rays(scene: Scene, origins, dirs, t):
    """Exact per-sample fruit density via ray-sphere interval tests."""
    spec = scene.spec
    sigma = np.zeros_like(t)
    r2 = spec.fruit_radius**2
    for c in scene.fruit_centers:
        oc = c - origins
        tc = np.einsum("bi,bi->b", oc, dirs)
        b2 = np.einsum("bi,bi->b", oc, oc) - tc * tc
        hit = b2 < r2
        if not hit.any():
            continue
        half = np.sqrt(r2 - b2[hit])
        t_lo = (tc[hit] - half)[:, None]
        t_hi = (tc[hit] + half)[:, None]
        th = t[hit]
        sigma[hit] += spec.fruit_density * ((th > t_lo) & (th < t_hi))
    return sigma


def render_frame(scene: Scene, camera: Camera, steps=192, chunk=4096) -> PosedFrame:
    """Analytic render: RGB plus the binary fruit mask.

    Rays are clipped to the content bounding box (density is exactly zero
    outside it, so the quadrature loses nothing). Deterministic (midpoint
    quadrature); re-rendering identical inputs is bit-identical.
    """
    content_lo, content_hi = scene.content_bounds()
    w, h = camera.width, camera.height
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    pxs = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    rgb_out = np.zeros((h * w, 3))
    frac_out = np.zeros(h * w)
    for start in range(0, pxs.shape[0], chunk):
        sl = slice(start, min(start + chunk, pxs.shape[0]))
        origins, dirs = render.generate_rays(camera, pxs[sl], 0.5)
        tn, tf, hit = render.ray_box_intersect(origins, dirs, content_lo, content_hi)
        if not hit.any():
            continue
        origins, dirs = origins[hit], dirs[hit]
        t, delta = render.sample_ts(tn[hit], tf[hit], steps)
        pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
        s_fruit = _fruit_sigma_on_rays(scene, origins, dirs, t).reshape(-1)
        s_trunk = trunk_density(scene, pts)
        s_fol, mod = foliage_density_and_mod(scene, pts)
        sigma = s_fruit + s_trunk + s_fol
        rgb, frac = _mix_colors(s_fruit, s_trunk, s_fol, mod, sigma)
        nrays = int(hit.sum())
        values = np.concatenate(
            [rgb.reshape(nrays, steps, 3), frac.reshape(nrays, steps, 1)], axis=-1
        )
        out, _, _, _ = render.composite_full(sigma.reshape(nrays, steps), delta, values)
        dst = np.flatnonzero(hit) + start
        rgb_out[dst] = out[:, :3]
        frac_out[dst] = out[:, 3]
    rgb_img = np.clip(rgb_out, 0.0, 1.0).reshape(h, w, 3).astype(np.float32)
    mask = (frac_out > 0.5).reshape(h, w).astype(np.uint8)
    return PosedFrame(camera, rgb_img, mask)


def render_frames(scene: Scene, cameras, steps=256) -> list[PosedFrame]:
    return [render_frame(scene, cam, steps) for cam in cameras]


# ---------------------------------------------------------------------------
# mask corruption


def corrupt_masks(frames, mode, magnitude, seed):
    """Degrade masks to emulate imperfect segmentation; returns new frames.

    dropout: each mask blob disappears with probability `magnitude`.
    soft_edges: each blob is dilated or eroded by a random integer number of
        pixels drawn uniformly from [-magnitude, magnitude].
    dilate_erode: morphological closing with `magnitude` iterations (rounds
        blob boundaries, merges near-touching blobs).
    """
    if magnitude < 0:
        raise ValueError("magnitude must be nonnegative")
    if mode not in ("soft_edges", "dropout", "dilate_erode"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    rng = np.random.default_rng(seed)
    out = []
    m_int = int(round(magnitude))
    for frame in frames:
        mask = frame.mask.astype(bool)
        if mode == "dropout":
            labels, n = ndimage.label(mask)
            new = mask.copy()
            for blob in range(1, n + 1):
                if rng.random() < magnitude:
                    new[labels == blob] = False
        elif mode == "soft_edges":
            labels, n = ndimage.label(mask)
            new = np.zeros_like(mask)
            for blob in range(1, n + 1):
                piece = labels == blob
                amt = int(rng.integers(-m_int, m_int + 1)) if m_int > 0 else 0
                if amt > 0:
                    piece = ndimage.binary_dilation(piece, iterations=amt)
                elif amt < 0:
                    piece = ndimage.binary_erosion(piece, iterations=-amt)
                new |= piece
        else:  # dilate_erode
            new = mask
            if m_int > 0:
                new = ndimage.binary_dilation(new, iterations=m_int)
                new = ndimage.binary_erosion(new, iterations=m_int)
        out.append(replace(frame, mask=new.astype(np.uint8)))
    return out


# ---------------------------------------------------------------------------
# dataset I/O


def save_dataset(frames, scene: Scene, outdir):
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    (outdir / "masks").mkdir(parents=True, exist_ok=True)
    cam0 = frames[0].camera
    meta = {
        "fl_x": cam0.fx,
        "fl_y": cam0.fy,
        "cx": cam0.cx,
        "cy": cam0.cy,
        "w": cam0.width,
        "h": cam0.height,
        "frames": [],
    }
    for i, frame in enumerate(frames):
        img_rel = f"images/frame_{i:04d}.png"
        mask_rel = f"masks/frame_{i:04d}.png"
        rgb8 = np.round(np.asarray(frame.rgb, dtype=np.float64) * 255.0).astype(np.uint8)
        Image.fromarray(rgb8, mode="RGB").save(outdir / img_rel)
        Image.fromarray(frame.mask * np.uint8(255), mode="L").save(outdir / mask_rel)
        meta["frames"].append(
            {
                "file_path": img_rel,
                "mask_path": mask_rel,
                "transform_matrix": frame.camera.c2w_matrix().tolist(),
            }
        )
    with open(outdir / "transforms.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    gt = {
        "centers": scene.fruit_centers.tolist(),
        "radius": scene.spec.fruit_radius,
        "count": int(scene.fruit_centers.shape[0]),
    }
    with open(outdir / "gt_fruits.json", "w") as fh:
        json.dump(gt, fh, indent=2, sort_keys=True)


def load_dataset(path):
    """Read a dataset directory; returns (frames, ground_truth_dict)."""
    path = Path(path)
    with open(path / "transforms.json") as fh:
        meta = json.load(fh)
    frames = []
    for entry in meta["frames"]:
        cam = Camera.from_c2w(meta["fl_x"], meta["fl_y"], meta["cx"], meta["cy"],
                              meta["w"], meta["h"], np.asarray(entry["transform_matrix"]))
        rgb = np.asarray(Image.open(path / entry["file_path"]), dtype=np.float32) / 255.0
        mask_raw = np.asarray(Image.open(path / entry["mask_path"]))
        frames.append(PosedFrame(cam, rgb, (mask_raw > 127).astype(np.uint8)))
    gt = None
    gt_path = path / "gt_fruits.json"
    if gt_path.exists():
        with open(gt_path) as fh:
            gt = json.load(fh)
    return frames, gt
