"""Ray generation, stratified sampling, and emission-absorption compositing.

A pixel value is accumulated over K ray samples as

    out = sum_k T_k * alpha_k * v_k,   T_k = exp(-sum_{a<k} sigma_a * delta_a),
    alpha_k = 1 - exp(-sigma_k * delta_k),

with the same weights shared by the color and the semantic channel. Semantic
values are accumulated as probabilities and clamped to [SEM_EPS, 1 - SEM_EPS]
before any logarithm, so the accumulated value stays a valid probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import field
from .cameras import Camera
from .field import FieldGrid

SEM_EPS = 1e-6
DIRECTION_TOL = 1e-9


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > DIRECTION_TOL:
            raise ValueError("ray direction must be a unit vector")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be less than t_far")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def generate_rays(camera: Camera, pxs, jitters):
    """Vectorized pinhole rays through (px + jitter); returns (origins, dirs)."""
    pxs = np.asarray(pxs, dtype=np.float64)
    jitters = np.broadcast_to(np.asarray(jitters, dtype=np.float64), pxs.shape)
    p = pxs + jitters
    cam_dirs = np.stack(
        [
            (p[:, 0] - camera.cx) / camera.fx,
            (p[:, 1] - camera.cy) / camera.fy,
            np.ones(p.shape[0]),
        ],
        axis=1,
    )
    dirs = cam_dirs @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape)
    return origins, dirs


def generate_ray(camera: Camera, px, jitter=(0.0, 0.0)) -> Ray:
    """Single pinhole ray through (px + jitter); px must be inside the image."""
    px = np.asarray(px, dtype=np.float64)
    if not (0 <= px[0] <= camera.width - 1 and 0 <= px[1] <= camera.height - 1):
        raise ValueError(f"pixel {px} outside {camera.width}x{camera.height} image")
    origins, dirs = generate_rays(camera, px.reshape(1, 2), np.asarray(jitter).reshape(1, 2))
    return Ray(origins[0].copy(), dirs[0], 0.0, np.inf)


def ray_box_intersect(origins, dirs, lo, hi):
    """Slab-test rays against an axis-aligned box.

    Returns (t_near (B,), t_far (B,), hit (B,)); t_near is clamped to >= 0.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tsmall = np.minimum(ta, tb)
    tbig = np.maximum(ta, tb)
    zero = dirs == 0.0
    if zero.any():
        in_slab = (origins >= lo) & (origins <= hi)
        tsmall = np.where(zero, np.where(in_slab, -np.inf, np.inf), tsmall)
        tbig = np.where(zero, np.where(in_slab, np.inf, -np.inf), tbig)
    t_near = np.maximum(tsmall.max(axis=1), 0.0)
    t_far = tbig.min(axis=1)
    hit = t_far > t_near
    return t_near, t_far, hit


def clip_to_box(ray: Ray, lo, hi):
    """Ray restricted to a box, or None if it misses."""
    tn, tf, hit = ray_box_intersect(ray.origin[None], ray.direction[None], lo, hi)
    if not hit[0]:
        return None
    return Ray(ray.origin, ray.direction, float(tn[0]), float(tf[0]))


def sample_ts(t_near, t_far, k, rng=None):
    """Stratified sample distances and spacings for a batch of rays.

    One sample per equal sub-interval of [t_near, t_far]; with rng=None the
    samples sit at bin midpoints. delta_k = t_{k+1} - t_k, with the final
    spacing measured to t_far. Returns (t (B, K), delta (B, K)).
    """
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    b = t_near.shape[0]
    if k < 1:
        raise ValueError("need at least one sample per ray")
    h = (t_far - t_near) / k
    if rng is None:
        u = np.full((b, k), 0.5)
    else:
        u = rng.random((b, k))
    t = t_near[:, None] + (np.arange(k)[None, :] + u) * h[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = t_far - t[:, -1]
    return t, delta


def stratified_samples(ray: Ray, k, rng=None):
    """Per-ray version of sample_ts; returns (t (K,), delta (K,))."""
    t, delta = sample_ts(np.array([ray.t_near]), np.array([ray.t_far]), k, rng)
    return t[0], delta[0]


def _check_sigma(sigma):
    if not np.isfinite(sigma).all():
        raise ValueError("non-finite density in compositing input")
    if (sigma < 0).any():
        raise ValueError("negative density in compositing input")


def composite_full(sigma, delta, values):
    """Compositing with intermediate quantities for the backward pass.

    sigma, delta: (..., K); values: (..., K, C). Returns
    (out (..., C), weights (..., K), transmittance (..., K), alpha (..., K)).
    """
    _check_sigma(sigma)
    tau = sigma * delta
    cum = np.cumsum(tau, axis=-1)
    transmittance = np.exp(-(cum - tau))
    alpha = -np.expm1(-tau)
    weights = transmittance * alpha
    out = np.einsum("...k,...kc->...c", weights, values)
    return out, weights, transmittance, alpha


def composite(sigma, delta, values):
    """Accumulate per-sample values along rays; returns (out, weights).

    `values` may be (..., K) for a scalar channel or (..., K, C).
    """
    values = np.asarray(values, dtype=np.float64)
    scalar = values.ndim == np.asarray(sigma).ndim
    v = values[..., None] if scalar else values
    out, weights, _, _ = composite_full(np.asarray(sigma, dtype=np.float64),
                                        np.asarray(delta, dtype=np.float64), v)
    return (out[..., 0] if scalar else out), weights


def composite_backward(delta, values, weights, transmittance, alpha, g_out):
    """Gradients of the composited output w.r.t. per-sample density and values.

    g_out: (..., C) upstream gradient. Returns (g_sigma (..., K),
    g_values (..., K, C)).
    """
    u = np.einsum("...kc,...c->...k", values, g_out)
    g_values = weights[..., None] * g_out[..., None, :]
    wu = weights * u
    rev = np.flip(np.cumsum(np.flip(wu, axis=-1), axis=-1), axis=-1)
    suffix = rev - wu
    t_next = transmittance * (1.0 - alpha)
    g_sigma = delta * (t_next * u - suffix)
    return g_sigma, g_values


def render_rays(grid: FieldGrid, origins, dirs, k, rng=None, record=False):
    """Render a batch of rays against the field.

    Rays are clipped to the grid bounds; rays that miss contribute background
    (zero color, zero semantic probability, zero opacity). Returns a dict with
    'rgb' (B, 3), 'prob' (B,), 'opacity' (B,), 'hit' (B,), and, if record=True,
    the per-sample tensors needed for a backward pass.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    b = origins.shape[0]
    tn, tf, hit = ray_box_intersect(origins, dirs, grid.lo, grid.hi)
    # degenerate span for misses keeps the batch rectangular; their samples
    # land at the origin-side boundary and are masked out below
    tf_safe = np.where(hit, tf, tn + 1.0)
    t, delta = sample_ts(tn, tf_safe, k, rng)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    act, inside = field.forward_activated(grid, pts.reshape(-1, 3))
    act = act.reshape(b, k, 5)
    sigma = act[..., 0].copy()
    sigma[~hit] = 0.0
    out, weights, transmittance, alpha = composite_full(sigma, delta, act[..., 1:5])
    result = {
        "rgb": out[:, :3],
        "prob": out[:, 3],
        "opacity": weights.sum(axis=-1),
        "hit": hit,
    }
    if record:
        result.update(
            pts=pts, act=act, inside=inside.reshape(b, k), sigma=sigma,
            sample_rgb=act[..., 1:4], sample_prob=act[..., 4], delta=delta,
            weights=weights, transmittance=transmittance, alpha=alpha,
        )
    return result


def semantic_prob_to_logit(prob):
    clamped = np.clip(prob, SEM_EPS, 1.0 - SEM_EPS)
    return field.logit(clamped)


def pixel_rng(seed, px):
    """Deterministic per-pixel RNG stream derived from (seed, pixel coords)."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(px[1]), int(px[0]))))


def render_pixel(grid: FieldGrid, camera: Camera, px, k, seed=None):
    """Render one pixel; returns (rgb (3,), semantic_logit, opacity).

    With seed=None sampling is deterministic (pixel centers, midpoint t's);
    otherwise in-pixel jitter and stratified offsets come from a stream
    derived from (seed, px) so chunked and serial renders agree.
    """
    px = np.asarray(px, dtype=np.float64)
    if not (0 <= px[0] <= camera.width - 1 and 0 <= px[1] <= camera.height - 1):
        raise ValueError(f"pixel {px} outside {camera.width}x{camera.height} image")
    rng = None if seed is None else pixel_rng(seed, px)
    jitter = np.array([0.5, 0.5]) if rng is None else rng.random(2)
    origins, dirs = generate_rays(camera, px.reshape(1, 2), jitter.reshape(1, 2))
    res = render_rays(grid, origins, dirs, k, rng)
    sem_logit = float(semantic_prob_to_logit(res["prob"][0]))
    return res["rgb"][0], sem_logit, float(res["opacity"][0])


def render_image(grid: FieldGrid, camera: Camera, k=96, chunk=16384):
    """Full-frame deterministic render; returns (rgb (H, W, 3), prob (H, W))."""
    w, h = camera.width, camera.height
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    pxs = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    rgb = np.empty((h * w, 3))
    prob = np.empty(h * w)
    for start in range(0, pxs.shape[0], chunk):
        sl = slice(start, min(start + chunk, pxs.shape[0]))
        origins, dirs = generate_rays(camera, pxs[sl], 0.5)
        res = render_rays(grid, origins, dirs, k)
        rgb[sl] = res["rgb"]
        prob[sl] = res["prob"]
    return rgb.reshape(h, w, 3), prob.reshape(h, w)
