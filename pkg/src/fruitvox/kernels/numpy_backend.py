"""Vectorized numpy implementation of the hot kernels.

This is the fallback backend and the behavioral reference for the compiled
extension: both must agree on every output (tests enforce parity). All grids
are flat float64 arrays of shape (rx*ry*rz, channels) with x-fastest voxel
order, i.e. flat index = ix + rx * (iy + ry * iz).
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def _locate(res, lo, hi, pts):
    """Map points to lattice cells.

    Returns (base_index (P,) int64 flat index of the low corner, fractional
    offsets (P, 3), inside (P,) bool). Points outside the closed box are
    flagged and given a clamped (unused) cell.
    """
    res = np.asarray(res, dtype=np.int64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    u = (pts - lo) * ((res - 1) / (hi - lo))
    inside = np.all((u >= 0.0) & (u <= (res - 1)), axis=1)
    uc = np.clip(u, 0.0, (res - 1).astype(np.float64))
    i0 = np.minimum(uc.astype(np.int64), res - 2)
    f = uc - i0
    base = i0[:, 0] + res[0] * (i0[:, 1] + res[1] * i0[:, 2])
    return base, f, inside


def _corner_offsets(res):
    rx, ry = int(res[0]), int(res[1])
    # order: (dx, dy, dz) in binary counting order 000..111
    return np.array(
        [dx + rx * (dy + ry * dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)],
        dtype=np.int64,
    ), np.array([(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)], dtype=np.float64)


def _corner_weights(f):
    # (P, 8) trilinear weights in the same 000..111 corner order
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    return np.stack(
        [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ],
        axis=1,
    )


def trilinear_gather(values, res, lo, hi, pts):
    """Trilinearly interpolate `values` (N, C) at `pts` (P, 3).

    Returns (out (P, C), inside (P,) bool); rows outside the box are zero.
    """
    pts = np.asarray(pts, dtype=np.float64)
    base, f, inside = _locate(res, lo, hi, pts)
    offs, _ = _corner_offsets(res)
    w = _corner_weights(f)
    out = np.zeros((pts.shape[0], values.shape[1]), dtype=np.float64)
    for c in range(8):
        out += w[:, c : c + 1] * values[base + offs[c]]
    out[~inside] = 0.0
    return out, inside


def trilinear_scatter(buf, res, lo, hi, pts, upstream):
    """Accumulate `upstream` (P, C) into `buf` (N, C) with trilinear weights.

    Adjoint of trilinear_gather; rows outside the box are skipped. In-place.
    """
    pts = np.asarray(pts, dtype=np.float64)
    base, f, inside = _locate(res, lo, hi, pts)
    if not inside.all():
        pts = pts[inside]
        base = base[inside]
        f = f[inside]
        upstream = upstream[inside]
    if base.size == 0:
        return
    offs, _ = _corner_offsets(res)
    w = _corner_weights(f)
    n = buf.shape[0]
    idx = (base[:, None] + offs[None, :]).ravel()  # (P*8,)
    for ch in range(buf.shape[1]):
        contrib = (w * upstream[:, ch : ch + 1]).ravel()
        buf[:, ch] += np.bincount(idx, weights=contrib, minlength=n)


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam update, in place on `param`, `m`, `v`.

    `t` is the 1-based step index after incrementing. Entries whose gradient
    and both moments are zero are exact no-ops (the compiled backend skips
    them; results are identical).
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


# activation helpers shared by the fused field kernels; density uses
# softplus, color and semantics use sigmoid. The softplus derivative is
# recovered from the activated value: d softplus(x)/dx = 1 - exp(-softplus(x)).


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def field_forward(raw, res, lo, hi, pts):
    """Interpolate raw channels and activate: [sigma, r, g, b, prob].

    Returns (act (P, 5), inside (P,)); rows outside the box are all-zero
    (sigma 0, black, probability 0).
    """
    interp, inside = trilinear_gather(raw, res, lo, hi, pts)
    act = np.empty_like(interp)
    act[:, 0] = np.logaddexp(0.0, interp[:, 0])
    act[:, 1:] = _sigmoid(interp[:, 1:])
    act[~inside] = 0.0
    return act, inside


def field_backward(buf, res, lo, hi, pts, act, upstream_act):
    """Chain activated-space gradients through the activations and scatter.

    `act` is the cached output of field_forward at the same pts; rows whose
    activations are zero (out of bounds) contribute nothing.
    """
    up_raw = np.empty_like(upstream_act)
    up_raw[:, 0] = upstream_act[:, 0] * -np.expm1(-act[:, 0])
    up_raw[:, 1:] = upstream_act[:, 1:] * act[:, 1:] * (1.0 - act[:, 1:])
    trilinear_scatter(buf, res, lo, hi, pts, up_raw)
