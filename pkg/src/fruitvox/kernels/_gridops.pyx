# Compiled implementations of the hot kernels: trilinear gather/scatter over
# flat voxel grids (x-fastest order) and a fused Adam update. Must match the
# numpy backend exactly up to float summation order.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expm1, log1p, sqrt

cnp.import_array()

NAME = "compiled"


cdef inline double _softplus(double x) nogil:
    # mirrors numpy's logaddexp(0, x) branch structure for backend parity
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) nogil:
    return 1.0 / (1.0 + exp(-x))


def trilinear_gather(double[:, ::1] values, res, lo, hi,
                     double[:, ::1] pts):
    cdef Py_ssize_t rx = res[0], ry = res[1], rz = res[2]
    cdef double lx = lo[0], ly = lo[1], lz = lo[2]
    cdef double sx = (rx - 1) / (hi[0] - lo[0])
    cdef double sy = (ry - 1) / (hi[1] - lo[1])
    cdef double sz = (rz - 1) / (hi[2] - lo[2])
    cdef Py_ssize_t p, n = pts.shape[0], nch = values.shape[1], ch
    out_arr = np.zeros((n, nch), dtype=np.float64)
    inside_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef unsigned char[::1] inside = inside_arr
    cdef double ux, uy, uz, fx, fy, fz, gx, gy, gz
    cdef double w000, w100, w010, w110, w001, w101, w011, w111
    cdef Py_ssize_t ix, iy, iz, b000, b100, b010, b110, b001, b101, b011, b111

    for p in range(n):
        ux = (pts[p, 0] - lx) * sx
        uy = (pts[p, 1] - ly) * sy
        uz = (pts[p, 2] - lz) * sz
        if ux < 0 or uy < 0 or uz < 0 or ux > rx - 1 or uy > ry - 1 or uz > rz - 1:
            continue
        inside[p] = 1
        ix = <Py_ssize_t>ux
        iy = <Py_ssize_t>uy
        iz = <Py_ssize_t>uz
        if ix > rx - 2:
            ix = rx - 2
        if iy > ry - 2:
            iy = ry - 2
        if iz > rz - 2:
            iz = rz - 2
        fx = ux - ix
        fy = uy - iy
        fz = uz - iz
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        w000 = gx * gy * gz
        w100 = fx * gy * gz
        w010 = gx * fy * gz
        w110 = fx * fy * gz
        w001 = gx * gy * fz
        w101 = fx * gy * fz
        w011 = gx * fy * fz
        w111 = fx * fy * fz
        b000 = ix + rx * (iy + ry * iz)
        b100 = b000 + 1
        b010 = b000 + rx
        b110 = b010 + 1
        b001 = b000 + rx * ry
        b101 = b001 + 1
        b011 = b001 + rx
        b111 = b011 + 1
        for ch in range(nch):
            out[p, ch] = (w000 * values[b000, ch] + w100 * values[b100, ch]
                          + w010 * values[b010, ch] + w110 * values[b110, ch]
                          + w001 * values[b001, ch] + w101 * values[b101, ch]
                          + w011 * values[b011, ch] + w111 * values[b111, ch])
    return out_arr, inside_arr.view(bool)


def trilinear_scatter(double[:, ::1] buf, res, lo, hi,
                      double[:, ::1] pts, double[:, ::1] upstream):
    cdef Py_ssize_t rx = res[0], ry = res[1], rz = res[2]
    cdef double lx = lo[0], ly = lo[1], lz = lo[2]
    cdef double sx = (rx - 1) / (hi[0] - lo[0])
    cdef double sy = (ry - 1) / (hi[1] - lo[1])
    cdef double sz = (rz - 1) / (hi[2] - lo[2])
    cdef Py_ssize_t p, n = pts.shape[0], nch = buf.shape[1], ch
    cdef double ux, uy, uz, fx, fy, fz, gx, gy, gz, g
    cdef double w000, w100, w010, w110, w001, w101, w011, w111
    cdef Py_ssize_t ix, iy, iz, b000, b100, b010, b110, b001, b101, b011, b111

    for p in range(n):
        ux = (pts[p, 0] - lx) * sx
        uy = (pts[p, 1] - ly) * sy
        uz = (pts[p, 2] - lz) * sz
        if ux < 0 or uy < 0 or uz < 0 or ux > rx - 1 or uy > ry - 1 or uz > rz - 1:
            continue
        ix = <Py_ssize_t>ux
        iy = <Py_ssize_t>uy
        iz = <Py_ssize_t>uz
        if ix > rx - 2:
            ix = rx - 2
        if iy > ry - 2:
            iy = ry - 2
        if iz > rz - 2:
            iz = rz - 2
        fx = ux - ix
        fy = uy - iy
        fz = uz - iz
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        w000 = gx * gy * gz
        w100 = fx * gy * gz
        w010 = gx * fy * gz
        w110 = fx * fy * gz
        w001 = gx * gy * fz
        w101 = fx * gy * fz
        w011 = gx * fy * fz
        w111 = fx * fy * fz
        b000 = ix + rx * (iy + ry * iz)
        b100 = b000 + 1
        b010 = b000 + rx
        b110 = b010 + 1
        b001 = b000 + rx * ry
        b101 = b001 + 1
        b011 = b001 + rx
        b111 = b011 + 1
        for ch in range(nch):
            g = upstream[p, ch]
            if g == 0.0:
                continue
            buf[b000, ch] += w000 * g
            buf[b100, ch] += w100 * g
            buf[b010, ch] += w010 * g
            buf[b110, ch] += w110 * g
            buf[b001, ch] += w001 * g
            buf[b101, ch] += w101 * g
            buf[b011, ch] += w011 * g
            buf[b111, ch] += w111 * g


def adam_step(double[::1] param, double[::1] grad, double[::1] m, double[::1] v,
              long t, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t i, n = param.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double g, mhat, vhat
    for i in range(n):
        g = grad[i]
        # zero gradient with zero moments is an exact no-op; skip the work
        if g == 0.0 and m[i] == 0.0 and v[i] == 0.0:
            continue
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        param[i] -= lr * mhat / (sqrt(vhat) + eps)


def field_forward(double[:, ::1] raw, res, lo, hi, double[:, ::1] pts):
    """Fused trilinear_gather + activations: out columns are
    [softplus(density), sigmoid(rgb) x3, sigmoid(semantic)]; rows outside the
    box stay zero."""
    cdef Py_ssize_t rx = res[0], ry = res[1], rz = res[2]
    cdef double lx = lo[0], ly = lo[1], lz = lo[2]
    cdef double sx = (rx - 1) / (hi[0] - lo[0])
    cdef double sy = (ry - 1) / (hi[1] - lo[1])
    cdef double sz = (rz - 1) / (hi[2] - lo[2])
    cdef Py_ssize_t p, n = pts.shape[0], ch
    out_arr = np.zeros((n, 5), dtype=np.float64)
    inside_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef unsigned char[::1] inside = inside_arr
    cdef double ux, uy, uz, fx, fy, fz, gx, gy, gz, val
    cdef double w000, w100, w010, w110, w001, w101, w011, w111
    cdef Py_ssize_t ix, iy, iz, b000, b100, b010, b110, b001, b101, b011, b111

    for p in range(n):
        ux = (pts[p, 0] - lx) * sx
        uy = (pts[p, 1] - ly) * sy
        uz = (pts[p, 2] - lz) * sz
        if ux < 0 or uy < 0 or uz < 0 or ux > rx - 1 or uy > ry - 1 or uz > rz - 1:
            continue
        inside[p] = 1
        ix = <Py_ssize_t>ux
        iy = <Py_ssize_t>uy
        iz = <Py_ssize_t>uz
        if ix > rx - 2:
            ix = rx - 2
        if iy > ry - 2:
            iy = ry - 2
        if iz > rz - 2:
            iz = rz - 2
        fx = ux - ix
        fy = uy - iy
        fz = uz - iz
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        w000 = gx * gy * gz
        w100 = fx * gy * gz
        w010 = gx * fy * gz
        w110 = fx * fy * gz
        w001 = gx * gy * fz
        w101 = fx * gy * fz
        w011 = gx * fy * fz
        w111 = fx * fy * fz
        b000 = ix + rx * (iy + ry * iz)
        b100 = b000 + 1
        b010 = b000 + rx
        b110 = b010 + 1
        b001 = b000 + rx * ry
        b101 = b001 + 1
        b011 = b001 + rx
        b111 = b011 + 1
        for ch in range(5):
            val = (w000 * raw[b000, ch] + w100 * raw[b100, ch]
                   + w010 * raw[b010, ch] + w110 * raw[b110, ch]
                   + w001 * raw[b001, ch] + w101 * raw[b101, ch]
                   + w011 * raw[b011, ch] + w111 * raw[b111, ch])
            out[p, ch] = _softplus(val) if ch == 0 else _sigmoid(val)
    return out_arr, inside_arr.view(bool)


def field_backward(double[:, ::1] buf, res, lo, hi, double[:, ::1] pts,
                   double[:, ::1] act, double[:, ::1] upstream_act):
    """Fused activation chain + trilinear_scatter.

    upstream_act holds d(loss)/d(activated value); the activation derivative
    is recovered from the cached activated values."""
    cdef Py_ssize_t rx = res[0], ry = res[1], rz = res[2]
    cdef double lx = lo[0], ly = lo[1], lz = lo[2]
    cdef double sx = (rx - 1) / (hi[0] - lo[0])
    cdef double sy = (ry - 1) / (hi[1] - lo[1])
    cdef double sz = (rz - 1) / (hi[2] - lo[2])
    cdef Py_ssize_t p, n = pts.shape[0], ch
    cdef double ux, uy, uz, fx, fy, fz, gx, gy, gz, g, a
    cdef double w000, w100, w010, w110, w001, w101, w011, w111
    cdef Py_ssize_t ix, iy, iz, b000, b100, b010, b110, b001, b101, b011, b111

    for p in range(n):
        ux = (pts[p, 0] - lx) * sx
        uy = (pts[p, 1] - ly) * sy
        uz = (pts[p, 2] - lz) * sz
        if ux < 0 or uy < 0 or uz < 0 or ux > rx - 1 or uy > ry - 1 or uz > rz - 1:
            continue
        ix = <Py_ssize_t>ux
        iy = <Py_ssize_t>uy
        iz = <Py_ssize_t>uz
        if ix > rx - 2:
            ix = rx - 2
        if iy > ry - 2:
            iy = ry - 2
        if iz > rz - 2:
            iz = rz - 2
        fx = ux - ix
        fy = uy - iy
        fz = uz - iz
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        w000 = gx * gy * gz
        w100 = fx * gy * gz
        w010 = gx * fy * gz
        w110 = fx * fy * gz
        w001 = gx * gy * fz
        w101 = fx * gy * fz
        w011 = gx * fy * fz
        w111 = fx * fy * fz
        b000 = ix + rx * (iy + ry * iz)
        b100 = b000 + 1
        b010 = b000 + rx
        b110 = b010 + 1
        b001 = b000 + rx * ry
        b101 = b001 + 1
        b011 = b001 + rx
        b111 = b011 + 1
        for ch in range(5):
            g = upstream_act[p, ch]
            if g == 0.0:
                continue
            a = act[p, ch]
            if ch == 0:
                g *= -expm1(-a)
            else:
                g *= a * (1.0 - a)
            if g == 0.0:
                continue
            buf[b000, ch] += w000 * g
            buf[b100, ch] += w100 * g
            buf[b010, ch] += w010 * g
            buf[b110, ch] += w110 * g
            buf[b001, ch] += w001 * g
            buf[b101, ch] += w101 * g
            buf[b011, ch] += w011 * g
            buf[b111, ch] += w111 * g
