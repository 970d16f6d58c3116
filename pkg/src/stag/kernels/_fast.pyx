# Compiled twin of reference.py. Keep the sampling convention in lockstep:
# center-index space a = u - 0.5, border clamp, low index pulled back at the
# high edge. Any change here must land in reference.py in the same commit.

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, exp, floor

cnp.import_array()


cdef inline void _center_index(double coord, Py_ssize_t size,
                               Py_ssize_t* low, double* frac) nogil:
    cdef double a = coord - 0.5
    cdef double hi = size - 1.0
    cdef double lo_f
    if a < 0.0:
        a = 0.0
    elif a > hi:
        a = hi
    lo_f = floor(a)
    if lo_f > size - 2.0:
        lo_f = size - 2.0
    if lo_f < 0.0:
        lo_f = 0.0
    low[0] = <Py_ssize_t> lo_f
    frac[0] = a - lo_f


def roi_align_forward(object fmap_obj, object boxes_obj,
                      Py_ssize_t out_h, Py_ssize_t out_w, Py_ssize_t samples):
    cdef double[:, :, ::1] fmap = np.ascontiguousarray(fmap_obj, dtype=np.float64)
    cdef double[:, ::1] boxes = np.ascontiguousarray(
        np.asarray(boxes_obj, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t c = fmap.shape[0], h = fmap.shape[1], w = fmap.shape[2]
    cdef Py_ssize_t k = boxes.shape[0]
    out_arr = np.zeros((k, c, out_h, out_w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t kk, cc, oy, ox, sy, sx, i0, i1, j0, j1
    cdef double x1, y1, bin_w, bin_h, u, v, fx, fy, acc, w00, w01, w10, w11
    cdef double inv_samples = 1.0 / (samples * samples)
    with nogil:
        for kk in range(k):
            x1 = boxes[kk, 0]
            y1 = boxes[kk, 1]
            bin_w = (boxes[kk, 2] - x1) / out_w
            bin_h = (boxes[kk, 3] - y1) / out_h
            for oy in range(out_h):
                for ox in range(out_w):
                    for sy in range(samples):
                        v = y1 + (oy + (sy + 0.5) / samples) * bin_h
                        _center_index(v, h, &j0, &fy)
                        j1 = j0 + 1
                        if j1 > h - 1:
                            j1 = h - 1
                        for sx in range(samples):
                            u = x1 + (ox + (sx + 0.5) / samples) * bin_w
                            _center_index(u, w, &i0, &fx)
                            i1 = i0 + 1
                            if i1 > w - 1:
                                i1 = w - 1
                            w00 = (1.0 - fx) * (1.0 - fy)
                            w01 = fx * (1.0 - fy)
                            w10 = (1.0 - fx) * fy
                            w11 = fx * fy
                            for cc in range(c):
                                acc = (fmap[cc, j0, i0] * w00 + fmap[cc, j0, i1] * w01
                                       + fmap[cc, j1, i0] * w10 + fmap[cc, j1, i1] * w11)
                                out[kk, cc, oy, ox] += acc * inv_samples
    return out_arr


def roi_align_backward(object boxes_obj, object grad_out_obj,
                       Py_ssize_t h, Py_ssize_t w, Py_ssize_t samples):
    cdef double[:, ::1] boxes = np.ascontiguousarray(
        np.asarray(boxes_obj, dtype=np.float64).reshape(-1, 4))
    cdef double[:, :, :, ::1] grad_out = np.ascontiguousarray(grad_out_obj, dtype=np.float64)
    cdef Py_ssize_t k = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t out_h = grad_out.shape[2], out_w = grad_out.shape[3]
    grad_arr = np.zeros((c, h, w), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_arr
    cdef Py_ssize_t kk, cc, oy, ox, sy, sx, i0, i1, j0, j1
    cdef double x1, y1, bin_w, bin_h, u, v, fx, fy, g, w00, w01, w10, w11
    cdef double inv_samples = 1.0 / (samples * samples)
    with nogil:
        for kk in range(k):
            x1 = boxes[kk, 0]
            y1 = boxes[kk, 1]
            bin_w = (boxes[kk, 2] - x1) / out_w
            bin_h = (boxes[kk, 3] - y1) / out_h
            for oy in range(out_h):
                for ox in range(out_w):
                    for sy in range(samples):
                        v = y1 + (oy + (sy + 0.5) / samples) * bin_h
                        _center_index(v, h, &j0, &fy)
                        j1 = j0 + 1
                        if j1 > h - 1:
                            j1 = h - 1
                        for sx in range(samples):
                            u = x1 + (ox + (sx + 0.5) / samples) * bin_w
                            _center_index(u, w, &i0, &fx)
                            i1 = i0 + 1
                            if i1 > w - 1:
                                i1 = w - 1
                            w00 = (1.0 - fx) * (1.0 - fy)
                            w01 = fx * (1.0 - fy)
                            w10 = (1.0 - fx) * fy
                            w11 = fx * fy
                            for cc in range(c):
                                g = grad_out[kk, cc, oy, ox] * inv_samples
                                grad[cc, j0, i0] += g * w00
                                grad[cc, j0, i1] += g * w01
                                grad[cc, j1, i0] += g * w10
                                grad[cc, j1, i1] += g * w11
    return grad_arr


def render_blobs(Py_ssize_t h, Py_ssize_t w, Py_ssize_t channels, object blobs_obj):
    cdef double[:, ::1] blobs = np.ascontiguousarray(
        np.asarray(blobs_obj, dtype=np.float64).reshape(-1, 6))
    out_arr = np.zeros((channels, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t k = blobs.shape[0]
    cdef Py_ssize_t kk, chan, x_lo, x_hi, y_lo, y_hi, x, y
    cdef double cx, cy, sx, sy, amp, dx, dy, gy
    with nogil:
        for kk in range(k):
            cx = blobs[kk, 0]
            cy = blobs[kk, 1]
            sx = blobs[kk, 2]
            sy = blobs[kk, 3]
            amp = blobs[kk, 4]
            chan = <Py_ssize_t> blobs[kk, 5]
            x_lo = <Py_ssize_t> floor(cx - 4.0 * sx)
            x_hi = <Py_ssize_t> ceil(cx + 4.0 * sx) + 1
            y_lo = <Py_ssize_t> floor(cy - 4.0 * sy)
            y_hi = <Py_ssize_t> ceil(cy + 4.0 * sy) + 1
            if x_lo < 0:
                x_lo = 0
            if x_hi > w:
                x_hi = w
            if y_lo < 0:
                y_lo = 0
            if y_hi > h:
                y_hi = h
            for y in range(y_lo, y_hi):
                dy = y + 0.5 - cy
                gy = exp(-(dy * dy) / (2.0 * sy * sy))
                for x in range(x_lo, x_hi):
                    dx = x + 0.5 - cx
                    out[chan, y, x] += amp * gy * exp(-(dx * dx) / (2.0 * sx * sx))
    return out_arr
