"""Vectorized numpy implementations of the hot kernels.

This is the fallback backend and the semantic reference for the compiled one.
Both implement the identical sampling convention, stated here once:

  A continuous coordinate u in [0, W] hits pixel centers at integer + 0.5.
  Sampling maps u into center-index space (a = u - 0.5), clamps to the border
  (replicate), and interpolates bilinearly between the two nearest centers.
  At the high edge the lower index is pulled back so the fractional weight
  carries the value onto the last pixel exactly.

Boxes arrive in map-pixel coordinates, already divided by stride and clipped
to the map extent by the caller.
"""

import numpy as np


def _center_index(coord, size):
    """Map continuous coords to (low index, fraction) in center-index space."""
    a = np.clip(coord - 0.5, 0.0, float(size - 1))
    low = np.minimum(np.floor(a), float(max(size - 2, 0)))
    return low.astype(np.intp), a - low


def _sample_grid(boxes, out_h, out_w, samples):
    """Continuous sample coordinates, shape (K, out_h, out_w, samples, samples, 2)."""
    x1 = boxes[:, 0][:, None, None, None, None]
    y1 = boxes[:, 1][:, None, None, None, None]
    bin_w = ((boxes[:, 2] - boxes[:, 0]) / out_w)[:, None, None, None, None]
    bin_h = ((boxes[:, 3] - boxes[:, 1]) / out_h)[:, None, None, None, None]
    ox = np.arange(out_w, dtype=np.float64)[None, None, :, None, None]
    oy = np.arange(out_h, dtype=np.float64)[None, :, None, None, None]
    sub = (np.arange(samples, dtype=np.float64) + 0.5) / samples
    sx = sub[None, None, None, None, :]
    sy = sub[None, None, None, :, None]
    u = x1 + (ox + sx) * bin_w
    v = y1 + (oy + sy) * bin_h
    return u, v


def roi_align_forward(fmap, boxes, out_h, out_w, samples):
    """Average-pool bilinear samples per bin: (C,H,W) x (K,4) -> (K,C,out_h,out_w)."""
    fmap = np.asarray(fmap, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    c, h, w = fmap.shape
    k = boxes.shape[0]
    if k == 0:
        return np.zeros((0, c, out_h, out_w), dtype=np.float64)
    u, v = _sample_grid(boxes, out_h, out_w, samples)
    i0, fx = _center_index(u, w)
    j0, fy = _center_index(v, h)
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    vals = (
        fmap[:, j0, i0] * ((1.0 - fx) * (1.0 - fy))
        + fmap[:, j0, i1] * (fx * (1.0 - fy))
        + fmap[:, j1, i0] * ((1.0 - fx) * fy)
        + fmap[:, j1, i1] * (fx * fy)
    )
    out = vals.mean(axis=(-1, -2))
    return np.ascontiguousarray(np.moveaxis(out, 0, 1))


def roi_align_backward(boxes, grad_out, h, w, samples):
    """Scatter output gradients back onto the map: returns (C,H,W)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    k, c, out_h, out_w = grad_out.shape
    if k == 0:
        return np.zeros((c, h, w), dtype=np.float64)
    u, v = _sample_grid(boxes, out_h, out_w, samples)
    i0, fx = _center_index(u, w)
    j0, fy = _center_index(v, h)
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    g = grad_out[:, :, :, :, None, None] / float(samples * samples)
    chan = np.arange(c, dtype=np.intp)[None, :, None, None, None, None]
    flat = np.zeros(c * h * w, dtype=np.float64)
    for jj, ii, wt in (
        (j0, i0, (1.0 - fx) * (1.0 - fy)),
        (j0, i1, fx * (1.0 - fy)),
        (j1, i0, (1.0 - fx) * fy),
        (j1, i1, fx * fy),
    ):
        idx = (chan * h + jj[:, None]) * w + ii[:, None]
        contrib = g * wt[:, None]
        flat += np.bincount(idx.reshape(-1), weights=contrib.reshape(-1), minlength=c * h * w)
    return flat.reshape(c, h, w)


def render_blobs(h, w, channels, blobs):
    """Sum anisotropic Gaussians into a (channels, h, w) map.

    blobs rows are (cx, cy, sigma_x, sigma_y, amplitude, channel); values are
    evaluated at pixel centers and written only inside a 4-sigma window, zero
    outside. Both backends share that truncation rule.
    """
    out = np.zeros((channels, h, w), dtype=np.float64)
    for cx, cy, sx, sy, amp, chan in np.asarray(blobs, dtype=np.float64):
        x_lo = max(int(np.floor(cx - 4.0 * sx)), 0)
        x_hi = min(int(np.ceil(cx + 4.0 * sx)) + 1, w)
        y_lo = max(int(np.floor(cy - 4.0 * sy)), 0)
        y_hi = min(int(np.ceil(cy + 4.0 * sy)) + 1, h)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        xs = np.arange(x_lo, x_hi, dtype=np.float64) + 0.5 - cx
        ys = np.arange(y_lo, y_hi, dtype=np.float64) + 0.5 - cy
        gx = np.exp(-(xs * xs) / (2.0 * sx * sx))
        gy = np.exp(-(ys * ys) / (2.0 * sy * sy))
        out[int(chan), y_lo:y_hi, x_lo:x_hi] += amp * np.outer(gy, gx)
    return out
