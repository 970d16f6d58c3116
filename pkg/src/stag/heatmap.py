"""Attention heatmaps: per-frame grayscale renders of where attention lands.

Each valid box contributes an isotropic Gaussian at its box center with
sigma = 0.25 * min(width, height), clamped to >= 1 px. The amplitude is the
box's aggregate incoming spatial-attention mass: the summed attention over
all pair columns that contain the box. The accumulated image is normalized
so its peak maps to 255 and quantized with round-half-up.

Rendering is scalar math.exp per pixel, no truncation window, so the bytes
are reproducible against an independent straight-line implementation.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import ValidationError


def box_attention_mass(spatial_frame: np.ndarray, mask_row: np.ndarray) -> np.ndarray:
    """Incoming mass per box slot from one frame's pair-level attention.

    spatial_frame is (N*N, N*N) over pair slots (i, j) flattened as i * N + j;
    a box receives the mass of every column whose pair mentions it, counted
    once for i == j slots.
    """
    n = mask_row.shape[0]
    if spatial_frame.shape != (n * n, n * n):
        raise ValidationError(
            f"attention frame {spatial_frame.shape} does not match {n} box slots"
        )
    column_mass = spatial_frame.sum(axis=0)
    masses = np.zeros(n)
    for i in range(n):
        for j in range(n):
            share = column_mass[i * n + j]
            masses[i] += share
            if j != i:
                masses[j] += share
    return masses


def top_attended_box(masses: np.ndarray, mask_row: np.ndarray) -> int:
    """Index of the valid box with the highest mass; ties go to the lower index."""
    best = -1
    for i in range(mask_row.shape[0]):
        if mask_row[i] and (best < 0 or masses[i] > masses[best]):
            best = i
    if best < 0:
        raise ValidationError("no valid boxes to rank")
    return best


def render_heatmap(height: int, width: int, boxes, mask_row, masses) -> np.ndarray:
    """Accumulate per-box Gaussians and quantize to uint8 with peak at 255."""
    image = [[0.0] * width for _ in range(height)]
    for b, box in enumerate(boxes):
        if box is None or not mask_row[b]:
            continue
        amp = float(masses[b])
        if amp <= 0.0:
            continue
        cx = (box.x1 + box.x2) / 2.0
        cy = (box.y1 + box.y2) / 2.0
        sigma = max(0.25 * min(box.width, box.height), 1.0)
        denom = 2.0 * sigma * sigma
        for y in range(height):
            dy = y + 0.5 - cy
            row = image[y]
            for x in range(width):
                dx = x + 0.5 - cx
                row[x] += amp * math.exp(-(dx * dx + dy * dy) / denom)
    peak = max(max(row) for row in image)
    out = np.zeros((height, width), dtype=np.uint8)
    if peak <= 0.0:
        return out
    scale = 255.0 / peak
    for y in range(height):
        for x in range(width):
            out[y, x] = int(math.floor(image[y][x] * scale + 0.5))
    return out


def write_pgm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValidationError("pgm wants a 2-D uint8 image")
    height, width = image.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValidationError(f"{path}: not a P5 pgm")
    try:
        width, height = (int(v) for v in parts[1].split())
    except ValueError as exc:
        raise ValidationError(f"{path}: bad pgm dimensions") from exc
    payload = parts[3]
    if len(payload) != width * height:
        raise ValidationError(f"{path}: pgm payload size mismatch")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def heatmap_frames(segment, record):
    """Yield (frame_index, image, masses, top_box) for every frame."""
    t_frames = len(segment.frames)
    if record.spatial.shape[0] != t_frames:
        raise ValidationError("attention record does not cover every frame")
    height = segment.frames[0].feature_map.data.shape[1]
    width = segment.frames[0].feature_map.data.shape[2]
    for t, frame in enumerate(segment.frames):
        masses = box_attention_mass(record.spatial[t], frame.mask)
        image = render_heatmap(height, width, frame.boxes, frame.mask, masses)
        yield t, image, masses, top_attended_box(masses, frame.mask)
