"""Boxes, overlap tests, suppression, and differentiable RoI pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateRoiError, ShapeError, ValidationError
from .tensor import DiffNode, Tensor, _make


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous pixel coordinates, corners inclusive of zero area."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2", "score"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"BBox.{name} is not finite")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValidationError(f"BBox corners out of order: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def to_json(self) -> dict:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2, "score": self.score}

    @classmethod
    def from_json(cls, obj: dict) -> "BBox":
        return cls(
            float(obj["x1"]), float(obj["y1"]), float(obj["x2"]), float(obj["y2"]),
            float(obj.get("score", 1.0)),
        )


@dataclass
class FeatureMap:
    """Spatial feature grid (channels, height, width) plus the pixel stride it was computed at."""

    data: Tensor
    stride: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"FeatureMap needs (C, H, W), got {self.data.shape}")
        if not (math.isfinite(self.stride) and self.stride > 0):
            raise ValidationError(f"FeatureMap stride must be positive, got {self.stride}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0.0 when the union has no area."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def union_box(a: BBox, b: BBox) -> BBox:
    """Smallest box covering both inputs. Score is reset to 1.0."""
    return BBox(
        min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2), 1.0,
    )


def nms(boxes: list, iou_threshold: float, keep_top: int) -> list:
    """Greedy non-maximum suppression.

    Scans by descending score (ties broken by lower original index), drops any
    box overlapping an already-kept one above the threshold, stops at keep_top
    survivors. Returns surviving boxes in descending score order.
    """
    if keep_top <= 0:
        return []
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept = []
    for i in order:
        candidate = boxes[i]
        if all(iou(candidate, k) <= iou_threshold for k in kept):
            kept.append(candidate)
            if len(kept) == keep_top:
                break
    return kept


def clip_box(box: BBox, width: float, height: float) -> BBox:
    """Clamp a box to [0, width] x [0, height], preserving its score."""
    return BBox(
        min(max(box.x1, 0.0), width),
        min(max(box.y1, 0.0), height),
        min(max(box.x2, 0.0), width),
        min(max(box.y2, 0.0), height),
        box.score,
    )


def _map_space_boxes(boxes, fmap_shape, stride):
    """Clip to the map extent and convert pixel boxes to map coordinates."""
    _, h, w = fmap_shape
    out = np.empty((len(boxes), 4), dtype=np.float64)
    for idx, box in enumerate(boxes):
        clipped = clip_box(box, w * stride, h * stride)
        if clipped.area <= 0.0:
            raise DegenerateRoiError(f"box {box} has no area on a {w * stride} x {h * stride} map")
        out[idx] = (
            clipped.x1 / stride,
            clipped.y1 / stride,
            clipped.x2 / stride,
            clipped.y2 / stride,
        )
    return out


def roi_align_many(
    map_node: DiffNode,
    boxes: list,
    stride: float = 1.0,
    out_h: int = 7,
    out_w: int = 7,
    samples_per_bin: int = 2,
) -> DiffNode:
    """Pool every box from one map in a single kernel call: (K, C, out_h, out_w).

    Differentiable with respect to the map values only; box coordinates are
    treated as constants. Output is linear in the map.
    """
    fmap = map_node.value.data
    if fmap.ndim != 3:
        raise ShapeError(f"roi_align expects a (C, H, W) map, got {fmap.shape}")
    if samples_per_bin < 1 or out_h < 1 or out_w < 1:
        raise ValidationError("roi_align output grid and sample count must be positive")
    map_boxes = _map_space_boxes(boxes, fmap.shape, stride)
    _, h, w = fmap.shape
    out_arr = kernels.roi_align_forward(fmap, map_boxes, out_h, out_w, samples_per_bin)

    def backward():
        if map_node.requires_grad:
            map_node.grad.data += kernels.roi_align_backward(
                map_boxes, out.grad.data, h, w, samples_per_bin
            )

    out = _make(out_arr, (map_node,), backward)
    return out


def roi_align(
    map_node: DiffNode,
    box: BBox,
    stride: float = 1.0,
    out_h: int = 7,
    out_w: int = 7,
    samples_per_bin: int = 2,
) -> DiffNode:
    """Single-box pooling: (C, out_h, out_w). See roi_align_many."""
    from .tensor import reshape

    pooled = roi_align_many(map_node, [box], stride, out_h, out_w, samples_per_bin)
    c = map_node.value.shape[0]
    return reshape(pooled, (c, out_h, out_w))
