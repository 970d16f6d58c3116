"""Synthetic interaction clips: linear motion, blob-rendered features, contact labels.

The label is a function of pairwise geometry alone: a clip is positive exactly
when some pair of object boxes reaches the contact IoU threshold at some step.
That makes the label recomputable from the emitted boxes, which the tests
exploit as an oracle.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CapacityError, ShapeError, ValidationError
from .geometry import BBox, FeatureMap, iou
from .rng import derive_key, make_rng
from .tensor import Tensor, read_stg1, write_stg1


@dataclass
class Frame:
    """One time step: a feature map plus box slots aligned with a validity mask."""

    feature_map: FeatureMap
    boxes: list  # BBox or None per slot
    mask: np.ndarray  # bool, one flag per slot

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if len(self.boxes) != self.mask.shape[0]:
            raise ShapeError(f"{len(self.boxes)} box slots vs mask of {self.mask.shape[0]}")
        for i, box in enumerate(self.boxes):
            if (box is None) == bool(self.mask[i]):
                raise ValidationError(f"slot {i}: box presence disagrees with mask")

    @classmethod
    def from_boxes(cls, feature_map: FeatureMap, boxes: list, capacity: int) -> "Frame":
        if len(boxes) > capacity:
            raise CapacityError(f"{len(boxes)} boxes exceed capacity {capacity}")
        padded = list(boxes) + [None] * (capacity - len(boxes))
        mask = np.arange(capacity) < len(boxes)
        return cls(feature_map, padded, mask)

    @property
    def valid_boxes(self) -> list:
        return [b for b, m in zip(self.boxes, self.mask) if m]


@dataclass
class VideoSegment:
    frames: list
    labels: np.ndarray  # (num_classes,), each exactly 0.0 or 1.0
    segment_id: str
    seed: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise ValidationError(f"{self.segment_id}: labels must be exactly 0 or 1")
        widths = {f.mask.shape[0] for f in self.frames}
        if len(widths) > 1:
            raise ShapeError(f"{self.segment_id}: frames disagree on slot count {widths}")

    @property
    def t_frames(self) -> int:
        return len(self.frames)

    @property
    def max_boxes(self) -> int:
        return self.frames[0].mask.shape[0]


@dataclass
class WorldSpec:
    """Parameters of the synthetic world and its rendering."""

    t_frames: int = 8
    max_boxes: int = 6
    arena: int = 64
    channels: int = 4
    n_objects_min: int = 2
    n_objects_max: int = 6
    size_min: float = 6.0
    size_max: float = 14.0
    speed_min: float = 0.5
    speed_max: float = 3.0
    noise: float = 0.01
    contact_iou: float = 0.1
    separation_iou: float = 0.02
    contact_cap: float = 0.2
    near_prob: float = 0.0
    clearance_frac: float = 0.3
    sigma_frac: float = 0.12
    amp: float = 3.0
    stride: float = 1.0

    def __post_init__(self):
        if not (1 <= self.n_objects_min <= self.n_objects_max <= self.max_boxes):
            raise ValidationError("object count range must fit within max_boxes")
        if self.t_frames < 1 or self.arena < 8 or self.channels < 1:
            raise ValidationError("degenerate world dimensions")
        if not (0.0 < self.size_min <= self.size_max):
            raise ValidationError("bad object size range")
        if self.size_max > self.arena:
            raise ValidationError("objects must fit inside the arena")
        if not (0.0 <= self.separation_iou < self.contact_iou <= self.contact_cap):
            raise ValidationError("need separation_iou < contact_iou <= contact_cap")
        if not (0.0 <= self.near_prob <= 1.0 and 0.0 < self.sigma_frac <= 1.0):
            raise ValidationError("near_prob and sigma_frac out of range")
        if self.amp <= 0.0 or self.clearance_frac < 0.0:
            raise ValidationError("amp must be positive, clearance_frac non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "WorldSpec":
        return cls(**obj)


@dataclass
class _Track:
    x: float  # top-left at t=0
    y: float
    w: float
    h: float
    vx: float
    vy: float
    channel: int

    def box_at(self, t: int) -> BBox:
        return BBox(
            self.x + self.vx * t,
            self.y + self.vy * t,
            self.x + self.vx * t + self.w,
            self.y + self.vy * t + self.h,
        )


def _sample_track(spec: WorldSpec, rng) -> _Track:
    """A track whose box stays inside the arena for all t_frames steps."""
    last = spec.t_frames - 1
    for _ in range(64):
        w = float(rng.uniform(spec.size_min, spec.size_max))
        h = float(rng.uniform(spec.size_min, spec.size_max))
        x = float(rng.uniform(0.0, spec.arena - w))
        y = float(rng.uniform(0.0, spec.arena - h))
        speed = float(rng.uniform(spec.speed_min, spec.speed_max))
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        vx, vy = speed * np.cos(angle), speed * np.sin(angle)
        if 0.0 <= x + vx * last <= spec.arena - w and 0.0 <= y + vy * last <= spec.arena - h:
            return _Track(x, y, w, h, vx, vy, int(rng.integers(0, spec.channels)))
    # fall back to a parked object; always in bounds
    return _Track(x, y, w, h, 0.0, 0.0, int(rng.integers(0, spec.channels)))


def _max_pair_iou(tracks, spec: WorldSpec) -> float:
    best = 0.0
    for t in range(spec.t_frames):
        boxes = [trk.box_at(t) for trk in tracks]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                best = max(best, iou(boxes[i], boxes[j]))
    return best


def _tracks_contact(tracks, spec: WorldSpec) -> bool:
    return _max_pair_iou(tracks, spec) >= spec.contact_iou


def _min_clearance(tracks, spec: WorldSpec) -> float:
    """Smallest per-axis edge gap between any pair, as a fraction of mean size.

    Negative when boxes overlap on both axes; large when everything stays far
    apart. Used to keep negatives visually unambiguous.
    """
    worst = np.inf
    for t in range(spec.t_frames):
        boxes = [trk.box_at(t) for trk in tracks]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                gap_x = abs((a.x1 + a.x2) - (b.x1 + b.x2)) / 2.0 - (a.width + b.width) / 2.0
                gap_y = abs((a.y1 + a.y2) - (b.y1 + b.y2)) / 2.0 - (a.height + b.height) / 2.0
                scale = (a.width + a.height + b.width + b.height) / 4.0
                worst = min(worst, max(gap_x, gap_y) / scale)
    return worst


def _aim_graze(tracks, spec: WorldSpec, rng):
    """Steer track 1 so it brushes track 0 mid-clip without crossing through.

    Targets a point offset sideways from track 0's center by a fraction of the
    combined half-extent, which lands the peak overlap in the graze band rather
    than a dead-center collision.
    """
    t_hit = int(rng.integers(max(spec.t_frames // 2, 1), spec.t_frames))
    a, b = tracks[0], tracks[1]
    reach = (min(a.w, a.h) + min(b.w, b.h)) / 2.0
    angle = rng.uniform(0.0, 2.0 * np.pi)
    radius = rng.uniform(0.55, 0.85) * reach
    target_x = a.x + a.vx * t_hit + a.w / 2.0 + radius * np.cos(angle)
    target_y = a.y + a.vy * t_hit + a.h / 2.0 + radius * np.sin(angle)
    b.vx = (target_x - b.w / 2.0 - b.x) / t_hit
    b.vy = (target_y - b.h / 2.0 - b.y) / t_hit
    last = spec.t_frames - 1
    in_bounds = (
        0.0 <= b.x + b.vx * last <= spec.arena - b.w
        and 0.0 <= b.y + b.vy * last <= spec.arena - b.h
    )
    return in_bounds


def simulate_tracks(spec: WorldSpec, positive: bool, seed: int):
    """Deterministic track set whose contact flag equals `positive`.

    Rejection-samples worlds from streams derived from the seed. Positives
    must peak inside the graze band [contact_iou, contact_cap]; when a raw
    sample misses, one track is re-aimed to brush another and re-checked.
    Negatives must stay at or below separation_iou, and a seeded fraction of
    them are required to contain a near miss, so mere proximity of blobs never
    separates the classes. The accepted world depends only on
    (spec, positive, seed).
    """
    for attempt in range(400):
        rng = make_rng(seed, "world", attempt)
        count = int(rng.integers(spec.n_objects_min, spec.n_objects_max + 1))
        if positive and count < 2:
            count = 2
        want_near = rng.random() < spec.near_prob
        tracks = [_sample_track(spec, rng) for _ in range(count)]
        peak = _max_pair_iou(tracks, spec)
        if positive:
            if spec.contact_iou <= peak <= spec.contact_cap:
                return tracks
            if _aim_graze(tracks, spec, rng):
                peak = _max_pair_iou(tracks, spec)
                if spec.contact_iou <= peak <= spec.contact_cap:
                    return tracks
        else:
            if want_near and count >= 2:
                if 0.005 <= peak <= spec.separation_iou:
                    return tracks
            elif peak <= spec.separation_iou and (
                count < 2 or _min_clearance(tracks, spec) >= spec.clearance_frac
            ):
                return tracks
    raise ValidationError(f"could not satisfy positive={positive} for seed {seed}")


def render_frame(spec: WorldSpec, boxes, rng) -> FeatureMap:
    """Blob-render one frame: a Gaussian per box in its class channel, plus noise."""
    blobs = np.empty((len(boxes), 6), dtype=np.float64)
    for i, (box, channel) in enumerate(boxes):
        blobs[i] = (
            (box.x1 + box.x2) / 2.0,
            (box.y1 + box.y2) / 2.0,
            max(box.width * spec.sigma_frac, 0.5),
            max(box.height * spec.sigma_frac, 0.5),
            spec.amp,
            float(channel),
        )
    grid = kernels.render_blobs(spec.arena, spec.arena, spec.channels, blobs)
    if spec.noise > 0.0:
        grid = grid + rng.normal(0.0, spec.noise, size=grid.shape)
    return FeatureMap(Tensor(grid, check=False), stride=spec.stride)


def generate_segment(spec: WorldSpec, positive: bool, seed: int) -> VideoSegment:
    """One clip, bit-reproducible from (spec, positive, seed)."""
    tracks = simulate_tracks(spec, positive, seed)
    noise_rng = make_rng(seed, "render")
    frames = []
    for t in range(spec.t_frames):
        stepped = [(trk.box_at(t), trk.channel) for trk in tracks]
        fmap = render_frame(spec, stepped, noise_rng)
        frames.append(Frame.from_boxes(fmap, [b for b, _ in stepped], spec.max_boxes))
    label = 1.0 if positive else 0.0
    tag = "pos" if positive else "neg"
    return VideoSegment(frames, np.array([label]), f"{tag}_{seed:020d}", seed)


def random_segment(spec: WorldSpec, seed: int, positive_prob: float = 0.25) -> VideoSegment:
    """Positivity drawn at the given rate, then generated as usual."""
    positive = bool(make_rng(seed, "flag").random() < positive_prob)
    return generate_segment(spec, positive, seed)


def contact_label(segment: VideoSegment, contact_iou: float) -> float:
    """Recompute the collision label from the emitted boxes alone."""
    for frame in segment.frames:
        boxes = frame.valid_boxes
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if iou(boxes[i], boxes[j]) >= contact_iou:
                    return 1.0
    return 0.0


def save_segment(directory, segment: VideoSegment):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    strides = set()
    per_frame = []
    for t, frame in enumerate(segment.frames):
        write_stg1(directory / f"frame_{t:03d}.stg1", frame.feature_map.data)
        strides.add(frame.feature_map.stride)
        per_frame.append(
            {
                "boxes": [None if b is None else b.to_json() for b in frame.boxes],
                "mask": [bool(v) for v in frame.mask],
            }
        )
    if len(strides) != 1:
        raise ValidationError(f"{segment.segment_id}: frames disagree on stride")
    (directory / "boxes.json").write_text(
        json.dumps({"stride": strides.pop(), "frames": per_frame}, sort_keys=True)
    )
    (directory / "label.json").write_text(
        json.dumps(
            {
                "labels": [float(v) for v in segment.labels],
                "segment_id": segment.segment_id,
                "seed": segment.seed,
            },
            sort_keys=True,
        )
    )


def load_segment(directory) -> VideoSegment:
    directory = Path(directory)
    boxes_doc = json.loads((directory / "boxes.json").read_text())
    label_doc = json.loads((directory / "label.json").read_text())
    stride = float(boxes_doc["stride"])
    frames = []
    for t, frame_doc in enumerate(boxes_doc["frames"]):
        fmap = FeatureMap(read_stg1(directory / f"frame_{t:03d}.stg1"), stride=stride)
        boxes = [None if b is None else BBox.from_json(b) for b in frame_doc["boxes"]]
        frames.append(Frame(fmap, boxes, np.asarray(frame_doc["mask"], dtype=bool)))
    return VideoSegment(
        frames,
        np.asarray(label_doc["labels"], dtype=np.float64),
        str(label_doc["segment_id"]),
        int(label_doc["seed"]),
    )


def segment_seed(base_seed: int, tag: str, index: int) -> int:
    """Stable per-segment seed; 63-bit so it stays a friendly positive int."""
    return derive_key(base_seed, "segment", tag, index) & ((1 << 63) - 1)


def generate_dataset(directory, spec: WorldSpec, n_pos: int, n_neg: int, seed: int, tag: str = "train"):
    """Write n_pos + n_neg segments under directory; returns the manifest dict."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flags = [True] * n_pos + [False] * n_neg
    for index, positive in enumerate(flags):
        seg = generate_segment(spec, positive, segment_seed(seed, tag, index))
        save_segment(directory / f"seg_{index:05d}", seg)
    manifest = {
        "world": spec.to_json(),
        "n_pos": n_pos,
        "n_neg": n_neg,
        "seed": seed,
        "tag": tag,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return manifest


def load_dataset(directory) -> list:
    """All segments under directory, in name order."""
    directory = Path(directory)
    seg_dirs = sorted(p for p in directory.iterdir() if p.is_dir() and p.name.startswith("seg_"))
    if not seg_dirs:
        raise ValidationError(f"{directory}: no segment directories found")
    return [load_segment(p) for p in seg_dirs]
