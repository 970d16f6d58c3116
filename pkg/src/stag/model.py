"""Spatio-temporal action graph model.

Per frame, every detected box becomes a node and every ordered pair of boxes a
relation. Node and relation features are pooled from the frame's feature map,
fused by a shared affine, attended over within the frame (all pairs as one
set), pooled to a frame vector, attended over across frames, pooled to a clip
vector, and classified.

Masking discipline: invalid slots hold exact zeros, attention excludes them
via the softmax mask, and pooled means count only valid entries, so a clip's
outputs are independent of its padding width.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tt
from .errors import DegenerateFrameError, ShapeError, ValidationError
from .geometry import roi_align_many, union_box
from .lstm import LstmParams, lstm_sequence
from .rng import make_rng
from .tensor import DiffNode, Tensor, read_stg1, write_stg1

EDGE_MODES = ("union_roi", "node_concat", "cosine_sim")
HIERARCHIES = ("space_and_time", "space_only", "time_only", "none")
TEMPORAL_AGGREGATORS = ("non_local", "lstm", "mean")

ROI_SIZE = 7


@dataclass(frozen=True)
class VariantConfig:
    """One architecture cell: how edges are built, which hierarchy levels run,
    and what aggregates over time."""

    edge_mode: str = "union_roi"
    hierarchy: str = "space_and_time"
    temporal_aggregator: str = "non_local"

    def __post_init__(self):
        if self.edge_mode not in EDGE_MODES:
            raise ValidationError(f"edge_mode {self.edge_mode!r} not in {EDGE_MODES}")
        if self.hierarchy not in HIERARCHIES:
            raise ValidationError(f"hierarchy {self.hierarchy!r} not in {HIERARCHIES}")
        if self.temporal_aggregator not in TEMPORAL_AGGREGATORS:
            raise ValidationError(
                f"temporal_aggregator {self.temporal_aggregator!r} not in {TEMPORAL_AGGREGATORS}"
            )

    @property
    def uses_space(self) -> bool:
        return self.hierarchy in ("space_and_time", "space_only")

    @property
    def uses_time(self) -> bool:
        return self.hierarchy in ("space_and_time", "time_only")

    def to_json(self) -> dict:
        return {
            "edge_mode": self.edge_mode,
            "hierarchy": self.hierarchy,
            "temporal_aggregator": self.temporal_aggregator,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VariantConfig":
        return cls(**obj)


@dataclass
class NonLocalBlock:
    """Set attention: embedded dot-product affinities, softmax over valid
    items, value projection, output projection, residual."""

    w_theta: DiffNode  # (d, d_k) query
    w_phi: DiffNode  # (d, d_k) key
    w_g: DiffNode  # (d, d) value
    w_out: DiffNode  # (d, d) output projection

    @property
    def d(self) -> int:
        return self.w_theta.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_theta.shape[1]

    @classmethod
    def init(cls, seed: int, d: int, d_k: int, name: str, identity: bool = False) -> "NonLocalBlock":
        def weight(tag, shape):
            rng = make_rng(seed, "init", name, tag)
            return DiffNode(Tensor(rng.normal(0.0, shape[0] ** -0.5, size=shape)))

        w_out = DiffNode(Tensor.zeros((d, d))) if identity else weight("w_out", (d, d))
        return cls(
            w_theta=weight("w_theta", (d, d_k)),
            w_phi=weight("w_phi", (d, d_k)),
            w_g=weight("w_g", (d, d)),
            w_out=w_out,
        )


def non_local(block: NonLocalBlock, items: DiffNode, valid: np.ndarray):
    """Attend over the valid rows of items (k, d).

    Returns (out, attention): out keeps masked rows exactly as they came in;
    attention is a (k, k) array whose masked rows and columns are zero and
    whose valid rows sum to one.
    """
    valid = np.asarray(valid, dtype=bool)
    k, d = items.value.shape
    if valid.shape != (k,):
        raise ShapeError(f"non_local: items {items.value.shape} vs valid {valid.shape}")
    if not valid.any():
        raise DegenerateFrameError("non_local over zero valid items")

    q = tt.matmul(items, block.w_theta)
    keys = tt.matmul(items, block.w_phi)
    scores = tt.scale(tt.matmul(q, tt.transpose(keys)), float(block.d_k) ** -0.5)
    attn = tt.softmax(scores, mask=valid[None, :])
    ctx = tt.matmul(attn, tt.matmul(items, block.w_g))
    transformed = tt.add(tt.matmul(ctx, block.w_out), items)

    keep = valid.astype(np.float64)[:, None]
    out = tt.add(tt.mul_const(transformed, keep), tt.mul_const(items, 1.0 - keep))
    record = attn.value.data.copy()
    record[~valid, :] = 0.0
    return out, record


@dataclass
class StagParams:
    """Every learnable tensor in the model, all float64 leaf nodes.

    The similarity embedding and LSTM weights are always allocated so the
    checkpoint layout does not depend on the variant; unused groups simply
    keep zero gradients.
    """

    node_w: DiffNode
    node_b: DiffNode
    edge_w: DiffNode
    edge_b: DiffNode
    sim_w: DiffNode
    sim_b: DiffNode
    pair_w: DiffNode
    pair_b: DiffNode
    spatial_nl: NonLocalBlock
    temporal_nl: NonLocalBlock
    temporal_lstm: LstmParams
    cls_w: DiffNode
    cls_b: DiffNode

    @property
    def d(self) -> int:
        return self.node_w.shape[1]

    @property
    def d_k(self) -> int:
        return self.spatial_nl.d_k

    @property
    def d_in(self) -> int:
        return self.node_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[1]

    @classmethod
    def init(
        cls,
        seed: int,
        d_in: int,
        d: int,
        d_k: int,
        num_classes: int = 1,
        identity_blocks: bool = False,
    ) -> "StagParams":
        def weight(name, shape):
            rng = make_rng(seed, "init", name)
            return DiffNode(Tensor(rng.normal(0.0, shape[0] ** -0.5, size=shape)))

        def bias(shape):
            return DiffNode(Tensor.zeros(shape))

        return cls(
            node_w=weight("node_w", (d_in, d)),
            node_b=bias((d,)),
            edge_w=weight("edge_w", (d_in, d)),
            edge_b=bias((d,)),
            sim_w=weight("sim_w", (1, d)),
            sim_b=bias((d,)),
            pair_w=weight("pair_w", (3 * d, d)),
            pair_b=bias((d,)),
            spatial_nl=NonLocalBlock.init(seed, d, d_k, "spatial", identity=identity_blocks),
            temporal_nl=NonLocalBlock.init(seed, d, d_k, "temporal", identity=identity_blocks),
            temporal_lstm=LstmParams.init(seed, d, d),
            cls_w=weight("cls_w", (d, num_classes)),
            cls_b=bias((num_classes,)),
        )

    def named_params(self) -> list:
        """Fixed-order (name, node) pairs; checkpoint layout and optimizer state follow it."""
        return [
            ("node_w", self.node_w),
            ("node_b", self.node_b),
            ("edge_w", self.edge_w),
            ("edge_b", self.edge_b),
            ("sim_w", self.sim_w),
            ("sim_b", self.sim_b),
            ("pair_w", self.pair_w),
            ("pair_b", self.pair_b),
            ("spatial_nl.w_theta", self.spatial_nl.w_theta),
            ("spatial_nl.w_phi", self.spatial_nl.w_phi),
            ("spatial_nl.w_g", self.spatial_nl.w_g),
            ("spatial_nl.w_out", self.spatial_nl.w_out),
            ("temporal_nl.w_theta", self.temporal_nl.w_theta),
            ("temporal_nl.w_phi", self.temporal_nl.w_phi),
            ("temporal_nl.w_g", self.temporal_nl.w_g),
            ("temporal_nl.w_out", self.temporal_nl.w_out),
            ("temporal_lstm.w_x", self.temporal_lstm.w_x),
            ("temporal_lstm.w_h", self.temporal_lstm.w_h),
            ("temporal_lstm.b", self.temporal_lstm.b),
            ("cls_w", self.cls_w),
            ("cls_b", self.cls_b),
        ]

    def zero_grads(self):
        for _, node in self.named_params():
            node.zero_grad()

    def replaced(self, name: str, node: DiffNode) -> "StagParams":
        """Copy with one named leaf swapped out; used by gradient checking."""
        mapping = dict(self.named_params())
        if name not in mapping:
            raise ValidationError(f"unknown parameter {name!r}")
        mapping[name] = node
        return StagParams(
            node_w=mapping["node_w"],
            node_b=mapping["node_b"],
            edge_w=mapping["edge_w"],
            edge_b=mapping["edge_b"],
            sim_w=mapping["sim_w"],
            sim_b=mapping["sim_b"],
            pair_w=mapping["pair_w"],
            pair_b=mapping["pair_b"],
            spatial_nl=NonLocalBlock(
                mapping["spatial_nl.w_theta"],
                mapping["spatial_nl.w_phi"],
                mapping["spatial_nl.w_g"],
                mapping["spatial_nl.w_out"],
            ),
            temporal_nl=NonLocalBlock(
                mapping["temporal_nl.w_theta"],
                mapping["temporal_nl.w_phi"],
                mapping["temporal_nl.w_g"],
                mapping["temporal_nl.w_out"],
            ),
            temporal_lstm=LstmParams(
                mapping["temporal_lstm.w_x"],
                mapping["temporal_lstm.w_h"],
                mapping["temporal_lstm.b"],
            ),
            cls_w=mapping["cls_w"],
            cls_b=mapping["cls_b"],
        )


@dataclass
class GraphFeatures:
    """Embedded per-frame graphs: nodes (T, N, d), edges (T, N, N, d), slot mask (T, N)."""

    nodes: DiffNode
    edges: DiffNode
    mask: np.ndarray

    @property
    def pair_mask(self) -> np.ndarray:
        """(T, N, N): a pair is valid exactly when both endpoints are."""
        return self.mask[:, :, None] & self.mask[:, None, :]


@dataclass
class AttentionRecord:
    """Attention snapshots from one forward pass.

    spatial is (T, N*N, N*N) over pair slots (empty when the spatial stage is
    off); temporal is (T, T) (empty for lstm/mean aggregation); mask is the
    (T, N) slot mask.
    """

    spatial: np.ndarray
    temporal: np.ndarray
    mask: np.ndarray

    def to_json(self) -> dict:
        return {
            "spatial": self.spatial.tolist(),
            "temporal": self.temporal.tolist(),
            "mask": self.mask.tolist(),
        }


def _wrap_maps(segment, map_nodes):
    if map_nodes is None:
        return [
            DiffNode(frame.feature_map.data, requires_grad=False) for frame in segment.frames
        ]
    if len(map_nodes) != len(segment.frames):
        raise ShapeError(f"{len(map_nodes)} map nodes for {len(segment.frames)} frames")
    return map_nodes


def build_graph_features(
    segment,
    params: StagParams,
    edge_mode: str = "union_roi",
    map_nodes: list | None = None,
) -> GraphFeatures:
    """Pool and embed per-frame node and relation features.

    union_roi pools the union box of each pair from the same map the nodes came
    from; node_concat leaves the edge slot as a learned constant (pair content
    then enters only through aggregation); cosine_sim embeds the scalar cosine
    between the two node embeddings through a learned 1 -> d affine.
    """
    if edge_mode not in EDGE_MODES:
        raise ValidationError(f"edge_mode {edge_mode!r} not in {EDGE_MODES}")
    maps = _wrap_maps(segment, map_nodes)
    t_frames = len(segment.frames)
    capacity = segment.frames[0].mask.shape[0]
    d = params.d
    mask = np.stack([frame.mask for frame in segment.frames])

    node_slices = []
    edge_slices = []
    for t, frame in enumerate(segment.frames):
        valid_idx = np.flatnonzero(frame.mask)
        if valid_idx.size == 0:
            raise DegenerateFrameError(f"frame {t} has no valid boxes")
        boxes = [frame.boxes[i] for i in valid_idx]
        stride = frame.feature_map.stride

        pooled = roi_align_many(maps[t], boxes, stride, ROI_SIZE, ROI_SIZE)
        flat = tt.reshape(pooled, (len(boxes), params.d_in))
        z = tt.linear(flat, params.node_w, params.node_b)
        node_slices.append(tt.scatter_rows(z, valid_idx, capacity))

        pair_index = np.array(
            [i * capacity + j for i in valid_idx for j in valid_idx], dtype=np.intp
        )
        if edge_mode == "union_roi":
            union_boxes = [union_box(a, b) for a in boxes for b in boxes]
            pooled_u = roi_align_many(maps[t], union_boxes, stride, ROI_SIZE, ROI_SIZE)
            flat_u = tt.reshape(pooled_u, (len(union_boxes), params.d_in))
            e = tt.linear(flat_u, params.edge_w, params.edge_b)
        elif edge_mode == "node_concat":
            blank = DiffNode(Tensor.zeros((len(boxes) ** 2, params.d_in)), requires_grad=False)
            e = tt.linear(blank, params.edge_w, params.edge_b)
        else:  # cosine_sim
            sims = tt.reshape(tt.cosine_matrix(z), (len(boxes) ** 2, 1))
            e = tt.linear(sims, params.sim_w, params.sim_b)
        edge_slices.append(tt.scatter_rows(e, pair_index, capacity * capacity))

    nodes = tt.concat([tt.reshape(s, (1, capacity, d)) for s in node_slices], axis=0)
    edges = tt.concat(
        [tt.reshape(s, (1, capacity, capacity, d)) for s in edge_slices], axis=0
    )
    return GraphFeatures(nodes=nodes, edges=edges, mask=mask)


def aggregate_pairs(graph: GraphFeatures, params: StagParams) -> DiffNode:
    """Fuse (node_i, edge_ij, node_j) into one feature per ordered pair.

    Concat along features, affine 3d -> d, relu; masked pairs stay exactly zero.
    """
    t_frames, capacity, d = graph.nodes.value.shape
    z_i = tt.expand_repeat(graph.nodes, 2, capacity)  # broadcast i over the j axis
    z_j = tt.expand_repeat(graph.nodes, 1, capacity)
    cat = tt.concat([z_i, graph.edges, z_j], axis=3)
    fused = tt.relu(tt.linear(cat, params.pair_w, params.pair_b))
    return tt.mul_const(fused, graph.pair_mask[..., None].astype(np.float64))


def spatial_stage(pairs: DiffNode, pair_mask: np.ndarray, params: StagParams):
    """Within-frame attention over all pair slots, then masked mean to (T, d)."""
    t_frames, capacity, _, d = pairs.value.shape
    k = capacity * capacity
    flat = tt.reshape(pairs, (t_frames, k, d))
    flat_mask = pair_mask.reshape(t_frames, k)
    frame_feats = []
    attention = np.zeros((t_frames, k, k))
    for t in range(t_frames):
        items = tt.reshape(tt.narrow(flat, 0, t, 1), (k, d))
        out, attention[t] = non_local(params.spatial_nl, items, flat_mask[t])
        frame_feats.append(tt.mean_over_axis(out, 0, mask=flat_mask[t]))
    return tt.stack_rows(frame_feats), attention


def frame_pool(pairs: DiffNode, pair_mask: np.ndarray):
    """Spatial-stage ablation: plain masked mean over each frame's valid pairs."""
    t_frames, capacity, _, d = pairs.value.shape
    flat = tt.reshape(pairs, (t_frames, capacity * capacity, d))
    return tt.mean_over_axis(flat, 1, mask=pair_mask.reshape(t_frames, -1))


def temporal_stage(frame_feats: DiffNode, params: StagParams, aggregator: str = "non_local"):
    """Aggregate (T, d) frame features to a clip vector (d,)."""
    t_frames = frame_feats.value.shape[0]
    if aggregator == "non_local":
        out, attention = non_local(
            params.temporal_nl, frame_feats, np.ones(t_frames, dtype=bool)
        )
        return tt.mean_over_axis(out, 0), attention
    if aggregator == "lstm":
        return lstm_sequence(frame_feats, params.temporal_lstm), np.zeros((0, 0))
    if aggregator == "mean":
        return tt.mean_over_axis(frame_feats, 0), np.zeros((0, 0))
    raise ValidationError(f"unknown temporal aggregator {aggregator!r}")


def forward(
    segment,
    params: StagParams,
    variant: VariantConfig = VariantConfig(),
    map_nodes: list | None = None,
):
    """Clip logits plus attention records for one segment.

    Returns (logits DiffNode of shape (num_classes,), AttentionRecord).
    """
    graph = build_graph_features(segment, params, variant.edge_mode, map_nodes)
    pairs = aggregate_pairs(graph, params)
    pair_mask = graph.pair_mask
    t_frames, capacity = graph.mask.shape
    k = capacity * capacity

    spatial_attn = np.zeros((0, k, k))
    temporal_attn = np.zeros((0, 0))

    if variant.hierarchy == "none":
        # one direct mean over every valid pair of every frame
        flat = tt.reshape(pairs, (t_frames * k, params.d))
        video = tt.mean_over_axis(flat, 0, mask=pair_mask.reshape(-1))
    else:
        if variant.uses_space:
            frame_feats, spatial_attn = spatial_stage(pairs, pair_mask, params)
        else:
            frame_feats = frame_pool(pairs, pair_mask)
        if variant.uses_time:
            video, temporal_attn = temporal_stage(frame_feats, params, variant.temporal_aggregator)
        else:
            video = tt.mean_over_axis(frame_feats, 0)

    logits = tt.reshape(
        tt.linear(tt.reshape(video, (1, params.d)), params.cls_w, params.cls_b),
        (params.num_classes,),
    )
    record = AttentionRecord(spatial=spatial_attn, temporal=temporal_attn, mask=graph.mask.copy())
    return logits, record


def node_only_forward(
    segment,
    params: StagParams,
    aggregator: str = "lstm",
    map_nodes: list | None = None,
) -> DiffNode:
    """Edge-free baseline: embed boxes, mean per frame, aggregate over time.

    No pair features are built, so pairwise structure is invisible to it.
    """
    maps = _wrap_maps(segment, map_nodes)
    capacity = segment.frames[0].mask.shape[0]
    d = params.d
    slices = []
    for t, frame in enumerate(segment.frames):
        valid_idx = np.flatnonzero(frame.mask)
        if valid_idx.size == 0:
            raise DegenerateFrameError(f"frame {t} has no valid boxes")
        boxes = [frame.boxes[i] for i in valid_idx]
        pooled = roi_align_many(maps[t], boxes, frame.feature_map.stride, ROI_SIZE, ROI_SIZE)
        flat = tt.reshape(pooled, (len(boxes), params.d_in))
        z = tt.linear(flat, params.node_w, params.node_b)
        slices.append(tt.scatter_rows(z, valid_idx, capacity))
    nodes = tt.concat([tt.reshape(s, (1, capacity, d)) for s in slices], axis=0)
    mask = np.stack([frame.mask for frame in segment.frames])
    frame_feats = tt.mean_over_axis(nodes, 1, mask=mask)
    video, _ = temporal_stage(frame_feats, params, aggregator)
    return tt.reshape(
        tt.linear(tt.reshape(video, (1, d)), params.cls_w, params.cls_b),
        (params.num_classes,),
    )


def ensemble_average(scores_a: np.ndarray, scores_b: np.ndarray) -> np.ndarray:
    """Mean of two probability vectors; shapes must agree."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ensemble_average: {a.shape} vs {b.shape}")
    return (a + b) / 2.0


def save_checkpoint(directory, params: StagParams, manifest: dict):
    """One STG1 file per parameter plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, node in params.named_params():
        write_stg1(directory / f"{name}.stg1", node.value)
    doc = dict(manifest)
    doc.update({"d": params.d, "d_k": params.d_k, "d_in": params.d_in,
                "num_classes": params.num_classes})
    (directory / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=2))


def load_checkpoint(directory):
    """Returns (params, manifest). Missing or misshapen tensors raise."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = StagParams.init(
        0, int(manifest["d_in"]), int(manifest["d"]), int(manifest["d_k"]),
        int(manifest["num_classes"]),
    )
    for name, node in params.named_params():
        path = directory / f"{name}.stg1"
        if not path.exists():
            raise ValidationError(f"checkpoint is missing {name}.stg1")
        loaded = read_stg1(path)
        if loaded.shape != node.value.shape:
            raise ShapeError(
                f"{name}: checkpoint shape {loaded.shape} vs expected {node.value.shape}"
            )
        node.value.data[...] = loaded.data
    return params, manifest
