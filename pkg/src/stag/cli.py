"""Command-line surface: dataset generation, training, evaluation, ablation
sweeps, gradient checking, and attention export.

Exit codes: 0 success, 1 verification failure, 2 numerical abort, 3 usage
error. Every command is deterministic given its seed flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, merge_flags, save_config
from .data import WorldSpec, generate_dataset, load_dataset, load_segment
from .errors import NumericalAbortError, StagError, ValidationError
from .heatmap import heatmap_frames, write_pgm
from .model import (
    EDGE_MODES,
    HIERARCHIES,
    ROI_SIZE,
    StagParams,
    VariantConfig,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .optim import OptimState, bce_with_logits
from .rng import make_rng
from .tensor import DiffNode, Tensor, grad_check
from .train import evaluate, train, write_metrics_csv


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit 2 on bad usage; the contract wants 3."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(3, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="stag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed_required=False):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, required=seed_required)
        p.add_argument("--data-dir", dest="data_dir")
        p.add_argument("--eval-dir", dest="eval_dir")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--epochs", type=int)
        p.add_argument("--num-classes", dest="num_classes", type=int)
        p.add_argument("--n-pos", dest="n_pos", type=int)
        p.add_argument("--n-neg", dest="n_neg", type=int)
        p.add_argument("--node-only", dest="node_only", action="store_const", const=True)
        p.add_argument("--edge-mode", dest="edge_mode", choices=sorted(EDGE_MODES))
        p.add_argument("--hierarchy", choices=sorted(HIERARCHIES))
        p.add_argument(
            "--temporal-aggregator",
            dest="temporal_aggregator",
            choices=["non_local", "lstm", "mean"],
        )
        p.add_argument("--t-frames", dest="t_frames", type=int)
        p.add_argument("--max-boxes", dest="max_boxes", type=int)
        p.add_argument("--feat-dim", dest="feat_dim", type=int)
        p.add_argument("--key-dim", dest="key_dim", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--decay", type=float)
        p.add_argument("--clip", type=float)

    p = sub.add_parser("gen-data", help="write synthetic segment datasets")
    add_common(p, seed_required=True)
    p.add_argument("--force", action="store_true", help="overwrite non-empty output dirs")

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    add_common(p, seed_required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train/evaluate the variant grid")
    add_common(p)

    p = sub.add_parser("grad-check", help="finite-difference check on a tiny model")
    add_common(p)

    p = sub.add_parser("dump-attention", help="attention JSON + PGM heatmaps")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--segment", required=True)
    return parser


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    return merge_flags(config, vars(args))


def _dataset_dims(segments):
    channels = segments[0].frames[0].feature_map.data.shape[0]
    return channels * ROI_SIZE * ROI_SIZE


def _check_dataset_dims(segments, config: RunConfig, what: str):
    seg = segments[0]
    if seg.t_frames != config.dims.t_frames or seg.max_boxes != config.dims.max_boxes:
        raise ValidationError(
            f"{what}: dataset is T={seg.t_frames}, N={seg.max_boxes} "
            f"but config wants T={config.dims.t_frames}, N={config.dims.max_boxes}"
        )


def _init_params(config: RunConfig, d_in: int) -> StagParams:
    return StagParams.init(
        config.seed,
        d_in=d_in,
        d=config.dims.feat_dim,
        d_k=config.dims.key_dim,
        num_classes=config.num_classes,
        identity_blocks=True,
    )


def cmd_gen_data(config: RunConfig, force: bool = False) -> int:
    targets = [(config.data_dir, "train", config.n_pos, config.n_neg)]
    if config.eval_dir:
        targets.append((config.eval_dir, "eval", config.n_pos // 4, config.n_neg // 4))
    for directory, _tag, _np_, _nn in targets:
        path = Path(directory)
        if path.exists() and any(path.iterdir()) and not force:
            raise ValidationError(f"{directory} is not empty; pass --force to overwrite")
    for directory, tag, n_pos, n_neg in targets:
        manifest = generate_dataset(directory, config.world, n_pos, n_neg, config.seed, tag)
        print(json.dumps({"dir": str(directory), **manifest}, sort_keys=True))
    return 0


def cmd_train(config: RunConfig) -> int:
    opt = config.optimizer
    print(
        f"lr={opt.lr:g} momentum={opt.momentum:g} clip={opt.clip:g} decay={opt.decay:g} "
        f"epochs={config.epochs} seed={config.seed}"
    )
    segments = load_dataset(config.data_dir)
    _check_dataset_dims(segments, config, "train")
    eval_segments = load_dataset(config.eval_dir) if config.eval_dir else None
    params = _init_params(config, _dataset_dims(segments))
    state = OptimState(lr=opt.lr, momentum=opt.momentum, clip_norm=opt.clip)
    rows = train(
        params,
        segments,
        state,
        config.epochs,
        variant=config.variant,
        seed=config.seed,
        eval_segments=eval_segments,
        decay=opt.decay,
        node_only=config.node_only,
    )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint", params, {"config": config.to_json()})
    write_metrics_csv(out / "metrics.csv", rows)
    save_config(out / "config.json", config)
    for row in rows[-2:]:
        print(json.dumps(row, sort_keys=True))
    print(f"checkpoint: {out / 'checkpoint'}")
    return 0


def _variant_for_eval(config: RunConfig, manifest: dict) -> tuple:
    stored = manifest.get("config", {})
    variant = (
        VariantConfig.from_json(stored["variant"]) if "variant" in stored else config.variant
    )
    node_only = bool(stored.get("node_only", config.node_only))
    return variant, node_only


def cmd_eval(config: RunConfig, checkpoint: str) -> int:
    params, manifest = load_checkpoint(checkpoint)
    variant, node_only = _variant_for_eval(config, manifest)
    segments = load_dataset(config.data_dir)
    stats = evaluate(params, segments, variant, node_only)
    print(json.dumps({k: float(v) for k, v in stats.items()}, sort_keys=True))
    return 0


# ablation grid: 12 variant cells, then the two baseline rows
ABLATION_CELLS = tuple(
    [
        {"edge_mode": em, "hierarchy": h, "temporal_aggregator": "non_local", "node_only": False}
        for em in ("union_roi", "node_concat", "cosine_sim")
        for h in ("space_and_time", "space_only", "time_only", "none")
    ]
    + [
        {"edge_mode": "union_roi", "hierarchy": "space_and_time",
         "temporal_aggregator": "lstm", "node_only": True},
        {"edge_mode": "union_roi", "hierarchy": "space_and_time",
         "temporal_aggregator": "lstm", "node_only": False},
    ]
)


def _run_ablation_cell(config_doc: dict, index: int):
    """One grid cell, isolated enough to run in a worker process."""
    config = RunConfig.from_json(config_doc)
    cell = ABLATION_CELLS[index]
    try:
        variant = VariantConfig(
            cell["edge_mode"], cell["hierarchy"], cell["temporal_aggregator"]
        )
        segments = load_dataset(config.data_dir)
        eval_segments = load_dataset(config.eval_dir) if config.eval_dir else segments
        params = _init_params(config, _dataset_dims(segments))
        opt = config.optimizer
        state = OptimState(lr=opt.lr, momentum=opt.momentum, clip_norm=opt.clip)
        train(
            params,
            segments,
            state,
            config.epochs,
            variant=variant,
            seed=config.seed,
            decay=opt.decay,
            node_only=cell["node_only"],
        )
        stats = evaluate(params, eval_segments, variant, cell["node_only"])
        return index, stats["accuracy"], stats["map"], ""
    except StagError as exc:
        return index, math.nan, math.nan, f"{type(exc).__name__}: {exc}"


def cmd_ablate(config: RunConfig) -> int:
    workers = int(os.environ.get("STAG_NUM_WORKERS", "1"))
    doc = config.to_json()
    indices = list(range(len(ABLATION_CELLS)))
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(min(workers, len(indices))) as pool:
            results = pool.starmap(_run_ablation_cell, [(doc, i) for i in indices])
    else:
        results = [_run_ablation_cell(doc, i) for i in indices]
    results.sort(key=lambda item: item[0])
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "table.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["edge_mode", "hierarchy", "temporal_aggregator", "node_only",
             "accuracy", "map", "note"]
        )
        for index, acc, mean_ap, note in results:
            cell = ABLATION_CELLS[index]
            writer.writerow(
                [
                    cell["edge_mode"],
                    cell["hierarchy"],
                    cell["temporal_aggregator"],
                    int(cell["node_only"]),
                    f"{acc:.12g}",
                    f"{mean_ap:.12g}",
                    note,
                ]
            )
    print(f"table: {table}")
    return 0


GRAD_CHECK_TOLERANCE = 1e-5


def grad_check_report(variant: VariantConfig, seed: int = 7):
    """Finite-difference errors for every parameter tensor and input map of a
    T=2, N=3, d=8 model; returns (rows, worst)."""
    from .data import generate_segment

    # T, N, d are fixed by contract; channels and arena are only as large as
    # the boxes need, since every map cell costs two forward passes
    spec = WorldSpec(
        t_frames=2, max_boxes=3, arena=12, channels=1,
        n_objects_min=2, n_objects_max=3, size_min=4.0, size_max=7.0,
    )
    segment = generate_segment(spec, True, seed)
    d_in = spec.channels * ROI_SIZE * ROI_SIZE
    params = StagParams.init(seed, d_in=d_in, d=8, d_k=4, num_classes=1)
    labels = segment.labels

    def loss_for(params_variant):
        logits, _ = forward(segment, params_variant, variant)
        return bce_with_logits(logits, labels)

    rows = []
    for name, node in params.named_params():
        err = grad_check(
            lambda leaf, n=name: loss_for(params.replaced(n, leaf)), node.value
        )
        rows.append((name, err))
    for t, frame in enumerate(segment.frames):
        def loss_for_map(leaf, t=t):
            maps = [
                DiffNode(f.feature_map.data, requires_grad=False) for f in segment.frames
            ]
            maps[t] = leaf
            logits, _ = forward(segment, params, variant, map_nodes=maps)
            return bce_with_logits(logits, labels)

        rows.append((f"frame_{t}.map", grad_check(loss_for_map, frame.feature_map.data)))
    worst = max(err for _, err in rows)
    return rows, worst


def cmd_grad_check(config: RunConfig) -> int:
    rows, worst = grad_check_report(config.variant, seed=config.seed or 7)
    failed = []
    for name, err in rows:
        status = "ok" if err < GRAD_CHECK_TOLERANCE else "FAIL"
        print(f"{name:16s} {err:.3e} {status}")
        if err >= GRAD_CHECK_TOLERANCE:
            failed.append(name)
    print(f"worst {worst:.3e} tolerance {GRAD_CHECK_TOLERANCE:g}")
    if failed:
        print(f"failed groups: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_dump_attention(config: RunConfig, checkpoint: str, segment_dir: str) -> int:
    params, manifest = load_checkpoint(checkpoint)
    variant, _node_only = _variant_for_eval(config, manifest)
    segment = load_segment(segment_dir)
    logits, record = forward(segment, params, variant)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames_doc = []
    for t, image, masses, top in heatmap_frames(segment, record):
        pgm = out / f"frame_{t:03d}.pgm"
        write_pgm(pgm, image)
        frames_doc.append(
            {
                "frame": t,
                "pgm": pgm.name,
                "box_mass": [float(v) for v in masses],
                "top_box": int(top),
            }
        )
    doc = {
        "segment_id": segment.segment_id,
        "logits": [float(v) for v in logits.value.data],
        "frames": frames_doc,
        "attention": record.to_json(),
    }
    (out / "attention.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(f"attention: {out / 'attention.json'} ({len(frames_doc)} frames)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(config, force=args.force)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "eval":
            return cmd_eval(config, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(config)
        if args.command == "grad-check":
            return cmd_grad_check(config)
        if args.command == "dump-attention":
            return cmd_dump_attention(config, args.checkpoint, args.segment)
        parser.error(f"unknown command {args.command}")
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (StagError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
