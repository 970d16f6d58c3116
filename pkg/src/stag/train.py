"""Training and evaluation loops. One segment per step, reproducible end to end."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import NumericalAbortError
from .metrics import accuracy, mean_average_precision
from .model import StagParams, VariantConfig, forward, node_only_forward
from .optim import OptimState, bce_with_logits, lr_decay, sgd_step
from .rng import make_rng
from .tensor import scale

METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "map", "lr")


def _segment_logits(segment, params, variant, node_only):
    if node_only:
        return node_only_forward(segment, params, aggregator=variant.temporal_aggregator)
    logits, _ = forward(segment, params, variant)
    return logits


def _probs(logits_value: np.ndarray) -> np.ndarray:
    z = logits_value
    t = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def evaluate(params: StagParams, segments, variant=VariantConfig(), node_only: bool = False) -> dict:
    """Forward-only pass over a split: mean loss, accuracy, mAP."""
    losses = []
    scores = []
    labels = []
    for segment in segments:
        logits = _segment_logits(segment, params, variant, node_only)
        loss = bce_with_logits(logits, segment.labels)
        losses.append(loss.value.item())
        scores.append(_probs(logits.value.data))
        labels.append(segment.labels)
    return {
        "loss": float(np.mean(losses)),
        "accuracy": accuracy(np.stack(scores), np.stack(labels)),
        "map": mean_average_precision(np.stack(scores), np.stack(labels)),
    }


def train(
    params: StagParams,
    segments,
    state: OptimState,
    epochs: int,
    *,
    variant: VariantConfig = VariantConfig(),
    seed: int = 0,
    eval_segments=None,
    decay: float = 0.5,
    node_only: bool = False,
    accumulate: int = 1,
) -> list:
    """SGD over the segments; returns one metrics row per epoch per split.

    Iteration order is a seeded shuffle per epoch. Train rows report running
    (pre-update) metrics; eval rows re-run the eval split after the epoch.
    Aborts on a non-finite loss, naming the segment.
    """
    rows = []
    params.zero_grads()
    for epoch in range(epochs):
        order = make_rng(seed, "order", epoch).permutation(len(segments))
        lr_used = state.lr
        losses = []
        scores = []
        labels = []
        for step, segment_index in enumerate(order):
            segment = segments[int(segment_index)]
            logits = _segment_logits(segment, params, variant, node_only)
            loss = bce_with_logits(logits, segment.labels)
            loss_value = loss.value.item()
            if not np.isfinite(loss_value):
                raise NumericalAbortError(f"non-finite loss on segment {segment.segment_id}")
            losses.append(loss_value)
            scores.append(_probs(logits.value.data))
            labels.append(segment.labels)
            if accumulate > 1:
                scale(loss, 1.0 / accumulate).backward()
            else:
                loss.backward()
            if (step + 1) % accumulate == 0 or step + 1 == len(order):
                sgd_step(params.named_params(), state)
                params.zero_grads()
        rows.append(
            {
                "epoch": epoch,
                "split": "train",
                "loss": float(np.mean(losses)),
                "accuracy": accuracy(np.stack(scores), np.stack(labels)),
                "map": mean_average_precision(np.stack(scores), np.stack(labels)),
                "lr": lr_used,
            }
        )
        if eval_segments:
            stats = evaluate(params, eval_segments, variant, node_only)
            rows.append({"epoch": epoch, "split": "eval", "lr": lr_used, **stats})
        lr_decay(state, decay)
    return rows


def write_metrics_csv(path, rows):
    """Fixed header and %.12g floats so identical runs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row["epoch"],
                    row["split"],
                    f"{row['loss']:.12g}",
                    f"{row['accuracy']:.12g}",
                    f"{row['map']:.12g}",
                    f"{row['lr']:.12g}",
                ]
            )
