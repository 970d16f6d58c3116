"""SGD with momentum, global-norm clipping, stepwise lr decay, and the loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalAbortError, ShapeError, ValidationError
from .tensor import DiffNode, _make


def bce_with_logits(logits: DiffNode, labels: np.ndarray) -> DiffNode:
    """Mean binary cross entropy over classes, computed on logits.

    Stable in both tails: loss_k = softplus((1 - 2 y_k) z_k) with
    softplus(t) = max(t, 0) + log1p(exp(-|t|)). Labels must be exactly 0 or 1.
    """
    labels = np.asarray(labels, dtype=np.float64)
    z = logits.value.data
    if labels.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs labels {labels.shape}")
    if not np.all(np.isin(labels, (0.0, 1.0))):
        raise ValidationError("bce_with_logits: labels must be exactly 0 or 1")
    t = (1.0 - 2.0 * labels) * z
    losses = np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))
    out_arr = np.array(losses.mean())
    k = float(z.size)

    def backward():
        if logits.requires_grad:
            g = float(out.grad.data.reshape(-1)[0])
            # sigmoid via the sign-split form; each branch only sees exp of a negative
            sig = np.empty_like(z)
            pos = z >= 0.0
            sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            expz = np.exp(z[~pos])
            sig[~pos] = expz / (1.0 + expz)
            logits.grad.data += g * (sig - labels) / k

    out = _make(out_arr, (logits,), backward)
    return out


@dataclass
class OptimState:
    """Momentum buffers plus the schedule position. One buffer per parameter,
    keyed and ordered by the model's parameter names."""

    lr: float
    momentum: float = 0.9
    clip_norm: float = 5.0
    epoch: int = 0
    velocities: dict = field(default_factory=dict)

    def velocity_for(self, name: str, shape) -> np.ndarray:
        if name not in self.velocities:
            self.velocities[name] = np.zeros(shape, dtype=np.float64)
        return self.velocities[name]


def global_grad_norm(named_params) -> float:
    total = 0.0
    for _, node in named_params:
        g = node.grad.data
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return float(np.sqrt(total))


def clip_gradients(named_params, clip_norm: float) -> float:
    """Scale all gradients down to the clip norm when they exceed it.

    Returns the pre-clip global norm. Non-finite gradients abort, naming the
    offending tensor.
    """
    for name, node in named_params:
        if not np.all(np.isfinite(node.grad.data)):
            raise NumericalAbortError(f"non-finite gradient in {name}")
    norm = global_grad_norm(named_params)
    if np.isfinite(clip_norm) and norm > clip_norm and norm > 0.0:
        factor = clip_norm / norm
        for _, node in named_params:
            node.grad.data *= factor
    return norm


def sgd_step(named_params, state: OptimState):
    """v <- momentum * v - lr * grad;  theta <- theta + v. Clips first."""
    clip_gradients(named_params, state.clip_norm)
    for name, node in named_params:
        v = state.velocity_for(name, node.value.shape)
        v *= state.momentum
        v -= state.lr * node.grad.data
        node.value.data += v


def lr_decay(state: OptimState, factor: float = 0.5):
    """Close out an epoch: scale the learning rate, advance the counter."""
    state.lr *= factor
    state.epoch += 1
