"""Dense float64 tensors with reverse-mode automatic differentiation.

Two layers: Tensor is a plain value (row-major float64 buffer plus shape),
DiffNode wraps a Tensor into a computation graph node. Ops are module-level
functions over DiffNodes; each records a closure that propagates the output
gradient to its parents. backward() replays the tape in reverse topological
order.

Gradient semantics: leaf gradients accumulate additively across backward()
calls until zero_grad(); interior gradients are reset at the start of every
backward() so repeated calls give exact multiples on the leaves.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import (
    DegeneratePoolError,
    DegenerateRowError,
    NumericalAbortError,
    ShapeError,
    ValidationError,
    ZeroNormError,
)

__all__ = [
    "Tensor",
    "DiffNode",
    "add",
    "mul",
    "scale",
    "mul_const",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "mean_over_axis",
    "concat",
    "reshape",
    "transpose",
    "narrow",
    "scatter_rows",
    "expand_repeat",
    "cosine_sim",
    "cosine_matrix",
    "stack_rows",
    "no_grad",
    "grad_check",
    "read_stg1",
    "write_stg1",
]


class Tensor:
    """Row-major float64 array. The data buffer is flat in memory; shape is view metadata."""

    __slots__ = ("data",)

    def __init__(self, data, check: bool = True):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise ValidationError("tensor contains non-finite values")
        self.data = arr

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float64), check=False)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def flat(self) -> np.ndarray:
        """The underlying buffer as a flat row-major view."""
        return self.data.reshape(-1)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), check=False)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class DiffNode:
    """A Tensor plus its gradient buffer and a backward closure.

    Construct directly only for leaves (parameters, inputs); ops build interior
    nodes. grad always has value's shape and starts at zero.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = True):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self.value = value
        self.grad = Tensor.zeros(value.shape)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self):
        self.grad.data[...] = 0.0

    def backward(self):
        """Backpropagate from a scalar output.

        Interior gradients are recomputed from scratch; leaf gradients
        accumulate, so two consecutive calls double them.
        """
        if self.value.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        if self.grad is None:
            raise ValidationError("backward() through a graph built under no_grad()")
        order = self._topo_order()
        for node in order:
            if node._parents:
                node.grad.data[...] = 0.0
        self.grad.data.reshape(-1)[0] += 1.0
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward()

    def _topo_order(self):
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def __add__(self, other):
        if isinstance(other, DiffNode):
            return add(self, other)
        return scale(self, 1.0, shift=float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, DiffNode):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, DiffNode):
            return add(self, scale(other, -1.0))
        return scale(self, 1.0, shift=-float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"DiffNode(shape={self.shape}, requires_grad={self.requires_grad})"


_grad_enabled = True


@contextmanager
def no_grad():
    """Run ops without recording the tape; values flow, gradients do not.

    Used for pure evaluation loops (finite differences, metric passes) where
    graph bookkeeping would otherwise dominate the runtime.
    """
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _make(value_arr, parents, backward_fn) -> DiffNode:
    node = DiffNode.__new__(DiffNode)
    node.value = Tensor(value_arr, check=False)
    if not _grad_enabled:
        node.grad = None
        node._parents = ()
        node.requires_grad = False
        node._backward = None
        return node
    node.grad = Tensor.zeros(value_arr.shape)
    node._parents = tuple(parents)
    node.requires_grad = any(p.requires_grad for p in node._parents)
    node._backward = backward_fn if node.requires_grad else None
    return node


def _same_shape(a: DiffNode, b: DiffNode, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    _same_shape(a, b, "add")
    out_arr = a.value.data + b.value.data

    def backward():
        g = out.grad.data
        if a.requires_grad:
            a.grad.data += g
        if b.requires_grad:
            b.grad.data += g

    out = _make(out_arr, (a, b), backward)
    return out


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    """Elementwise product of same-shape nodes."""
    _same_shape(a, b, "mul")
    out_arr = a.value.data * b.value.data

    def backward():
        g = out.grad.data
        if a.requires_grad:
            a.grad.data += g * b.value.data
        if b.requires_grad:
            b.grad.data += g * a.value.data

    out = _make(out_arr, (a, b), backward)
    return out


def scale(x: DiffNode, factor: float, shift: float = 0.0) -> DiffNode:
    out_arr = x.value.data * factor + shift

    def backward():
        if x.requires_grad:
            x.grad.data += out.grad.data * factor

    out = _make(out_arr, (x,), backward)
    return out


def mul_const(x: DiffNode, const: np.ndarray) -> DiffNode:
    """Elementwise product with a non-differentiated constant, broadcast against x."""
    const = np.asarray(const, dtype=np.float64)
    out_arr = x.value.data * const
    if out_arr.shape != x.shape:
        raise ShapeError(f"mul_const: constant {const.shape} does not broadcast to {x.shape}")

    def backward():
        if x.requires_grad:
            x.grad.data += out.grad.data * const

    out = _make(out_arr, (x,), backward)
    return out


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    A, B = a.value.data, b.value.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: shapes {A.shape} and {B.shape} incompatible")
    out_arr = A @ B

    def backward():
        g = out.grad.data
        if a.requires_grad:
            a.grad.data += g @ B.T
        if b.requires_grad:
            b.grad.data += A.T @ g

    out = _make(out_arr, (a, b), backward)
    return out


def linear(x: DiffNode, w: DiffNode, b: DiffNode) -> DiffNode:
    """Affine map over the last axis: y[..., q] = x[..., p] @ w[p, q] + b[q]."""
    X, W, B = x.value.data, w.value.data, b.value.data
    if W.ndim != 2 or X.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {X.shape} vs weight {W.shape}")
    if B.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {B.shape} vs weight {W.shape}")
    p, q = W.shape
    x2 = X.reshape(-1, p)
    out_arr = (x2 @ W + B).reshape(X.shape[:-1] + (q,))

    def backward():
        g2 = out.grad.data.reshape(-1, q)
        if w.requires_grad:
            w.grad.data += x2.T @ g2
        if b.requires_grad:
            b.grad.data += g2.sum(axis=0)
        if x.requires_grad:
            x.grad.data += (g2 @ W.T).reshape(X.shape)

    out = _make(out_arr, (x, w, b), backward)
    return out


def relu(x: DiffNode) -> DiffNode:
    X = x.value.data
    out_arr = np.maximum(X, 0.0)

    def backward():
        if x.requires_grad:
            x.grad.data += out.grad.data * (X > 0.0)

    out = _make(out_arr, (x,), backward)
    return out


def sigmoid(x: DiffNode) -> DiffNode:
    X = x.value.data
    t = np.exp(-np.abs(X))
    out_arr = np.where(X >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))

    def backward():
        if x.requires_grad:
            x.grad.data += out.grad.data * out_arr * (1.0 - out_arr)

    out = _make(out_arr, (x,), backward)
    return out


def tanh(x: DiffNode) -> DiffNode:
    out_arr = np.tanh(x.value.data)

    def backward():
        if x.requires_grad:
            x.grad.data += out.grad.data * (1.0 - out_arr * out_arr)

    out = _make(out_arr, (x,), backward)
    return out


def softmax(x: DiffNode, mask: np.ndarray | None = None) -> DiffNode:
    """Softmax over the last axis.

    mask (broadcastable boolean, True = keep) excludes entries: they come out
    exactly 0.0 and receive zero gradient. A row with nothing left raises.
    """
    X = x.value.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), X.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every entry masked")
        shifted = np.where(mask, X, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        e[~mask] = 0.0
    else:
        shifted = X - X.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    out_arr = e / e.sum(axis=-1, keepdims=True)

    def backward():
        g = out.grad.data
        if x.requires_grad:
            inner = (g * out_arr).sum(axis=-1, keepdims=True)
            x.grad.data += out_arr * (g - inner)

    out = _make(out_arr, (x,), backward)
    return out


def mean_over_axis(x: DiffNode, axis: int, mask: np.ndarray | None = None) -> DiffNode:
    """Mean along one axis, restricted to unmasked entries.

    mask covers x's shape, or x's shape minus the trailing feature axis (then
    every feature moves together). Slices with zero unmasked entries raise.
    """
    X = x.value.data
    axis = axis % X.ndim
    if mask is None:
        maskf = np.ones_like(X)
        count = np.float64(X.shape[axis])
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape == X.shape[:-1]:
            mask = mask[..., None]
        maskf = np.broadcast_to(mask, X.shape).astype(np.float64)
        count = maskf.sum(axis=axis)
        if np.any(count == 0.0):
            raise DegeneratePoolError("mean over a slice with zero unmasked entries")
    out_arr = (X * maskf).sum(axis=axis) / count

    def backward():
        if x.requires_grad:
            g = np.expand_dims(out.grad.data / count, axis)
            x.grad.data += g * maskf

    out = _make(out_arr, (x,), backward)
    return out


def concat(nodes, axis: int = 0) -> DiffNode:
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat of zero tensors")
    arrs = [n.value.data for n in nodes]
    out_arr = np.concatenate(arrs, axis=axis)
    axis_n = axis % out_arr.ndim
    offsets = np.cumsum([0] + [a.shape[axis_n] for a in arrs])

    def backward():
        g = out.grad.data
        index = [slice(None)] * g.ndim
        for node, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            if node.requires_grad:
                index[axis_n] = slice(start, stop)
                node.grad.data += g[tuple(index)]

    out = _make(out_arr, nodes, backward)
    return out


def reshape(x: DiffNode, shape) -> DiffNode:
    out_arr = x.value.data.reshape(shape)

    def backward():
        if x.requires_grad:
            x.grad.data += out.grad.data.reshape(x.shape)

    out = _make(out_arr, (x,), backward)
    return out


def transpose(x: DiffNode) -> DiffNode:
    """Swap the two axes of a matrix."""
    X = x.value.data
    if X.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {X.shape}")
    out_arr = X.T.copy()

    def backward():
        if x.requires_grad:
            x.grad.data += out.grad.data.T

    out = _make(out_arr, (x,), backward)
    return out


def narrow(x: DiffNode, axis: int, start: int, length: int) -> DiffNode:
    """Contiguous slice [start, start+length) along one axis."""
    X = x.value.data
    axis = axis % X.ndim
    if start < 0 or start + length > X.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis of size {X.shape[axis]}")
    index = [slice(None)] * X.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_arr = X[index].copy()

    def backward():
        if x.requires_grad:
            x.grad.data[index] += out.grad.data

    out = _make(out_arr, (x,), backward)
    return out


def scatter_rows(x: DiffNode, index, n_rows: int) -> DiffNode:
    """Spread rows of x into a zero matrix of n_rows rows at distinct indices."""
    X = x.value.data
    index = np.asarray(index, dtype=np.intp)
    if X.ndim != 2 or index.shape != (X.shape[0],):
        raise ShapeError(f"scatter_rows: data {X.shape} vs index {index.shape}")
    if len(np.unique(index)) != len(index):
        raise ValidationError("scatter_rows: duplicate target rows")
    out_arr = np.zeros((n_rows, X.shape[1]), dtype=np.float64)
    out_arr[index] = X

    def backward():
        if x.requires_grad:
            x.grad.data += out.grad.data[index]

    out = _make(out_arr, (x,), backward)
    return out


def expand_repeat(x: DiffNode, axis: int, reps: int) -> DiffNode:
    """Insert a new axis of size reps by repetition; gradient sums back over it."""
    out_arr = np.repeat(np.expand_dims(x.value.data, axis), reps, axis=axis)

    def backward():
        if x.requires_grad:
            x.grad.data += out.grad.data.sum(axis=axis)

    out = _make(out_arr, (x,), backward)
    return out


def cosine_sim(a: DiffNode, b: DiffNode) -> DiffNode:
    """Cosine of the angle between two 1-D vectors, as a scalar node."""
    A, B = a.value.data, b.value.data
    if A.ndim != 1 or A.shape != B.shape:
        raise ShapeError(f"cosine_sim: shapes {A.shape} and {B.shape}")
    na = float(np.linalg.norm(A))
    nb = float(np.linalg.norm(B))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine_sim with a zero-norm input")
    c = float(A @ B) / (na * nb)
    out_arr = np.array(c)

    def backward():
        g = float(out.grad.data.reshape(-1)[0])
        if a.requires_grad:
            a.grad.data += g * (B / (na * nb) - c * A / (na * na))
        if b.requires_grad:
            b.grad.data += g * (A / (na * nb) - c * B / (nb * nb))

    out = _make(out_arr, (a, b), backward)
    return out


def cosine_matrix(x: DiffNode) -> DiffNode:
    """All-pairs cosine similarity of the rows of x: out[i, j] = cos(x_i, x_j)."""
    X = x.value.data
    if X.ndim != 2:
        raise ShapeError(f"cosine_matrix: expected 2-D, got {X.shape}")
    n = np.linalg.norm(X, axis=1)
    if np.any(n == 0.0):
        raise ZeroNormError("cosine_matrix with a zero-norm row")
    denom = np.outer(n, n)
    out_arr = (X @ X.T) / denom

    def backward():
        if not x.requires_grad:
            return
        G = out.grad.data
        U = G / denom
        gc = G * out_arr
        r = gc.sum(axis=1) + gc.sum(axis=0)
        x.grad.data += (U + U.T) @ X - (r / (n * n))[:, None] * X

    out = _make(out_arr, (x,), backward)
    return out


def stack_rows(nodes) -> DiffNode:
    """Stack 1-D nodes of equal length into a matrix, one per row."""
    return concat([reshape(n, (1, -1)) for n in nodes], axis=0)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare f's analytic gradient at x against central differences.

    f maps a DiffNode to a scalar DiffNode. Returns the worst relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|) over all coordinates.
    """
    leaf = DiffNode(x.copy(), requires_grad=True)
    out = f(leaf)
    if out.value.size != 1:
        raise ShapeError(f"grad_check: f returned shape {out.value.shape}")
    if not np.isfinite(out.value.data).all():
        raise NumericalAbortError("grad_check: f returned a non-finite value")
    out.backward()
    analytic = leaf.grad.data.reshape(-1).copy()

    base = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    with no_grad():
        for i in range(base.size):
            for sign, slot in ((1.0, 0), (-1.0, 1)):
                perturbed = base.copy()
                perturbed[i] += sign * eps
                node = DiffNode(
                    Tensor(perturbed.reshape(x.shape), check=False), requires_grad=False
                )
                val = f(node).value.item()
                if not np.isfinite(val):
                    raise NumericalAbortError(f"grad_check: non-finite value at coordinate {i}")
                if slot == 0:
                    hi = val
                else:
                    lo = val
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


_STG1_MAGIC = b"STG1"


def write_stg1(path, tensor: Tensor):
    """Serialize to the STG1 container: magic, u8 rank, u64-LE dims, f64-LE payload."""
    arr = np.ascontiguousarray(tensor.data, dtype="<f8")
    if arr.ndim > 255:
        raise ShapeError(f"rank {arr.ndim} exceeds the u8 rank field")
    with open(path, "wb") as fh:
        fh.write(_STG1_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_stg1(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _STG1_MAGIC:
        raise ValidationError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 5:
        raise ValidationError(f"{path}: truncated header")
    rank = blob[4]
    header_end = 5 + 8 * rank
    if len(blob) < header_end:
        raise ValidationError(f"{path}: truncated dimension list")
    dims = struct.unpack(f"<{rank}Q", blob[5:header_end])
    expected = int(np.prod(dims, dtype=np.uint64)) if rank else 1
    payload = blob[header_end:]
    if len(payload) != 8 * expected:
        raise ValidationError(f"{path}: payload is {len(payload)} bytes, expected {8 * expected}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(dims)
    return Tensor(arr.astype(np.float64))
