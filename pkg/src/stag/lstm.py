"""Single-layer LSTM used as the order-sensitive temporal aggregator."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .rng import make_rng
from .tensor import DiffNode, Tensor, add, linear, matmul, mul, narrow, reshape, sigmoid, tanh


@dataclass
class LstmParams:
    """Gate weights with layout [i, f, o, g] along the output axis."""

    w_x: DiffNode  # (d_in, 4*hidden)
    w_h: DiffNode  # (hidden, 4*hidden)
    b: DiffNode  # (4*hidden,)

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def init(cls, seed: int, d_in: int, hidden: int, name: str = "lstm") -> "LstmParams":
        def weight(tag, fan_in, shape):
            rng = make_rng(seed, "init", name, tag)
            return DiffNode(Tensor(rng.normal(0.0, fan_in ** -0.5, size=shape)))

        return cls(
            w_x=weight("w_x", d_in, (d_in, 4 * hidden)),
            w_h=weight("w_h", hidden, (hidden, 4 * hidden)),
            b=DiffNode(Tensor.zeros((4 * hidden,))),
        )


def lstm_cell(x_t: DiffNode, h: DiffNode, c: DiffNode, params: LstmParams):
    """One step: returns (h, c), both (1, hidden)."""
    d = params.hidden
    pre = add(linear(x_t, params.w_x, params.b), matmul(h, params.w_h))
    i = sigmoid(narrow(pre, 1, 0, d))
    f = sigmoid(narrow(pre, 1, d, d))
    o = sigmoid(narrow(pre, 1, 2 * d, d))
    g = tanh(narrow(pre, 1, 3 * d, d))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def lstm_sequence(x: DiffNode, params: LstmParams) -> DiffNode:
    """Run over the rows of x (steps, d_in) from zero state; final hidden, shape (hidden,)."""
    if x.value.ndim != 2:
        raise ShapeError(f"lstm_sequence: expected (steps, d_in), got {x.value.shape}")
    steps = x.value.shape[0]
    h = DiffNode(Tensor.zeros((1, params.hidden)), requires_grad=False)
    c = DiffNode(Tensor.zeros((1, params.hidden)), requires_grad=False)
    for t in range(steps):
        x_t = narrow(x, 0, t, 1)
        h, c = lstm_cell(x_t, h, c, params)
    return reshape(h, (params.hidden,))
