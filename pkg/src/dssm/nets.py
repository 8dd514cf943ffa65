"""Multi-layer perceptrons and a bidirectional LSTM runner on top of diffcore."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

ACTIVATIONS = {
    "identity": lambda x: x,
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


@dataclass
class MlpParams:
    """Weights ``[in, out]`` and biases ``[out]`` per affine layer."""

    weights: list[Tensor]
    biases: list[Tensor]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise dc.ShapeError("MLP needs one bias per weight matrix and at least one layer")
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise dc.ShapeError(f"bias {b.shape} does not match weight {w.shape}")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise dc.ShapeError(f"layer dims do not chain: {w0.shape} -> {w1.shape}")
        for tag in (self.hidden_activation, self.output_activation):
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(
    rng: np.random.Generator,
    dims: list[int],
    hidden_activation: str = "tanh",
    output_activation: str = "identity",
    name: str = "mlp",
) -> MlpParams:
    """Glorot-uniform weights and zero biases for layer sizes ``dims``.

    ``dims = [in, h1, ..., out]`` gives ``len(dims) - 1`` affine layers.
    """
    weights, biases = [], []
    for k, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        weights.append(dc.param(glorot_uniform(rng, fi, fo), name=f"{name}.W{k}"))
        biases.append(dc.param(np.zeros(fo), name=f"{name}.b{k}"))
    return MlpParams(weights, biases, hidden_activation, output_activation)


def mlp_param_count(dims: list[int]) -> int:
    return sum(fi * fo + fo for fi, fo in zip(dims[:-1], dims[1:]))


def mlp_forward(p: MlpParams, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != p.in_dim:
        raise dc.ShapeError(f"mlp_forward: input {x.shape} but first layer expects {p.in_dim}")
    hidden = ACTIVATIONS[p.hidden_activation]
    last = len(p.weights) - 1
    h = x
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = dc.add_row(dc.matmul(h, w), b)
        h = ACTIVATIONS[p.output_activation](h) if k == last else hidden(h)
    return h


@dataclass
class RecurrentCellParams:
    """LSTM cell with gates packed as ``[input, forget, output, candidate]``.

    ``w_input`` is ``[in, 4H]``, ``w_hidden`` is ``[H, 4H]``, ``bias`` is ``[4H]``.
    """

    w_input: Tensor
    w_hidden: Tensor
    bias: Tensor
    hidden_size: int = field(init=False)

    def __post_init__(self):
        h4 = self.w_hidden.shape[1]
        if h4 % 4 or self.w_hidden.shape[0] * 4 != h4:
            raise dc.ShapeError(f"hidden weight must be [H, 4H], got {self.w_hidden.shape}")
        if self.w_input.shape[1] != h4 or self.bias.shape != (h4,):
            raise dc.ShapeError("input weight / bias do not match 4H gate width")
        self.hidden_size = h4 // 4

    @property
    def input_size(self) -> int:
        return self.w_input.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w_input, self.w_hidden, self.bias]


def init_lstm(rng: np.random.Generator, input_size: int, hidden_size: int, name: str = "lstm"):
    h = hidden_size
    w_in = np.concatenate([glorot_uniform(rng, input_size, h) for _ in range(4)], axis=1)
    w_hh = np.concatenate([glorot_uniform(rng, h, h) for _ in range(4)], axis=1)
    bias = np.zeros(4 * h)
    bias[h : 2 * h] = 1.0  # forget gate
    return RecurrentCellParams(
        dc.param(w_in, name=f"{name}.W_in"),
        dc.param(w_hh, name=f"{name}.W_hh"),
        dc.param(bias, name=f"{name}.b"),
    )


def lstm_param_count(input_size: int, hidden_size: int) -> int:
    return 4 * hidden_size * (input_size + hidden_size + 1)


def lstm_step(p: RecurrentCellParams, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One cell update; returns the new ``(hidden, cell)``."""
    if x.shape[1] != p.input_size:
        raise dc.ShapeError(f"lstm_step: input {x.shape} but cell expects {p.input_size}")
    n = p.hidden_size
    gates = dc.add_row(dc.matmul(x, p.w_input) + dc.matmul(h, p.w_hidden), p.bias)
    i = dc.sigmoid(dc.slice_cols(gates, 0, n))
    f = dc.sigmoid(dc.slice_cols(gates, n, 2 * n))
    o = dc.sigmoid(dc.slice_cols(gates, 2 * n, 3 * n))
    g = dc.tanh(dc.slice_cols(gates, 3 * n, 4 * n))
    c_new = f * c + i * g
    return o * dc.tanh(c_new), c_new


def birnn_encode(
    p_fwd: RecurrentCellParams,
    p_bwd: RecurrentCellParams,
    seq: list[Tensor],
    valid: np.ndarray | None = None,
) -> list[Tensor]:
    """Run both directions over ``seq`` (length-T list of ``[batch, in]``).

    Output ``t`` is ``concat(forward hidden after 1..t, backward hidden after T..t)``.

    ``valid`` is an optional ``[T, batch]`` 0/1 array for padded batches: the
    backward state is held at zero over padding so each sequence's backward
    pass starts fresh at its own last step.
    """
    if not seq:
        raise dc.UsageError("birnn_encode needs at least one step")
    batch = seq[0].shape[0]
    zf = dc.tensor(np.zeros((batch, p_fwd.hidden_size)))
    h, c = zf, zf
    fwd = []
    for x in seq:
        h, c = lstm_step(p_fwd, x, h, c)
        fwd.append(h)

    zb = dc.tensor(np.zeros((batch, p_bwd.hidden_size)))
    h, c = zb, zb
    bwd: list[Tensor] = [None] * len(seq)  # type: ignore[list-item]
    for t in range(len(seq) - 1, -1, -1):
        h, c = lstm_step(p_bwd, seq[t], h, c)
        if valid is not None and not valid[t].all():
            keep = dc.tensor(np.repeat(valid[t][:, None], p_bwd.hidden_size, axis=1))
            h, c = h * keep, c * keep
        bwd[t] = h
    return [dc.concat([f, b]) for f, b in zip(fwd, bwd)]
