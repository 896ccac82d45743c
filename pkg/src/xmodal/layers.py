"""Parameterized layers: dense, convolution, LSTM, token embedding, pooling.

All parameters are float64 leaf tensors registered by name so checkpoints
can round-trip them. Initialization is Glorot-uniform with zero biases,
except the LSTM forget-gate bias which starts at +1.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Module:
    """Minimal parameter container; subclasses register (name, Tensor) pairs."""

    def __init__(self):
        self._params: list[tuple[str, Tensor]] = []
        self._children: list[tuple[str, "Module"]] = []

    def _register(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self._params.append((name, tensor))
        return tensor

    def _child(self, name: str, module: "Module") -> "Module":
        self._children.append((name, module))
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params:
            yield (prefix + name, p)
        for name, child in self._children:
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class DenseLayer(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = self._register("weight", Tensor(glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim)))
        self.bias = self._register("bias", Tensor(np.zeros(out_dim)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"dense expects (batch, {self.in_dim}), got {x.shape}")
        return ad.add_rowvec(ad.matmul(x, ad.transpose(self.weight)), self.bias)


class Conv2dLayer(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        self.stride = stride
        self.padding = padding
        self.kernels = self._register(
            "kernels", Tensor(glorot_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out)))
        self.bias = self._register("bias", Tensor(np.zeros(out_ch)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_channel_bias(ad.conv2d(x, self.kernels, self.stride, self.padding), self.bias)


class EmbeddingTable(Module):
    """Trainable token embeddings with fixed special ids."""

    PAD, BOS, EOS, UNK = 0, 1, 2, 3

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.table = self._register("table", Tensor(glorot_uniform(rng, (vocab_size, dim), vocab_size, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding_lookup(self.table, ids)


class LSTMCell(Module):
    """Single LSTM cell; each gate weight is (hidden, input+hidden).

    Forget-gate bias starts at +1 so early training keeps cell memory.
    """

    GATES = ("input", "forget", "output", "candidate")

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        cat = input_dim + hidden_dim
        self.weights = {}
        self.biases = {}
        for gate in self.GATES:
            w = Tensor(glorot_uniform(rng, (hidden_dim, cat), cat, hidden_dim))
            b = Tensor(np.full(hidden_dim, 1.0) if gate == "forget" else np.zeros(hidden_dim))
            self.weights[gate] = self._register(f"{gate}.weight", w)
            self.biases[gate] = self._register(f"{gate}.bias", b)

    def step(self, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        if x_t.data.ndim != 2 or x_t.shape[1] != self.input_dim:
            raise ShapeError(f"lstm step expects (batch, {self.input_dim}) input, got {x_t.shape}")
        if h_prev.shape != (x_t.shape[0], self.hidden_dim) or c_prev.shape != h_prev.shape:
            raise ShapeError(f"lstm state shapes {h_prev.shape}/{c_prev.shape} do not match batch "
                             f"{x_t.shape[0]} x hidden {self.hidden_dim}")
        cat = ad.concat([x_t, h_prev], axis=1)

        def gate(name):
            return ad.add_rowvec(ad.matmul(cat, ad.transpose(self.weights[name])), self.biases[name])

        i = ad.sigmoid(gate("input"))
        f = ad.sigmoid(gate("forget"))
        o = ad.sigmoid(gate("output"))
        g = ad.tanh(gate("candidate"))
        c_t = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
        h_t = ad.mul(o, ad.tanh(c_t))
        return h_t, c_t

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden_dim))
        return Tensor(z), Tensor(z.copy())


def lstm_run(cell: LSTMCell, inputs: Tensor, reverse: bool = False) -> list[Tensor]:
    """Run a cell over a time-major (T, batch, dim) tensor; returns h_t per step."""
    if inputs.data.ndim != 3:
        raise ShapeError(f"lstm_run expects (T, batch, dim), got {inputs.shape}")
    t_steps, batch, dim = inputs.shape
    if t_steps < 1:
        raise ShapeError("empty sequence")
    h, c = cell.zero_state(batch)
    order = range(t_steps - 1, -1, -1) if reverse else range(t_steps)
    outputs: list = [None] * t_steps
    for t in order:
        x_t = ad.reshape(ad.narrow(inputs, 0, t, 1), (batch, dim))
        h, c = cell.step(x_t, h, c)
        outputs[t] = h
    return outputs


def bilstm_encode(forward_cell: LSTMCell, backward_cell: LSTMCell, inputs: Tensor) -> Tensor:
    """Concatenate forward and backward hidden states per timestep.

    Output is (T, batch, 2*hidden): position t holds the forward state after
    reading x_0..x_t next to the backward state after reading x_{T-1}..x_t.
    """
    fwd = lstm_run(forward_cell, inputs, reverse=False)
    bwd = lstm_run(backward_cell, inputs, reverse=True)
    steps = [ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
    return ad.stack0(steps)


def max_over_time(h: Tensor) -> Tensor:
    """Coordinatewise max over the leading time axis of (T, batch, d)."""
    if h.data.ndim != 3:
        raise ShapeError(f"max_over_time expects (T, batch, d), got {h.shape}")
    if h.shape[0] < 1:
        raise ShapeError("empty sequence")
    return ad.reduce("max", h, axis=0)
