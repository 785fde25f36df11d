"""Neural-network building blocks: linear layers, MLPs, dropout, LSTM.

All parameters are float64 tensors with requires_grad=True, initialised
uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from a caller-supplied
generator so that a model is a pure function of its seed.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, concat

__all__ = [
    "Linear",
    "Mlp",
    "LstmCell",
    "LstmStack",
    "dropout",
    "save_checkpoint",
    "load_checkpoint",
]


def _init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    """Affine map x -> x W^T + b with weight (out, in) and bias (out,)."""

    def __init__(self, in_dim, out_dim, rng):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.weight = _init(rng, in_dim, (out_dim, in_dim))
        self.bias = _init(rng, in_dim, (out_dim,))

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"linear expects trailing dim {self.in_dim}, got input shape {x.shape}")
        if x.ndim == 2:
            return x @ self.weight.transpose() + self.bias
        # fold leading dims into one gemm
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.in_dim) @ self.weight.transpose() + self.bias
        return flat.reshape(*lead, self.out_dim)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def dropout(x, rate, training, rng=None):
    """Zero entries with probability ``rate`` and rescale survivors.

    Identity when not training or rate == 0; training mode needs an rng.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


class Mlp:
    """Stacked linear layers with tanh hidden activations.

    Optional dropout is applied to hidden activations in training mode;
    the final layer stays affine.
    """

    def __init__(self, dims, rng, dropout_rate=0.0):
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output dims")
        self.dims = list(dims)
        self.dropout_rate = float(dropout_rate)
        self.layers = [Linear(dims[k], dims[k + 1], rng) for k in range(len(dims) - 1)]

    def __call__(self, x, training=False, rng=None):
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k != last:
                x = x.tanh()
                x = dropout(x, self.dropout_rate, training, rng)
        return x

    def parameters(self):
        out = []
        for k, layer in enumerate(self.layers):
            for name, p in layer.parameters():
                out.append((f"{k}.{name}", p))
        return out


class LstmCell:
    """Single LSTM cell; gate order (input, forget, cell, output)."""

    def __init__(self, in_dim, hidden_dim, rng):
        self.in_dim = int(in_dim)
        self.hidden_dim = int(hidden_dim)
        joint = in_dim + hidden_dim
        self.w_input = Linear(joint, hidden_dim, rng)
        self.w_forget = Linear(joint, hidden_dim, rng)
        self.w_cell = Linear(joint, hidden_dim, rng)
        self.w_output = Linear(joint, hidden_dim, rng)

    def step(self, x, h, c):
        z = concat([x, h], axis=1)
        i = self.w_input(z).sigmoid()
        f = self.w_forget(z).sigmoid()
        g = self.w_cell(z).tanh()
        o = self.w_output(z).sigmoid()
        c_next = f * c + i * g
        h_next = o * c_next.tanh()
        return h_next, c_next

    def parameters(self):
        out = []
        for gate, layer in (("input", self.w_input), ("forget", self.w_forget),
                            ("cell", self.w_cell), ("output", self.w_output)):
            for name, p in layer.parameters():
                out.append((f"{gate}.{name}", p))
        return out


class LstmStack:
    """num_layers LSTM cells; returns the top layer's hidden sequence.

    States start at zero. Dropout (training only) is applied between
    layers, not inside a cell.
    """

    def __init__(self, in_dim, hidden_dim, num_layers, rng, dropout_rate=0.0):
        self.in_dim = int(in_dim)
        self.hidden_dim = int(hidden_dim)
        self.num_layers = int(num_layers)
        self.dropout_rate = float(dropout_rate)
        dims = [in_dim] + [hidden_dim] * num_layers
        self.cells = [LstmCell(dims[k], hidden_dim, rng) for k in range(num_layers)]

    def __call__(self, x, training=False, rng=None):
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise ValueError(f"lstm expects (batch, steps, {self.in_dim}), got {x.shape}")
        n, t, _ = x.shape
        seq = x
        for layer, cell in enumerate(self.cells):
            h = Tensor(np.zeros((n, self.hidden_dim)))
            c = Tensor(np.zeros((n, self.hidden_dim)))
            outs = []
            for k in range(t):
                h, c = cell.step(seq[:, k, :], h, c)
                outs.append(h.reshape(n, 1, self.hidden_dim))
            seq = concat(outs, axis=1)
            if layer != self.num_layers - 1:
                seq = dropout(seq, self.dropout_rate, training, rng)
        return seq

    def parameters(self):
        out = []
        for k, cell in enumerate(self.cells):
            for name, p in cell.parameters():
                out.append((f"layer{k}.{name}", p))
        return out


def save_checkpoint(path, named_params):
    """Write named parameter arrays to an .npz archive."""
    arrays = {}
    for name, p in named_params:
        if name in arrays:
            raise ValueError(f"duplicate parameter name {name!r}")
        arrays[name] = p.data
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, named_params):
    """Load an .npz checkpoint into existing parameter tensors, in place.

    Names and shapes must match the target exactly.
    """
    with np.load(path) as npz:
        stored = {k: npz[k] for k in npz.files}
    names = [name for name, _ in named_params]
    missing = sorted(set(names) - set(stored))
    extra = sorted(set(stored) - set(names))
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, p in named_params:
        arr = stored[name]
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
        p.data[...] = arr
