"""Dense multilayer perceptrons, SGD with momentum, and JSON checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("relu", "tanh")
HEADS = ("softmax", "identity")


class DimensionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, layer: int, which: str):
        super().__init__(f"non-finite {which} gradient in layer {layer}; step rejected")
        self.layer = layer


@dataclass
class MlpParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"
    output_head: str = "identity"
    seed: int | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        for k in range(len(self.layers) - 1):
            out_k = self.layers[k][0].shape[0]
            in_next = self.layers[k + 1][0].shape[1]
            if out_k != in_next:
                raise DimensionError(f"layer {k} outputs {out_k} but layer {k + 1} expects {in_next}")
        for k, (w, b) in enumerate(self.layers):
            if b.shape != (w.shape[0],):
                raise DimensionError(f"layer {k} bias shape {b.shape} does not match weight {w.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [a for wb in self.layers for a in wb]

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers],
                         self.activation, self.output_head, self.seed)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, activation: str = "relu",
             output_head: str = "identity", zero_last: bool = False, seed: int | None = None) -> MlpParams:
    """Glorot-uniform weights, zero biases. ``zero_last`` zeroes the output layer."""
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if zero_last and k == len(sizes) - 2:
            w = np.zeros_like(w)
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(layers, activation, output_head, seed)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, 0.0) if name == "relu" else np.tanh(z)


def forward_mlp(params: MlpParams, x, return_hidden: bool = False):
    """Evaluate the network on one vector or a batch of row vectors.

    With ``return_hidden`` the penultimate activation is returned as well.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.in_dim:
        raise DimensionError(f"input has {h.shape[1]} features, network expects {params.in_dim}")
    last = len(params.layers) - 1
    hidden = h
    for k, (w, b) in enumerate(params.layers):
        h = h @ w.T + b
        if k < last:
            h = _act(params.activation, h)
            hidden = h
    if params.output_head == "softmax":
        h = ad.softmax_array(h)
    if single:
        h, hidden = h[0], hidden[0]
    return (h, hidden) if return_hidden else h


def leaves(tape: ad.Tape, params: MlpParams) -> list[ad.Node]:
    return [tape.leaf(a, "param") for a in params.arrays()]


def mlp_graph(param_nodes: Sequence[ad.Node], x: ad.Node, activation: str):
    """Record a forward pass; returns (pre-head output, penultimate activation).

    The output head is not applied: softmax heads are folded into the loss.
    """
    h = x
    hidden = x
    n_layers = len(param_nodes) // 2
    for k in range(n_layers):
        h = ad.linear(h, param_nodes[2 * k], param_nodes[2 * k + 1])
        if k < n_layers - 1:
            h = ad.relu(h) if activation == "relu" else ad.tanh(h)
            hidden = h
    return h, hidden


def grads_to_layers(flat: Sequence[np.ndarray]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(flat[2 * k], flat[2 * k + 1]) for k in range(len(flat) // 2)]


@dataclass
class SGD:
    """SGD with heavy-ball momentum: ``v = momentum * v + g; p -= lr * v``."""

    params: MlpParams
    learning_rate: float
    momentum: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.velocity:
            self.velocity = [np.zeros_like(a) for a in self.params.arrays()]

    def step(self, grads: Sequence[np.ndarray]) -> MlpParams:
        return sgd_step(self.params, grads, self.learning_rate, self.momentum, self.velocity)


def sgd_step(params: MlpParams, grads: Sequence[np.ndarray], learning_rate: float, momentum: float,
             velocity: list[np.ndarray] | None = None) -> MlpParams:
    """Update ``params`` in place. Nothing is modified if any gradient is non-finite."""
    if not learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise DimensionError(f"expected {len(arrays)} gradients, got {len(grads)}")
    for i, g in enumerate(grads):
        if g.shape != arrays[i].shape:
            raise DimensionError(f"gradient {i} has shape {g.shape}, parameter has {arrays[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(i // 2, "weight" if i % 2 == 0 else "bias")
    if velocity is None:
        velocity = [np.zeros_like(a) for a in arrays]
    for a, g, v in zip(arrays, grads, velocity):
        if momentum:
            v *= momentum
            v += g
            a -= learning_rate * v
        else:
            a -= learning_rate * g
    return params


def params_to_dict(params: MlpParams) -> dict:
    return {
        "activation": params.activation,
        "output_head": params.output_head,
        "seed": params.seed,
        "layers": [
            {"weight_shape": list(w.shape), "weight": w.ravel().tolist(),
             "bias_shape": list(b.shape), "bias": b.ravel().tolist()}
            for w, b in params.layers
        ],
    }


def params_from_dict(d: dict) -> MlpParams:
    layers = [
        (np.asarray(layer["weight"], dtype=np.float64).reshape(layer["weight_shape"]),
         np.asarray(layer["bias"], dtype=np.float64).reshape(layer["bias_shape"]))
        for layer in d["layers"]
    ]
    return MlpParams(layers, d["activation"], d["output_head"], d.get("seed"))


def save_params(params: MlpParams, path, extra: dict | None = None) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    doc = {"mlp": params_to_dict(params), **(extra or {})}
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> tuple[MlpParams, dict]:
    doc = json.loads(Path(path).read_text())
    params = params_from_dict(doc.pop("mlp"))
    return params, doc
