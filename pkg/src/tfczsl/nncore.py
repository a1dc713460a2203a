"""Dense networks with exact backpropagation and an Adam optimizer.

Everything is float64. A network is an ordered list of affine layers, each
followed by ``relu`` or ``identity``. Inputs may be a single vector or a
batch with one sample per row; outputs keep the same rank.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._backend import kernels
from .errors import CacheError, CheckpointError, OptimizerError, ShapeError

ACTIVATIONS = ("relu", "identity")

_net_ids = itertools.count()


@dataclass
class Layer:
    weight: np.ndarray  # [fan_out, fan_in]
    bias: np.ndarray  # [fan_out]
    activation: str = "identity"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


class DenseNet:
    """A stack of dense layers.

    ``version`` is bumped on every in-place parameter update so that a cache
    from an earlier forward pass can be detected as stale.
    """

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ShapeError("a DenseNet needs at least one layer")
        for k, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            layer.weight = np.ascontiguousarray(layer.weight, dtype=np.float64)
            layer.bias = np.ascontiguousarray(layer.bias, dtype=np.float64)
            if layer.bias.shape != (layer.fan_out,):
                raise ShapeError(f"layer {k}: bias shape {layer.bias.shape} != ({layer.fan_out},)")
            if k and layer.fan_in != layers[k - 1].fan_out:
                raise ShapeError(
                    f"layer {k}: fan_in {layer.fan_in} does not match previous fan_out "
                    f"{layers[k - 1].fan_out}"
                )
        self.layers = list(layers)
        self.uid = next(_net_ids)
        self.version = 0

    @classmethod
    def create(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "DenseNet":
        """Glorot-uniform weights, zero biases. ``sizes`` = [in, hidden..., out]."""
        if len(sizes) < 2:
            raise ShapeError("sizes needs at least an input and an output dimension")
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = output_activation if k == len(sizes) - 2 else hidden_activation
            layers.append(Layer(W, np.zeros(fan_out), act))
        return cls(layers)

    @classmethod
    def zeros(cls, sizes: Sequence[int], hidden_activation="relu", output_activation="identity"):
        net = cls.create(sizes, np.random.default_rng(0), hidden_activation, output_activation)
        for layer in net.layers:
            layer.weight[:] = 0.0
        return net

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.fan_out for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def __call__(self, x):
        return forward(self, x)[0]

    def __repr__(self):
        acts = ",".join(l.activation for l in self.layers)
        return f"DenseNet(sizes={self.sizes}, activations=[{acts}])"


@dataclass
class ForwardCache:
    net_uid: int
    net_version: int
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    vector_input: bool


def _as_batch(x, dim: int, what: str = "input") -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    vector = x.ndim == 1
    if vector:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what} has trailing shape {x.shape[1:]}, expected ({dim},)")
    return np.ascontiguousarray(x), vector


def forward(net: DenseNet, x) -> tuple[np.ndarray, ForwardCache]:
    """Run ``net`` on a vector or a batch of row vectors."""
    h, vector = _as_batch(x, net.in_dim)
    inputs, preacts = [], []
    for layer in net.layers:
        inputs.append(h)
        z, h = kernels.dense_forward(layer.weight, layer.bias, h, layer.activation == "relu")
        preacts.append(z)
    cache = ForwardCache(net.uid, net.version, inputs, preacts, vector)
    return (h[0] if vector else h), cache


def backward(net: DenseNet, cache: ForwardCache, grad_output) -> tuple[list, np.ndarray]:
    """Backpropagate ``grad_output`` (dLoss/dOutput) through ``net``.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` is a list of
    ``(dW, db)`` pairs, one per layer.
    """
    if cache.net_uid != net.uid or cache.net_version != net.version:
        raise CacheError("cache does not belong to the current state of this network")
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.vector_input:
        g = g[None, :]
    expected = cache.preacts[-1].shape
    if g.shape != expected:
        raise ShapeError(f"grad_output shape {g.shape} does not match output shape {expected}")
    g = np.ascontiguousarray(g)
    grads = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        dW, db, g = kernels.dense_backward(
            layer.weight, cache.inputs[k], cache.preacts[k], g, layer.activation == "relu"
        )
        grads[k] = (dW, db)
    return grads, (g[0] if cache.vector_input else g)


@dataclass
class OptimizerState:
    """Adam moments for one network."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: DenseNet, lr: float = 1e-3, **kwargs) -> "OptimizerState":
        params = net.parameters()
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def adam_step(net: DenseNet, param_grads, state: OptimizerState) -> None:
    """Apply one Adam update in place. Non-finite gradients are refused."""
    flat = []
    for dW, db in param_grads:
        flat.extend((dW, db))
    params = net.parameters()
    if len(flat) != len(params) or len(state.m) != len(params):
        raise ShapeError("gradient / optimizer state does not match the network")
    for p, g in zip(params, flat):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise OptimizerError("non-finite gradient; step refused")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, flat, state.m, state.v):
        kernels.adam_update(
            p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
            state.lr, state.beta1, state.beta2, state.eps, c1, c2,
        )
    net.touch()


# -- serialization -----------------------------------------------------------

def net_arrays(net: DenseNet, prefix: str) -> tuple[dict, dict]:
    """Flatten ``net`` into npz-ready arrays plus a JSON-able description."""
    arrays = {}
    for k, layer in enumerate(net.layers):
        arrays[f"{prefix}/{k}/weight"] = layer.weight
        arrays[f"{prefix}/{k}/bias"] = layer.bias
    meta = {"sizes": net.sizes, "activations": [l.activation for l in net.layers]}
    return arrays, meta


def net_from_arrays(arrays, meta: dict, prefix: str) -> DenseNet:
    layers = []
    for k, act in enumerate(meta["activations"]):
        try:
            W = np.array(arrays[f"{prefix}/{k}/weight"], dtype=np.float64)
            b = np.array(arrays[f"{prefix}/{k}/bias"], dtype=np.float64)
        except KeyError as exc:
            raise CheckpointError(f"missing array {exc} in checkpoint") from None
        layers.append(Layer(W, b, act))
    net = DenseNet(layers)
    if net.sizes != list(meta["sizes"]):
        raise CheckpointError(f"{prefix}: stored sizes {meta['sizes']} disagree with arrays {net.sizes}")
    return net


def write_npz(path, arrays: dict, meta: dict) -> None:
    """Write arrays plus a JSON header (``__meta__``) to an uncompressed npz."""
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def read_npz(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path} has no __meta__ header")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return arrays, meta


def save_net(net: DenseNet, path) -> None:
    arrays, meta = net_arrays(net, "net")
    write_npz(path, arrays, {"kind": "densenet", "net": meta})


def load_net(path) -> DenseNet:
    arrays, meta = read_npz(path)
    if meta.get("kind") != "densenet":
        raise CheckpointError(f"{path} is not a DenseNet checkpoint")
    return net_from_arrays(arrays, meta["net"], "net")
