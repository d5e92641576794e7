"""Multilayer-perceptron classifier with exact backprop and Nesterov SGD.

Networks are plain stacks of dense layers; the final layer always emits raw
logits (identity activation).  Losses use the soft-target cross-entropy form,
which is linear in the target and therefore covers one-hot, mixed, and
smoothed labels with a single code path.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import RngState, ShapeError, as_matrix

EPS_LOG = 1e-12  # floor inside log(); prevents -inf loss from saturated softmax

ACTIVATIONS = ("relu", "tanh", "identity")

_CHECKPOINT_MAGIC = b"VRLNET1 "


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Network:
    """Ordered dense layers; weights[l] is (in_dim, out_dim), biases[l] (out_dim,)."""

    def __init__(self, layers, rng: RngState | None = None):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}"
                )
        if layers[-1].activation != "identity":
            raise ValueError("last layer must have identity activation (logits)")
        self.layers = layers
        self.weights = []
        self.biases = []
        for spec in layers:
            self.weights.append(_init_weight(spec, rng))
            self.biases.append(np.zeros(spec.out_dim))

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def feature_dim(self) -> int:
        """Width of the penultimate activation (input when single-layer)."""
        return self.layers[-1].in_dim

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.layers = list(self.layers)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def parameters(self):
        """Flat list of (array, kind, layer_index) over weights then bias per layer."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((w, "weight", i))
            out.append((b, "bias", i))
        return out


def _init_weight(spec: LayerSpec, rng: RngState | None) -> np.ndarray:
    if rng is None:
        return np.zeros((spec.in_dim, spec.out_dim))
    # He-uniform for relu, Xavier-uniform otherwise.
    if spec.activation == "relu":
        limit = math.sqrt(6.0 / spec.in_dim)
    else:
        limit = math.sqrt(6.0 / (spec.in_dim + spec.out_dim))
    u = rng.uniform(spec.in_dim * spec.out_dim).reshape(spec.in_dim, spec.out_dim)
    return (2.0 * u - 1.0) * limit


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class ForwardCache:
    """Per-layer pre-activations and activations from one forward pass."""

    def __init__(self, net, x, pre, act):
        self.net = net
        self.x = x
        self.pre = pre  # pre[l] = act[l-1] @ W[l] + b[l]
        self.act = act  # act[l] = activation(pre[l]); act[-1] = logits


def forward(net: Network, x_batch) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the network on a batch.

    Returns (logits, features, cache) where features are the penultimate
    activations (the inputs themselves for a single-layer net).
    """
    x = as_matrix(x_batch)
    if x.shape[1] != net.in_dim:
        raise ShapeError(
            f"input has {x.shape[1]} features, network expects {net.in_dim}"
        )
    pre, act = [], []
    h = x
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        z = h @ w + b
        h = _activate(spec.activation, z)
        pre.append(z)
        act.append(h)
    logits = act[-1]
    features = act[-2] if len(act) > 1 else x
    return logits, features, ForwardCache(net, x, pre, act)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    s = as_matrix(logits)
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_soft(probs, soft_targets) -> float:
    """Batch-mean cross-entropy -sum_k t_k log p_k against soft targets."""
    p = as_matrix(probs)
    t = as_matrix(soft_targets)
    if p.shape != t.shape:
        raise ShapeError(f"probs {p.shape} vs targets {t.shape}")
    if np.any(t < 0):
        raise ValueError("target entries must be >= 0")
    return float(-(t * np.log(np.maximum(p, EPS_LOG))).sum(axis=1).mean())


@dataclass
class GradientSet:
    """Per-layer gradients, shapes mirroring the owning Network."""

    d_weights: list
    d_biases: list

    def scaled_add(self, other: "GradientSet", weight: float) -> "GradientSet":
        """New GradientSet equal to self + weight * other."""
        return GradientSet(
            [a + weight * b for a, b in zip(self.d_weights, other.d_weights)],
            [a + weight * b for a, b in zip(self.d_biases, other.d_biases)],
        )


def backward(net: Network, cache: ForwardCache, soft_targets) -> GradientSet:
    """Exact gradient of the batch-mean softmax cross-entropy w.r.t. all parameters."""
    if cache.net is not net:
        raise ValueError("cache does not belong to this network")
    t = as_matrix(soft_targets)
    logits = cache.act[-1]
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} vs logits {logits.shape}")
    n = logits.shape[0]
    delta = (softmax(logits) - t) / n  # dL/dlogits for mean CE
    d_weights = [None] * len(net.layers)
    d_biases = [None] * len(net.layers)
    for l in range(len(net.layers) - 1, -1, -1):
        inp = cache.act[l - 1] if l > 0 else cache.x
        d_weights[l] = inp.T @ delta
        d_biases[l] = delta.sum(axis=0)
        if l > 0:
            spec = net.layers[l - 1]
            delta = (delta @ net.weights[l].T) * _activate_grad(
                spec.activation, cache.pre[l - 1], cache.act[l - 1]
            )
    return GradientSet(d_weights, d_biases)


@dataclass
class OptimState:
    """SGD with Nesterov momentum, L2 weight decay, and an LR schedule."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = "constant"  # constant | cosine
    _vel_w: list = field(default_factory=list, repr=False)
    _vel_b: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, epoch_frac: float) -> float:
        if self.schedule == "cosine":
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch_frac))
        return self.learning_rate


def sgd_step(net: Network, grads: GradientSet, opt: OptimState, epoch_frac: float):
    """In-place Nesterov update; weight decay enters as an L2 gradient term."""
    if not 0.0 <= epoch_frac <= 1.0:
        raise ValueError("epoch_frac must be in [0, 1]")
    if not opt._vel_w:
        opt._vel_w = [np.zeros_like(w) for w in net.weights]
        opt._vel_b = [np.zeros_like(b) for b in net.biases]
    lr = opt.lr_at(epoch_frac)
    mu = opt.momentum
    for i in range(len(net.layers)):
        for param, grad, vel in (
            (net.weights[i], grads.d_weights[i], opt._vel_w[i]),
            (net.biases[i], grads.d_biases[i], opt._vel_b[i]),
        ):
            g = grad + opt.weight_decay * param
            vel *= mu
            vel += g
            step = g + mu * vel if mu > 0.0 else g
            param -= lr * step


def save_checkpoint(net: Network, path):
    """Write a bit-exact checkpoint: one JSON header line + raw float64 blocks."""
    header = {
        "layers": [
            {"in": s.in_dim, "out": s.out_dim, "act": s.activation}
            for s in net.layers
        ]
    }
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("ascii"))
        f.write(b"\n")
        for w, b in zip(net.weights, net.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    """Reconstruct a Network saved by save_checkpoint."""
    with open(path, "rb") as f:
        magic = f.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        header = json.loads(f.readline().decode("ascii"))
        specs = [
            LayerSpec(d["in"], d["out"], d["act"]) for d in header["layers"]
        ]
        net = Network(specs, rng=None)
        for i, spec in enumerate(specs):
            nw = spec.in_dim * spec.out_dim
            w = np.frombuffer(f.read(8 * nw), dtype="<f8").reshape(
                spec.in_dim, spec.out_dim
            )
            b = np.frombuffer(f.read(8 * spec.out_dim), dtype="<f8")
            net.weights[i] = w.astype(np.float64)
            net.biases[i] = b.astype(np.float64)
        if f.read(1):
            raise ValueError("trailing bytes in checkpoint")
    return net
