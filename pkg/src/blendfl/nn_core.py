"""Dense feed-forward networks with explicit forward and backward passes.

Parameters of a network live in one flat float64 vector.  Layer ``k`` owns a
contiguous slice holding its weight matrix (``input_dim x output_dim``, row
major) followed by its bias.  Gradients share the same layout, so aggregation,
checkpointing and SGD all operate on plain vectors.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid", "softmax")
LOSSES = ("binary_cross_entropy", "categorical_cross_entropy")
PROB_EPS = 1e-12

CHECKPOINT_MAGIC = b"BFLNET01"


class ShapeError(ValueError):
    pass


class TraceError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if int(self.input_dim) < 1 or int(self.output_dim) < 1:
            raise ShapeError(f"layer dims must be >= 1, got {self.input_dim}x{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.input_dim * self.output_dim + self.output_dim


def param_layout(layers: Sequence[LayerSpec]) -> list[int]:
    """Offsets of each layer's block inside the flat vector (plus the total)."""
    offsets = [0]
    for layer in layers:
        offsets.append(offsets[-1] + layer.n_params)
    return offsets


class Network:
    """An ordered stack of dense layers and its flat parameter vector.

    Instances are treated as values: ``sgd_step`` and ``with_params`` return
    new networks and the parameter array is marked read-only.
    """

    __slots__ = ("layers", "offsets", "params")

    def __init__(self, layers: Iterable[LayerSpec], params: np.ndarray | None = None):
        layers = tuple(layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k - 1].output_dim != layers[k].input_dim:
                raise ShapeError(
                    f"layer {k} expects input_dim {layers[k].input_dim} "
                    f"but layer {k - 1} emits {layers[k - 1].output_dim}"
                )
        for k, layer in enumerate(layers[:-1]):
            if layer.activation == "softmax":
                raise ShapeError(f"softmax only allowed on the final layer (layer {k})")
        offsets = param_layout(layers)
        if params is None:
            params = np.zeros(offsets[-1])
        else:
            params = np.array(params, dtype=np.float64).ravel()
            if params.size != offsets[-1]:
                raise ShapeError(f"expected {offsets[-1]} parameters, got {params.size}")
        params.flags.writeable = False
        self.layers = layers
        self.offsets = offsets
        self.params = params

    @classmethod
    def init(cls, layers: Iterable[LayerSpec], rng: np.random.Generator) -> "Network":
        """Glorot-uniform weights, zero biases."""
        layers = tuple(layers)
        chunks = []
        for layer in layers:
            limit = np.sqrt(6.0 / (layer.input_dim + layer.output_dim))
            chunks.append(rng.uniform(-limit, limit, size=layer.input_dim * layer.output_dim))
            chunks.append(np.zeros(layer.output_dim))
        return cls(layers, np.concatenate(chunks))

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    @property
    def n_params(self) -> int:
        return self.offsets[-1]

    def weights(self, k: int, params: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Views ``(W, b)`` of layer ``k`` inside ``params`` (default: own params)."""
        p = self.params if params is None else params
        layer = self.layers[k]
        start = self.offsets[k]
        mid = start + layer.input_dim * layer.output_dim
        W = p[start:mid].reshape(layer.input_dim, layer.output_dim)
        return W, p[mid:self.offsets[k + 1]]

    def with_params(self, params: np.ndarray) -> "Network":
        return Network(self.layers, params)

    def same_architecture(self, other: "Network") -> bool:
        return self.layers == other.layers

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return forward(self, batch)[0]

    def __repr__(self):
        dims = " -> ".join(
            [str(self.input_dim)] + [f"{l.output_dim}({l.activation})" for l in self.layers]
        )
        return f"Network({dims})"


@dataclass
class ForwardTrace:
    network: Network
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.post)

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _activation_backward(kind: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return g * (z > 0.0)
    if kind == "identity":
        return g
    if kind == "sigmoid":
        return g * a * (1.0 - a)
    return a * (g - np.sum(g * a, axis=1, keepdims=True))


def forward(net: Network, batch: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"batch must be a non-empty 2-D matrix, got shape {x.shape}")
    trace = ForwardTrace(net)
    for k, layer in enumerate(net.layers):
        if x.shape[1] != layer.input_dim:
            raise ShapeError(
                f"layer {k} expects {layer.input_dim} input columns, got {x.shape[1]}"
            )
        W, b = net.weights(k)
        z = x @ W + b
        a = _activate(layer.activation, z)
        trace.inputs.append(x)
        trace.pre.append(z)
        trace.post.append(a)
        x = a
    return x, trace


def backward(net: Network, trace: ForwardTrace, output_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule through a cached trace.

    Returns the gradient w.r.t. the flat parameters and w.r.t. the batch that
    was fed to ``forward``.  ``output_grad`` is used as-is (no averaging).
    """
    if trace.network is not net or trace.depth != len(net.layers):
        raise TraceError("trace was not produced by a forward pass of this network")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.post[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != forward output shape {trace.post[-1].shape}")
    grad = np.empty(net.n_params)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        gz = _activation_backward(layer.activation, trace.pre[k], trace.post[k], g)
        gW, gb = net.weights(k, grad)
        np.matmul(trace.inputs[k].T, gz, out=gW)
        gb[...] = gz.sum(axis=0)
        W, _ = net.weights(k)
        g = gz @ W.T
    return grad, g


def sgd_step(net: Network, grad: np.ndarray, lr: float) -> Network:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.params.shape:
        raise ShapeError(f"gradient has {grad.size} entries, network has {net.n_params}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient entries")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    new = net.params - lr * grad
    if not np.all(np.isfinite(new)):
        raise NumericError("update produced non-finite parameters")
    return Network(net.layers, new)


def loss_and_grad(output: np.ndarray, labels, kind: str = "categorical_cross_entropy") -> tuple[float, np.ndarray]:
    """Mean cross-entropy of probability outputs and its exact gradient.

    Probabilities are clamped at ``PROB_EPS`` before the log; where the clamp
    is active the derivative is zero.
    """
    out = np.asarray(output, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).ravel()
    n = out.shape[0]
    if y.shape[0] != n:
        raise DataError(f"{n} outputs but {y.shape[0]} labels")
    if kind == "categorical_cross_entropy":
        k = out.shape[1]
        if y.size and (y.min() < 0 or y.max() >= k):
            raise DataError(f"labels must lie in [0, {k})")
        rows = np.arange(n)
        p = out[rows, y]
        clamped = np.maximum(p, PROB_EPS)
        loss = float(-np.mean(np.log(clamped)))
        grad = np.zeros_like(out)
        grad[rows, y] = np.where(p > PROB_EPS, -1.0 / (n * clamped), 0.0)
        return loss, grad
    if kind == "binary_cross_entropy":
        if out.ndim != 2 or out.shape[1] != 1:
            raise ShapeError("binary cross-entropy expects a single probability column")
        if y.size and (y.min() < 0 or y.max() > 1):
            raise DataError("binary labels must be 0 or 1")
        p = out[:, 0]
        t = y.astype(np.float64)
        hi = np.minimum(np.maximum(p, PROB_EPS), 1.0 - PROB_EPS)
        loss = float(-np.mean(t * np.log(hi) + (1.0 - t) * np.log(1.0 - hi)))
        active = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
        g = np.where(active, (-t / hi + (1.0 - t) / (1.0 - hi)) / n, 0.0)
        return max(loss, 0.0), g[:, None]
    raise ValueError(f"unknown loss {kind!r}")


# -- composition -------------------------------------------------------------

def chain(first: Network, second: Network) -> Network:
    """Concatenate two networks; forward(chain) == second(first(x))."""
    if first.layers[-1].activation == "softmax":
        raise ShapeError("cannot chain after a softmax layer")
    return Network(first.layers + second.layers, np.concatenate([first.params, second.params]))


def parallel(left: Network, right: Network) -> Network:
    """Block-diagonal network acting on ``[x_left | x_right]``.

    Both networks need the same depth and per-layer activations (softmax is
    not separable and is rejected).
    """
    if len(left.layers) != len(right.layers):
        raise ShapeError("parallel networks must have equal depth")
    layers, chunks = [], []
    for k, (la, lb) in enumerate(zip(left.layers, right.layers)):
        if la.activation != lb.activation or la.activation == "softmax":
            raise ShapeError(f"layer {k}: activations {la.activation}/{lb.activation} cannot run in parallel")
        spec = LayerSpec(la.input_dim + lb.input_dim, la.output_dim + lb.output_dim, la.activation)
        Wa, ba = left.weights(k)
        Wb, bb = right.weights(k)
        W = np.zeros((spec.input_dim, spec.output_dim))
        W[: la.input_dim, : la.output_dim] = Wa
        W[la.input_dim:, la.output_dim:] = Wb
        layers.append(spec)
        chunks += [W.ravel(), ba, bb]
    return Network(layers, np.concatenate(chunks))


def split_parallel_grad(left: Network, right: Network, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map a gradient of ``parallel(left, right)`` back onto the two parts."""
    joined = parallel(left, right)
    ga, gb = np.empty(left.n_params), np.empty(right.n_params)
    for k, (la, lb) in enumerate(zip(left.layers, right.layers)):
        W, b = joined.weights(k, grad)
        Wa, ba = left.weights(k, ga)
        Wb, bb = right.weights(k, gb)
        Wa[...] = W[: la.input_dim, : la.output_dim]
        Wb[...] = W[la.input_dim:, la.output_dim:]
        ba[...] = b[: la.output_dim]
        bb[...] = b[la.output_dim:]
    return ga, gb


# -- checkpoints -------------------------------------------------------------

def _describe(net: Network) -> list:
    return [[l.input_dim, l.output_dim, l.activation] for l in net.layers]


def save_networks(path, networks: Mapping[str, Network]) -> None:
    """Write named networks to one checkpoint file.

    Layout: ``BFLNET01`` magic, little-endian uint32 header length, a UTF-8
    JSON header ``{"networks": [{"name", "layers", "count"}...]}``, then every
    network's parameters in header order as little-endian float64.
    """
    entries = [{"name": name, "layers": _describe(net), "count": net.n_params}
               for name, net in networks.items()]
    header = json.dumps({"networks": entries}, sort_keys=True).encode("utf-8")
    body = b"".join(np.asarray(net.params, dtype="<f8").tobytes() for net in networks.values())
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + body)


def load_networks(path) -> dict[str, Network]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    out = {}
    for entry in header["networks"]:
        layers = [LayerSpec(int(i), int(o), a) for i, o, a in entry["layers"]]
        n = int(entry["count"])
        params = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        out[entry["name"]] = Network(layers, params)
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return out
