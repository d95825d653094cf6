"""Multi-channel 1D convolutional network: forward, backprop, SGD training.

Layers follow the <filter-channels-stride> notation: valid (unpadded)
1-D cross-correlation, max pooling with recorded argmax, ReLU, fully
connected layers over the channel-major flattened input, and a softmax
output layer with its own linear map.  Everything trains in float64 so
analytic gradients can be checked against finite differences tightly;
model files store parameters as float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataFormatError

CNN_MAGIC = b"CNN1"


# ---------------------------------------------------------------------------
# Layer and network specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv1D:
    filter_size: int
    out_channels: int
    stride: int

    def __post_init__(self):
        if self.filter_size < 1 or self.out_channels < 1 or self.stride < 1:
            raise ValueError(f"invalid conv layer {self}")


@dataclass(frozen=True)
class Max1D:
    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError(f"invalid max-pool layer {self}")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class FullyConnected:
    units: int

    def __post_init__(self):
        if self.units < 1:
            raise ValueError(f"invalid fully-connected layer {self}")


@dataclass(frozen=True)
class SoftmaxOutput:
    classes: int

    def __post_init__(self):
        if self.classes < 1:
            raise ValueError(f"invalid softmax layer {self}")


LayerSpec = Conv1D | Max1D | ReLU | FullyConnected | SoftmaxOutput


def conv_output_length(length: int, filter_size: int, stride: int) -> int:
    """Valid-convolution output length: floor((L - X) / S) + 1."""
    return (length - filter_size) // stride + 1


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture plus input shape; every layer shape-checked upfront."""

    input_channels: int
    input_length: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.input_channels < 1 or self.input_length < 1:
            raise ValueError("input shape must be positive")
        layers = tuple(self.layers)
        if not layers or not isinstance(layers[-1], SoftmaxOutput):
            raise ValueError("network must end with a softmax output layer")
        if any(isinstance(l, SoftmaxOutput) for l in layers[:-1]):
            raise ValueError("softmax output must appear exactly once, last")
        if not any(isinstance(l, FullyConnected) for l in layers[:-1]):
            raise ValueError("a fully-connected feature layer must precede the softmax output")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "_shapes", tuple(self._check_shapes()))

    def _check_shapes(self):
        """Propagate shapes through all layers; raises on any invalid size."""
        shape: tuple = (self.input_channels, self.input_length)
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv1D):
                if len(shape) != 2:
                    raise ValueError(f"layer {i}: convolution after flattening")
                c, length = shape
                if length < layer.filter_size:
                    raise ValueError(
                        f"layer {i}: input length {length} shorter than filter {layer.filter_size}"
                    )
                shape = (layer.out_channels, conv_output_length(length, layer.filter_size, layer.stride))
            elif isinstance(layer, Max1D):
                if len(shape) != 2:
                    raise ValueError(f"layer {i}: pooling after flattening")
                c, length = shape
                if length < layer.window:
                    raise ValueError(
                        f"layer {i}: input length {length} shorter than window {layer.window}"
                    )
                shape = (c, conv_output_length(length, layer.window, layer.stride))
            elif isinstance(layer, ReLU):
                pass
            elif isinstance(layer, FullyConnected):
                shape = (layer.units,)
            elif isinstance(layer, SoftmaxOutput):
                shape = (layer.classes,)
            shapes.append(shape)
        return shapes

    def layer_shapes(self) -> tuple[tuple, ...]:
        """Shape after each layer, (channels, length) or (units,)."""
        return self._shapes

    def feature_cutoff(self) -> int:
        """Index of the last layer contributing to extracted features.

        That is the last fully-connected layer before the softmax output,
        or the ReLU immediately following it when present.
        """
        fc_idx = max(i for i, l in enumerate(self.layers[:-1]) if isinstance(l, FullyConnected))
        if fc_idx + 1 < len(self.layers) - 1 and isinstance(self.layers[fc_idx + 1], ReLU):
            return fc_idx + 1
        return fc_idx

    def num_classes(self) -> int:
        return self.layers[-1].classes


def _flat_size(shape: tuple) -> int:
    return int(np.prod(shape))


def _linear_in_size(spec: NetworkSpec, index: int) -> int:
    """Flattened input size of the linear layer at ``index``."""
    if index == 0:
        return spec.input_channels * spec.input_length
    return _flat_size(spec.layer_shapes()[index - 1])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class NetworkState:
    """Learned parameters: one (weights, biases) pair per parameterised layer."""

    params: list  # entry i: (W, b) for conv/fc/softmax layers, None otherwise

    def copy(self) -> "NetworkState":
        return NetworkState(
            params=[None if p is None else (p[0].copy(), p[1].copy()) for p in self.params]
        )


def init_state(spec: NetworkSpec, seed_or_rng) -> NetworkState:
    """Glorot-uniform weights, zero biases, drawn in layer order."""
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    params = []
    shape: tuple = (spec.input_channels, spec.input_length)
    for layer in spec.layers:
        if isinstance(layer, Conv1D):
            c_in = shape[0]
            fan_in = c_in * layer.filter_size
            fan_out = layer.out_channels * layer.filter_size
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(layer.out_channels, c_in, layer.filter_size))
            params.append((w, np.zeros(layer.out_channels)))
            shape = (layer.out_channels, conv_output_length(shape[1], layer.filter_size, layer.stride))
        elif isinstance(layer, Max1D):
            params.append(None)
            shape = (shape[0], conv_output_length(shape[1], layer.window, layer.stride))
        elif isinstance(layer, ReLU):
            params.append(None)
        elif isinstance(layer, (FullyConnected, SoftmaxOutput)):
            units = layer.units if isinstance(layer, FullyConnected) else layer.classes
            fan_in = _flat_size(shape)
            lim = np.sqrt(6.0 / (fan_in + units))
            w = rng.uniform(-lim, lim, size=(units, fan_in))
            params.append((w, np.zeros(units)))
            shape = (units,)
    return NetworkState(params=params)


# ---------------------------------------------------------------------------
# Single-layer operators (single sample)
# ---------------------------------------------------------------------------

def conv1d_forward(x: np.ndarray, weights: np.ndarray, biases: np.ndarray, stride: int) -> np.ndarray:
    """Valid 1-D cross-correlation of a C_in x L input.

    out[o, t] = b[o] + sum_c sum_k W[o, c, k] * x[c, t*stride + k]
    """
    out = _conv_forward(x[None], weights, biases, stride)
    return out[0]


def max1d_forward(x: np.ndarray, window: int, stride: int):
    """Max pooling of a C x L input; returns (output, argmax offsets).

    Ties take the lowest offset within the window, and the recorded
    argmax routes the gradient in the backward pass.
    """
    out, amax = _max_forward(x[None], window, stride)
    return out[0], amax[0]


def _conv_forward(x, weights, biases, stride):
    windows = sliding_window_view(x, weights.shape[2], axis=2)[:, :, ::stride, :]
    out = np.einsum("ocx,nclx->nol", weights, windows, optimize=True)
    return out + biases[None, :, None]


def _max_forward(x, window, stride):
    windows = sliding_window_view(x, window, axis=2)[:, :, ::stride, :]
    amax = windows.argmax(axis=3)
    out = np.take_along_axis(windows, amax[..., None], axis=3)[..., 0]
    return out, amax


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _forward_batch(spec: NetworkSpec, state: NetworkState, x: np.ndarray):
    """Run a (N, m, L) batch through the network; returns (probs, cache)."""
    if x.ndim != 3 or x.shape[1] != spec.input_channels or x.shape[2] != spec.input_length:
        raise ValueError(
            f"input shape {x.shape[1:]} does not match spec "
            f"({spec.input_channels}, {spec.input_length})"
        )
    act = x
    cache = []
    for layer, params in zip(spec.layers, state.params):
        if isinstance(layer, Conv1D):
            w, b = params
            cache.append({"x": act})
            act = _conv_forward(act, w, b, layer.stride)
        elif isinstance(layer, Max1D):
            out, amax = _max_forward(act, layer.window, layer.stride)
            cache.append({"amax": amax, "in_len": act.shape[2], "channels": act.shape[1]})
            act = out
        elif isinstance(layer, ReLU):
            act = np.maximum(act, 0.0)
            cache.append({"out": act})
        elif isinstance(layer, (FullyConnected, SoftmaxOutput)):
            pre_flatten = act.shape[1:] if act.ndim == 3 else None
            flat = act.reshape(act.shape[0], -1)  # channel-major flatten
            w, b = params
            cache.append({"x": flat, "pre_flatten": pre_flatten})
            act = flat @ w.T + b
            if isinstance(layer, SoftmaxOutput):
                act = softmax(act)
                cache[-1]["probs"] = act
    return act, cache


def forward(spec: NetworkSpec, state: NetworkState, x: np.ndarray):
    """Class probabilities for one m x L input; also returns the cache."""
    probs, cache = _forward_batch(spec, state, np.asarray(x, dtype=np.float64)[None])
    return probs[0], cache


def _backward_batch(spec: NetworkSpec, state: NetworkState, cache, labels: np.ndarray):
    """Gradients of the mean cross-entropy loss over the batch.

    Returns a list aligned with ``state.params``: (dW, db) pairs, or None
    for parameterless layers.
    """
    probs = cache[-1]["probs"]
    n, k = probs.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range")
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n

    grads: list = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        entry = cache[i]
        if isinstance(layer, (SoftmaxOutput, FullyConnected)):
            w, _ = state.params[i]
            x_in = entry["x"]
            grads[i] = (grad.T @ x_in, grad.sum(axis=0))
            grad = grad @ w
            if entry["pre_flatten"] is not None:
                grad = grad.reshape(n, *entry["pre_flatten"])
        elif isinstance(layer, ReLU):
            grad = grad * (entry["out"] > 0.0)
        elif isinstance(layer, Max1D):
            c = entry["channels"]
            lp = grad.shape[2]
            dx = np.zeros((n, c, entry["in_len"]))
            pos = np.arange(lp)[None, None, :] * layer.stride + entry["amax"]
            np.add.at(
                dx,
                (np.arange(n)[:, None, None], np.arange(c)[None, :, None], pos),
                grad,
            )
            grad = dx
        elif isinstance(layer, Conv1D):
            w, _ = state.params[i]
            x_in = entry["x"]
            windows = sliding_window_view(x_in, layer.filter_size, axis=2)[:, :, :: layer.stride, :]
            dw = np.einsum("nol,nclx->ocx", grad, windows, optimize=True)
            db = grad.sum(axis=(0, 2))
            lp = grad.shape[2]
            dx = np.zeros_like(x_in)
            for kk in range(layer.filter_size):
                contrib = np.einsum("nol,oc->ncl", grad, w[:, :, kk])
                dx[:, :, kk : kk + layer.stride * (lp - 1) + 1 : layer.stride] += contrib
            grads[i] = (dw, db)
            grad = dx
    return grads


def backward(spec: NetworkSpec, state: NetworkState, cache, true_label: int):
    """Gradients of -log p[true_label] for the cached single-sample forward."""
    return _backward_batch(spec, state, cache, np.array([true_label]))


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true labels."""
    n, k = probs.shape
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range")
    picked = probs[np.arange(n), labels]
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def batch_gradients(spec: NetworkSpec, state: NetworkState, x: np.ndarray, labels: np.ndarray):
    """Mean loss and parameter gradients for a (N, m, L) batch."""
    probs, cache = _forward_batch(spec, state, x)
    loss = cross_entropy(probs, labels)
    grads = _backward_batch(spec, state, cache, labels)
    return loss, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def train(spec: NetworkSpec, samples, labels, config: TrainConfig):
    """Mini-batch SGD with momentum on the mean batch cross-entropy.

    ``samples`` is a sequence of m x L arrays, ``labels`` integer class
    indices.  Shuffling and initialisation derive from config.seed, so
    the returned (state, per-epoch mean loss) is deterministic.  Weight
    decay applies to weight matrices, not biases.
    """
    x = np.stack([np.asarray(s, dtype=np.float64) for s in samples])
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 3 or x.shape[1] != spec.input_channels or x.shape[2] != spec.input_length:
        raise ValueError(f"sample shape {x.shape[1:]} does not match spec")
    if y.shape != (x.shape[0],):
        raise ValueError("labels must match sample count")
    k = spec.num_classes()
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError("label out of range")
    present = set(y.tolist())
    missing = [c for c in range(k) if c not in present]
    if missing:
        raise ValueError(f"no training sample for class index {missing[0]}")

    rng = np.random.default_rng(config.seed)
    state = init_state(spec, rng)
    velocity = [
        None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1]))
        for p in state.params
    ]

    n = x.shape[0]
    loss_history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = batch_gradients(spec, state, x[idx], y[idx])
            epoch_loss += loss * idx.size
            for li, g in enumerate(grads):
                if g is None:
                    continue
                w, b = state.params[li]
                vw, vb = velocity[li]
                dw = g[0] + config.weight_decay * w
                vw *= config.momentum
                vw -= config.learning_rate * dw
                vb *= config.momentum
                vb -= config.learning_rate * g[1]
                w += vw
                b += vb
        loss_history.append(epoch_loss / n)
    return state, loss_history


def extract_features(spec: NetworkSpec, state: NetworkState, x: np.ndarray) -> np.ndarray:
    """Activations of the feature layer (last FC before the output).

    When a ReLU follows that layer the rectified values are returned,
    keeping features nonnegative for the chi-squared kernel downstream.
    """
    cutoff = spec.feature_cutoff()
    act = np.asarray(x, dtype=np.float64)[None]
    if act.ndim != 3 or act.shape[1] != spec.input_channels or act.shape[2] != spec.input_length:
        raise ValueError(
            f"input shape {np.asarray(x).shape} does not match spec "
            f"({spec.input_channels}, {spec.input_length})"
        )
    for layer, params in list(zip(spec.layers, state.params))[: cutoff + 1]:
        if isinstance(layer, Conv1D):
            act = _conv_forward(act, params[0], params[1], layer.stride)
        elif isinstance(layer, Max1D):
            act, _ = _max_forward(act, layer.window, layer.stride)
        elif isinstance(layer, ReLU):
            act = np.maximum(act, 0.0)
        elif isinstance(layer, (FullyConnected, SoftmaxOutput)):
            flat = act.reshape(act.shape[0], -1)
            act = flat @ params[0].T + params[1]
    return act.reshape(-1)


# ---------------------------------------------------------------------------
# Architecture text format
# ---------------------------------------------------------------------------

def parse_architecture(text: str) -> tuple[LayerSpec, ...]:
    """Parse the one-layer-per-line format.

    Lines: ``conv X C S``, ``max Y S``, ``relu``, ``fc U``, ``softmax K``.
    Blank lines and ``#`` comments are ignored.
    """
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        op, args = fields[0].lower(), fields[1:]
        try:
            if op == "conv" and len(args) == 3:
                layers.append(Conv1D(int(args[0]), int(args[1]), int(args[2])))
            elif op == "max" and len(args) == 2:
                layers.append(Max1D(int(args[0]), int(args[1])))
            elif op == "relu" and not args:
                layers.append(ReLU())
            elif op == "fc" and len(args) == 1:
                layers.append(FullyConnected(int(args[0])))
            elif op == "softmax" and len(args) == 1:
                layers.append(SoftmaxOutput(int(args[0])))
            else:
                raise DataFormatError(f"line {lineno}: unrecognised layer {line!r}")
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: bad layer arguments {line!r}") from exc
    return tuple(layers)


def format_architecture(layers) -> str:
    lines = []
    for layer in layers:
        if isinstance(layer, Conv1D):
            lines.append(f"conv {layer.filter_size} {layer.out_channels} {layer.stride}")
        elif isinstance(layer, Max1D):
            lines.append(f"max {layer.window} {layer.stride}")
        elif isinstance(layer, ReLU):
            lines.append("relu")
        elif isinstance(layer, FullyConnected):
            lines.append(f"fc {layer.units}")
        elif isinstance(layer, SoftmaxOutput):
            lines.append(f"softmax {layer.classes}")
    return "\n".join(lines) + "\n"


def default_architecture(num_classes: int) -> tuple[LayerSpec, ...]:
    """Stock architecture used when no file is given."""
    return (
        Conv1D(5, 32, 2),
        ReLU(),
        Max1D(2, 2),
        Conv1D(3, 64, 1),
        ReLU(),
        Max1D(2, 2),
        FullyConnected(64),
        ReLU(),
        SoftmaxOutput(num_classes),
    )


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

def save_model(spec: NetworkSpec, state: NetworkState, path) -> None:
    """Write CNN1: magic, length-prefixed spec text, then f32 tensors."""
    spec_text = f"input {spec.input_channels} {spec.input_length}\n" + format_architecture(spec.layers)
    encoded = spec_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CNN_MAGIC)
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        for p in state.params:
            if p is None:
                continue
            fh.write(np.ascontiguousarray(p[0]).astype("<f4").tobytes())
            fh.write(p[1].astype("<f4").tobytes())


def load_model(path):
    """Read a CNN1 file; returns (spec, state) with float64 parameters."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CNN_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise DataFormatError(f"{path}: truncated header")
    (text_len,) = struct.unpack_from("<I", blob, 4)
    text_end = 8 + text_len
    if len(blob) < text_end:
        raise DataFormatError(f"{path}: truncated spec block")
    spec_text = blob[8:text_end].decode("utf-8")
    lines = spec_text.splitlines()
    if not lines or not lines[0].startswith("input "):
        raise DataFormatError(f"{path}: spec block missing input line")
    try:
        _, m_str, l_str = lines[0].split()
        spec = NetworkSpec(
            input_channels=int(m_str),
            input_length=int(l_str),
            layers=parse_architecture("\n".join(lines[1:])),
        )
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed spec block") from exc

    reference = init_state(spec, 0)
    params = []
    off = text_end
    for p in reference.params:
        if p is None:
            params.append(None)
            continue
        w_count = p[0].size
        b_count = p[1].size
        need = 4 * (w_count + b_count)
        if len(blob) < off + need:
            raise DataFormatError(f"{path}: truncated parameters")
        w = np.frombuffer(blob, dtype="<f4", count=w_count, offset=off)
        off += 4 * w_count
        b = np.frombuffer(blob, dtype="<f4", count=b_count, offset=off)
        off += 4 * b_count
        params.append((w.astype(np.float64).reshape(p[0].shape), b.astype(np.float64)))
    if off != len(blob):
        raise DataFormatError(f"{path}: trailing bytes after parameters")
    return spec, NetworkState(params=params)
