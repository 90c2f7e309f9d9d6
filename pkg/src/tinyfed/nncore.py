"""Dense feed-forward networks with hand-written backpropagation.

Parameters live in one flat array. Each layer contributes a weight block of
shape (fan_in, fan_out) stored row-major, followed by its bias vector, so a
layer's slice can be addressed directly from the manifest.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")
OUTPUT_HEADS = ("linear", "softmax")
LOSSES = ("mse", "cross_entropy")

CHECKPOINT_MAGIC = b"TNFD"
CHECKPOINT_VERSION = 1
_PRECISION_FLAGS = {"f32": 0, "f64": 1}
_DTYPES = {"f32": np.float32, "f64": np.float64}


class ConfigurationError(ValueError):
    """Raised for invalid network, loss, or optimizer configuration."""


class DimensionError(ValueError):
    """Raised when an input or parameter array has the wrong shape."""


class CheckpointError(ValueError):
    """Raised when a checkpoint blob cannot be decoded."""


@dataclass(frozen=True)
class LayerShape:
    rows: int
    cols: int
    bias: int
    offset: int

    @property
    def size(self) -> int:
        return self.rows * self.cols + self.bias

    @property
    def weight_slice(self) -> slice:
        return slice(self.offset, self.offset + self.rows * self.cols)

    @property
    def bias_slice(self) -> slice:
        start = self.offset + self.rows * self.cols
        return slice(start, start + self.bias)


@dataclass(frozen=True)
class NetworkConfig:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    output_head: str = "linear"
    manifest: tuple[LayerShape, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ConfigurationError("a network needs at least 2 layer sizes")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise ConfigurationError(f"unknown output head {self.output_head!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        shapes, offset = [], 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shape = LayerShape(fan_in, fan_out, fan_out, offset)
            shapes.append(shape)
            offset += shape.size
        object.__setattr__(self, "manifest", tuple(shapes))

    @property
    def n_params(self) -> int:
        last = self.manifest[-1]
        return last.offset + last.size

    @property
    def n_layers(self) -> int:
        return len(self.manifest)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class ParameterVector:
    """Flat parameter (or gradient) array plus the layer manifest."""

    values: np.ndarray
    manifest: tuple[LayerShape, ...]

    def __post_init__(self):
        expected = sum(s.size for s in self.manifest)
        if self.values.ndim != 1 or self.values.size != expected:
            raise DimensionError(
                f"values length {self.values.size} does not match manifest total {expected}"
            )

    @property
    def precision(self) -> str:
        return "f32" if self.values.dtype == np.float32 else "f64"

    def __len__(self) -> int:
        return self.values.size

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (weights, bias) views for layer ``i``."""
        s = self.manifest[i]
        return self.values[s.weight_slice].reshape(s.rows, s.cols), self.values[s.bias_slice]

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.manifest)

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.manifest)


GradientVector = ParameterVector


def init_network(config: NetworkConfig, seed: int, precision: str = "f64") -> ParameterVector:
    """Glorot-uniform weights and zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    values = np.zeros(config.n_params, dtype=np.float64)
    for s in config.manifest:
        limit = np.sqrt(6.0 / (s.rows + s.cols))
        values[s.weight_slice] = rng.uniform(-limit, limit, size=s.rows * s.cols)
    return ParameterVector(values.astype(_DTYPES[precision]), config.manifest)


def _activate(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(config: NetworkConfig, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != config.input_dim:
        raise DimensionError(
            f"expected input of width {config.input_dim}, got shape {x.shape}"
        )
    return batch, single


def _forward_trace(values: np.ndarray, config: NetworkConfig, batch: np.ndarray):
    """Run the network and keep every layer's activations for backprop."""
    acts = [batch]
    a = batch
    last = config.n_layers - 1
    for i, s in enumerate(config.manifest):
        w = values[s.weight_slice].reshape(s.rows, s.cols)
        z = a @ w + values[s.bias_slice]
        a = _activate(z, config.activation) if i < last else z
        acts.append(a)
    return acts


def forward(params: ParameterVector, config: NetworkConfig, x) -> np.ndarray:
    """Predict for one input vector (shape ``(d,)``) or a batch (``(n, d)``)."""
    batch, single = _as_batch(config, x)
    out = _forward_trace(params.values, config, batch)[-1]
    if config.output_head == "softmax":
        out = _softmax(out)
    return out[0] if single else out


def _targets(config: NetworkConfig, target, loss: str, n: int) -> np.ndarray:
    if loss == "cross_entropy":
        t = np.asarray(target)
        if t.ndim == 2:
            idx = np.argmax(t, axis=1)
        elif n == 1 and t.ndim == 1 and t.size == config.output_dim and t.dtype.kind == "f":
            idx = np.array([int(np.argmax(t))])
        else:
            idx = np.atleast_1d(t).astype(np.int64)
        if idx.shape[0] != n or np.any(idx < 0) or np.any(idx >= config.output_dim):
            raise DimensionError(f"bad class targets {target!r} for {n} inputs")
        return idx
    t = np.asarray(target, dtype=np.float64).reshape(n, -1)
    if t.shape[1] != config.output_dim:
        raise DimensionError(f"target width {t.shape[1]} != output width {config.output_dim}")
    return t


def loss_and_grad(values: np.ndarray, config: NetworkConfig, batch: np.ndarray,
                  targets: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient as a flat array.

    Low-level entry point used by the training loops; ``targets`` must already
    be in canonical form (float matrix for mse, class indices for cross-entropy).
    """
    acts = _forward_trace(values, config, batch)
    out = acts[-1]
    n = batch.shape[0]
    if loss == "mse":
        diff = out - targets
        value = float(np.mean(diff * diff))
        delta = (2.0 / diff.size) * diff
    else:
        p = _softmax(out)
        picked = p[np.arange(n), targets]
        value = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
        delta = p
        delta[np.arange(n), targets] -= 1.0
        delta /= n

    grad = np.empty_like(values, dtype=np.float64)
    for i in range(config.n_layers - 1, -1, -1):
        s = config.manifest[i]
        a_in = acts[i]
        grad[s.weight_slice] = (a_in.T @ delta).ravel()
        grad[s.bias_slice] = delta.sum(axis=0)
        if i > 0:
            w = values[s.weight_slice].reshape(s.rows, s.cols)
            back = delta @ w.T
            if config.activation == "tanh":
                delta = back * (1.0 - a_in * a_in)
            else:
                delta = back * (a_in > 0.0)
    return value, grad.astype(values.dtype, copy=False)


def check_loss(config: NetworkConfig, loss: str) -> None:
    if loss not in LOSSES:
        raise ConfigurationError(f"unknown loss {loss!r}")
    if loss == "cross_entropy" and config.output_head != "softmax":
        raise ConfigurationError("cross_entropy requires a softmax output head")
    if loss == "mse" and config.output_head == "softmax":
        raise ConfigurationError("mse is only supported with a linear output head")


def default_loss(config: NetworkConfig) -> str:
    return "cross_entropy" if config.output_head == "softmax" else "mse"


def backward(params: ParameterVector, config: NetworkConfig, x, target,
             loss: str = "mse") -> tuple[float, GradientVector]:
    check_loss(config, loss)
    batch, _ = _as_batch(config, x)
    t = _targets(config, target, loss, batch.shape[0])
    value, grad = loss_and_grad(params.values, config, batch, t, loss)
    return value, GradientVector(grad, params.manifest)


@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be non-negative")


def optimizer_step(params: ParameterVector, grad: GradientVector,
                   state: OptimizerState) -> ParameterVector:
    """Return updated parameters; ``state`` moments and step counter advance in place."""
    if len(params) != len(grad):
        raise DimensionError(f"parameter length {len(params)} != gradient length {len(grad)}")
    p, g = params.values, grad.values
    state.step += 1
    if state.kind == "sgd":
        return params.with_values(p - state.learning_rate * g)
    if state.m is None:
        state.m = np.zeros(p.size)
        state.v = np.zeros(p.size)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values((p - update).astype(p.dtype, copy=False))


def train_batch(params: ParameterVector, config: NetworkConfig, x, y, steps: int,
                state: OptimizerState, loss: str | None = None) -> ParameterVector:
    """Full-batch training for ``steps`` iterations; used to fit base models."""
    loss = loss or default_loss(config)
    check_loss(config, loss)
    batch, _ = _as_batch(config, x)
    t = _targets(config, y, loss, batch.shape[0])
    for _ in range(steps):
        _, g = loss_and_grad(params.values, config, batch, t, loss)
        params = optimizer_step(params, params.with_values(g), state)
    return params


@dataclass
class GradientCheckReport:
    max_rel_error: float
    tolerance: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradient_check(config: NetworkConfig, seed: int, tolerance: float = 1e-5, *,
                   h: float = 1e-5, batch_size: int = 4, params: ParameterVector | None = None,
                   inputs=None, targets=None, floor: float = 1e-6) -> GradientCheckReport:
    """Compare backward() against central differences over every parameter.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps entries that are zero on both sides from dividing by zero.
    """
    rng = np.random.default_rng(seed)
    loss = default_loss(config)
    if params is None:
        params = init_network(config, seed)
        for s in config.manifest:
            params.values[s.bias_slice] = rng.normal(0.0, 0.1, size=s.bias)
    params = params.with_values(np.asarray(params.values, dtype=np.float64).copy())
    if inputs is None:
        inputs = rng.normal(size=(batch_size, config.input_dim))
    if targets is None:
        if loss == "mse":
            targets = rng.normal(size=(np.atleast_2d(inputs).shape[0], config.output_dim))
        else:
            targets = rng.integers(0, config.output_dim, size=np.atleast_2d(inputs).shape[0])
    batch, _ = _as_batch(config, inputs)
    t = _targets(config, targets, loss, batch.shape[0])

    _, analytic = loss_and_grad(params.values, config, batch, t, loss)
    numeric = np.empty_like(analytic)
    work = params.values.copy()
    for j in range(work.size):
        orig = work[j]
        work[j] = orig + h
        plus, _ = loss_and_grad(work, config, batch, t, loss)
        work[j] = orig - h
        minus, _ = loss_and_grad(work, config, batch, t, loss)
        work[j] = orig
        numeric[j] = (plus - minus) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradientCheckReport(float(rel.max()), tolerance, analytic, numeric)


def encode_checkpoint(params: ParameterVector, config: NetworkConfig) -> bytes:
    """Serialize to the TNFD layout: header, layer sizes, f32 LE parameters."""
    head = struct.pack("<4sHBH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                       _PRECISION_FLAGS[params.precision], len(config.layer_sizes))
    sizes = struct.pack(f"<{len(config.layer_sizes)}I", *config.layer_sizes)
    return head + sizes + np.asarray(params.values, dtype="<f4").tobytes()


def decode_checkpoint(blob: bytes) -> tuple[tuple[int, ...], str, np.ndarray, int]:
    """Return (layer_sizes, precision, values, bytes consumed)."""
    header = struct.calcsize("<4sHBH")
    if len(blob) < header:
        raise CheckpointError("checkpoint truncated in header")
    magic, version, flag, n_sizes = struct.unpack_from("<4sHBH", blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    precision = {v: k for k, v in _PRECISION_FLAGS.items()}.get(flag)
    if precision is None:
        raise CheckpointError(f"bad precision flag {flag}")
    end = header + 4 * n_sizes
    if len(blob) < end:
        raise CheckpointError("checkpoint truncated in layer sizes")
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, header)
    n = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    stop = end + 4 * n
    if len(blob) < stop:
        raise CheckpointError("checkpoint truncated in parameters")
    values = np.frombuffer(blob, dtype="<f4", count=n, offset=end).astype(_DTYPES[precision])
    return tuple(sizes), precision, values, stop


def save_checkpoint(path, params: ParameterVector, config: NetworkConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params, config))


def load_checkpoint(path, activation: str = "tanh", output_head: str = "linear"):
    """Load a checkpoint; activation and head are not stored and must be supplied."""
    with open(path, "rb") as fh:
        sizes, precision, values, _ = decode_checkpoint(fh.read())
    config = NetworkConfig(sizes, activation, output_head)
    return ParameterVector(values, config.manifest), config

