"""Streaming on-device learning on top of a frozen network.

A trainable output layer (the "head") sits behind a frozen base network.
Each incoming sample flows through the base, updates running input
statistics, is standardized, and is scored by the head; when a label is
present the score is recorded first and only then is the head updated.
"""
from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nncore, streams
from .nncore import NetworkConfig, OptimizerState, ParameterVector

SCALE_EPS = 1e-8
ENGINE_MAGIC = b"TOLS"
ENGINE_VERSION = 1
MODES = ("replace_last_layer", "append_new_layer")


class EmptyStatsError(ValueError):
    pass


class EmptyStoreError(ValueError):
    pass


@dataclass
class RunningStats:
    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            raise EmptyStatsError("no samples seen yet")
        return self.m2 / self.count

    def nbytes(self) -> int:
        return 8 + (0 if self.mean is None else self.mean.nbytes + self.m2.nbytes)


def update_running_stats(stats: RunningStats, x) -> RunningStats:
    """Welford single-pass update; returns a new accumulator."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if stats.count == 0:
        return RunningStats(1, x.copy(), np.zeros_like(x))
    if x.shape != stats.mean.shape:
        raise nncore.DimensionError(
            f"feature length {x.size} does not match running stats width {stats.mean.size}")
    count = stats.count + 1
    delta = x - stats.mean
    mean = stats.mean + delta / count
    m2 = stats.m2 + delta * (x - mean)
    return RunningStats(count, mean, m2)


def scale_input(stats: RunningStats, x) -> np.ndarray:
    if stats.count == 0:
        raise EmptyStatsError(
            "cannot standardize before any sample was seen; pass inputs through unscaled instead")
    return (np.asarray(x, dtype=np.float64) - stats.mean) / np.sqrt(stats.variance + SCALE_EPS)


@dataclass
class OnlineHead:
    config: NetworkConfig
    params: ParameterVector
    mode: str
    optimizer: OptimizerState

    @property
    def feature_dim(self) -> int:
        return self.config.input_dim

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    @property
    def weights(self) -> np.ndarray:
        return self.params.layer(0)[0]

    @property
    def bias(self) -> np.ndarray:
        return self.params.layer(0)[1]

    @property
    def loss(self) -> str:
        return nncore.default_loss(self.config)

    def nbytes(self) -> int:
        moments = 0 if self.optimizer.m is None else self.optimizer.m.nbytes * 2
        return self.params.values.nbytes + moments


def attach_head(base_params: ParameterVector, base_config: NetworkConfig, mode: str,
                output_dim: int, seed: int, *, learning_rate: float = 0.02,
                output_head: str | None = None, optimizer: str = "sgd") -> OnlineHead:
    if output_dim < 1:
        raise nncore.ConfigurationError("output_dim must be >= 1")
    if mode not in MODES:
        raise nncore.ConfigurationError(f"unknown head mode {mode!r}")
    if mode == "replace_last_layer":
        if base_config.n_layers < 2:
            raise nncore.ConfigurationError("replace mode needs a base with a hidden layer")
        feature_dim = base_config.layer_sizes[-2]
    else:
        feature_dim = base_config.output_dim
    cfg = NetworkConfig((feature_dim, output_dim), "tanh", output_head or base_config.output_head)
    params = nncore.init_network(cfg, seed)
    return OnlineHead(cfg, params, mode, OptimizerState(optimizer, learning_rate))


def base_features(base_params: ParameterVector, base_config: NetworkConfig, mode: str, x):
    """What the head sees: penultimate activations, or the base output."""
    batch = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if mode == "append_new_layer":
        out = nncore.forward(base_params, base_config, batch)
    else:
        out = nncore._forward_trace(base_params.values, base_config, batch)[-2]
    return out[0] if np.ndim(x) == 1 else out


@dataclass
class PrequentialMetrics:
    capacity: int = 50
    labeled_count: int = 0
    cumulative_loss: float = 0.0
    correct: int = 0
    window: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.window is None:
            self.window = np.zeros(self.capacity)

    def record(self, loss: float, correct: bool | None = None) -> None:
        self.window[self.labeled_count % self.capacity] = loss
        self.labeled_count += 1
        self.cumulative_loss += loss
        if correct:
            self.correct += 1

    @property
    def window_fill(self) -> int:
        return min(self.capacity, self.labeled_count)

    @property
    def windowed_loss(self) -> float:
        n = self.window_fill
        return float(self.window[:n].mean()) if n else math.nan

    @property
    def mean_loss(self) -> float:
        return self.cumulative_loss / self.labeled_count if self.labeled_count else math.nan

    @property
    def accuracy(self) -> float:
        return self.correct / self.labeled_count if self.labeled_count else math.nan

    def nbytes(self) -> int:
        return 24 + self.window.nbytes


def _head_loss(head: OnlineHead, feats: np.ndarray, target):
    batch = feats[None, :]
    t = nncore._targets(head.config, target, head.loss, 1)
    return batch, t


def process_stream(base_params: ParameterVector, base_config: NetworkConfig, head: OnlineHead,
                   stats: RunningStats, metrics: PrequentialMetrics,
                   stream: Sequence[streams.Sample], learning_rate: float | None = None,
                   observer: Callable | None = None):
    """Run the interleaved predict-then-update loop over ``stream``.

    Returns ``(head, stats, metrics)``; the inputs are not modified. When
    ``observer`` is given it is called as ``observer(index, params_before,
    recorded_loss)`` for every labelled sample, before the weight update.
    """
    head = copy.deepcopy(head)
    metrics = copy.deepcopy(metrics)
    if learning_rate is not None:
        head.optimizer.learning_rate = learning_rate
    values = head.params.values
    for i, sample in enumerate(stream):
        feats = base_features(base_params, base_config, head.mode, sample.input)
        stats = update_running_stats(stats, feats)
        scaled = scale_input(stats, feats)
        if not sample.has_label:
            continue
        batch, t = _head_loss(head, scaled, sample.target)
        loss, grad = nncore.loss_and_grad(values, head.config, batch, t, head.loss)
        correct = None
        if head.loss == "cross_entropy":
            logits = batch @ head.weights + head.bias
            correct = int(np.argmax(logits)) == int(t[0])
        metrics.record(loss, correct)
        if observer is not None:
            observer(i, head.params, loss)
        head.params = nncore.optimizer_step(head.params, head.params.with_values(grad),
                                            head.optimizer)
        values = head.params.values
    return head, stats, metrics


def predict(base_params, base_config, head: OnlineHead, stats: RunningStats, x):
    feats = base_features(base_params, base_config, head.mode, x)
    return nncore.forward(head.params, head.config, scale_input(stats, feats))


def engine_nbytes(head: OnlineHead, stats: RunningStats, metrics: PrequentialMetrics) -> int:
    return head.nbytes() + stats.nbytes() + metrics.nbytes()


@dataclass
class KnnHead:
    k: int = 1
    features: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def nbytes(self) -> int:
        return sum(f.nbytes for f in self.features) + 8 * len(self.labels)


def knn_fit(head: KnnHead, feature, label: int) -> KnnHead:
    """Store one instance. The store is appended in place and returned."""
    head.features.append(np.asarray(feature, dtype=np.float64).reshape(-1).copy())
    head.labels.append(int(label))
    return head


def knn_predict(head: KnnHead, feature) -> int:
    """Brute-force majority vote among the k nearest stored instances.

    Vote ties go to the label with the smaller mean distance, then to the lower label id.
    """
    if not head.labels:
        raise EmptyStoreError("KNN store is empty")
    if head.k > len(head.labels):
        raise EmptyStoreError(f"k={head.k} exceeds {len(head.labels)} stored instances")
    store = np.stack(head.features)
    d = np.sqrt(((store - np.asarray(feature, dtype=np.float64)) ** 2).sum(axis=1))
    nearest = np.argsort(d, kind="stable")[: head.k]
    votes: dict[int, list[float]] = {}
    for j in nearest:
        votes.setdefault(head.labels[j], []).append(d[j])
    return min(votes, key=lambda lab: (-len(votes[lab]), float(np.mean(votes[lab])), lab))


def encode_engine(base_params: ParameterVector, base_config: NetworkConfig,
                  head: OnlineHead, stats: RunningStats) -> bytes:
    """Engine checkpoint: base checkpoint blob, head parameters, running stats.

    Head parameters use f32 like the base; the Welford accumulators are kept in
    f64 so a restored stream continues with the same statistics.
    """
    base = nncore.encode_checkpoint(base_params, base_config)
    dim = 0 if stats.mean is None else stats.mean.size
    out = [
        struct.pack("<4sHI", ENGINE_MAGIC, ENGINE_VERSION, len(base)), base,
        struct.pack("<BBIIf", MODES.index(head.mode),
                    nncore.OUTPUT_HEADS.index(head.config.output_head),
                    head.feature_dim, head.output_dim, head.optimizer.learning_rate),
        np.asarray(head.params.values, dtype="<f4").tobytes(),
        struct.pack("<QI", stats.count, dim),
    ]
    if dim:
        out += [stats.mean.astype("<f8").tobytes(), stats.m2.astype("<f8").tobytes()]
    return b"".join(out)


def decode_engine(blob: bytes, activation: str = "tanh", output_head: str = "linear"):
    """Inverse of :func:`encode_engine`; returns (base_params, base_config, head, stats)."""
    magic, version, base_len = struct.unpack_from("<4sHI", blob)
    if magic != ENGINE_MAGIC or version != ENGINE_VERSION:
        raise nncore.CheckpointError("not a TinyOL engine checkpoint")
    pos = struct.calcsize("<4sHI")
    sizes, precision, values, used = nncore.decode_checkpoint(blob[pos:pos + base_len])
    base_config = NetworkConfig(sizes, activation, output_head)
    base = ParameterVector(values, base_config.manifest)
    pos += base_len
    mode_i, head_i, fdim, odim, lr = struct.unpack_from("<BBIIf", blob, pos)
    pos += struct.calcsize("<BBIIf")
    hcfg = NetworkConfig((fdim, odim), "tanh", nncore.OUTPUT_HEADS[head_i])
    n = hcfg.n_params
    hvals = np.frombuffer(blob, "<f4", n, pos).astype(np.float64)
    pos += 4 * n
    head = OnlineHead(hcfg, ParameterVector(hvals, hcfg.manifest), MODES[mode_i],
                      OptimizerState("sgd", float(lr)))
    count, dim = struct.unpack_from("<QI", blob, pos)
    pos += 12
    stats = RunningStats(count)
    if dim:
        stats.mean = np.frombuffer(blob, "<f8", dim, pos).copy()
        stats.m2 = np.frombuffer(blob, "<f8", dim, pos + 8 * dim).copy()
    return base, base_config, head, stats


# --- drift demonstration -------------------------------------------------

@dataclass(frozen=True)
class DriftSpec:
    amplitude_scale: float = 0.2
    phase_shift: float = 0.5


def perturb_task(task: streams.SineTask, drift: DriftSpec, rng) -> streams.SineTask:
    """Scale amplitude by 1±drift and shift phase by ±drift, signs drawn at random."""
    sa, sc = rng.choice([-1.0, 1.0], size=2)
    return streams.SineTask(task.a * (1.0 + sa * drift.amplitude_scale), task.b,
                            task.c + sc * drift.phase_shift)


def train_base(config: NetworkConfig, task: streams.SineTask, seed: int, *, n_points: int = 200,
               steps: int = 3000, learning_rate: float = 0.01, x_range=(-5.0, 5.0)):
    """Fit a fresh network to one sine task with full-batch Adam."""
    xs = np.linspace(x_range[0], x_range[1], n_points)[:, None]
    ys = task(xs)
    params = nncore.init_network(config, seed)
    return nncore.train_batch(params, config, xs, ys, steps, OptimizerState("adam", learning_rate))


@dataclass
class DriftTrialResult:
    frozen_losses: np.ndarray
    tinyol_losses: np.ndarray
    frozen_windowed: np.ndarray
    tinyol_windowed: np.ndarray

    @property
    def final_ratio(self) -> float:
        return float(self.tinyol_windowed[-1] / self.frozen_windowed[-1])


def _windowed(losses: np.ndarray, capacity: int) -> np.ndarray:
    csum = np.concatenate([[0.0], np.cumsum(losses)])
    idx = np.arange(1, losses.size + 1)
    lo = np.maximum(idx - capacity, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def drift_trial(seed: int, *, drift: DriftSpec = DriftSpec(), stream_length: int = 1000,
                learning_rate: float = 0.01, window: int = 50,
                dist: streams.TaskDistributionConfig | None = None,
                config: NetworkConfig | None = None, base=None) -> DriftTrialResult:
    """Frozen base vs. base+online head on the same drifted stream."""
    dist = dist or streams.TaskDistributionConfig()
    config = config or NetworkConfig((1, 32, 32, 1), "tanh", "linear")
    rng = np.random.default_rng([seed, 0xD81F7])
    trained_on = streams.sample_task(dist, int(rng.integers(2**63)))
    deployed = perturb_task(trained_on, drift, rng)
    if base is None:
        base = train_base(config, trained_on, seed, x_range=dist.x_range)
    stream = streams.sample_points(deployed, stream_length, dist.x_range, int(rng.integers(2**63)))

    xs, ys = streams.inputs_targets(stream)
    frozen = ((nncore.forward(base, config, xs) - ys) ** 2).mean(axis=1)

    losses = []
    head = attach_head(base, config, "replace_last_layer", 1, seed, learning_rate=learning_rate)
    _, _, metrics = process_stream(base, config, head, RunningStats(),
                                   PrequentialMetrics(window), stream,
                                   observer=lambda i, p, loss: losses.append(loss))
    tinyol = np.array(losses)
    return DriftTrialResult(frozen, tinyol, _windowed(frozen, window), _windowed(tinyol, window))
