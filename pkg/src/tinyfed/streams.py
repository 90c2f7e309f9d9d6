"""Task distributions and sample generation.

Every generator is a pure function of its configuration and seed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


class StreamError(ValueError):
    pass


class SchemaError(StreamError):
    pass


class MalformedRowError(StreamError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class SineTask:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if self.a == 0:
            raise StreamError("sine amplitude must be non-zero")
        if self.b <= 0:
            raise StreamError("sine frequency multiplier must be positive")

    def __call__(self, x):
        return self.a * np.sin(self.b * np.asarray(x, dtype=np.float64) + self.c)


@dataclass(frozen=True, eq=False)
class ClassificationTask:
    prototypes: np.ndarray
    noise_sigma: float
    class_labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.class_labels) < 2:
            raise StreamError("classification tasks need at least 2 classes")
        if len(self.class_labels) != self.prototypes.shape[0]:
            raise StreamError("one prototype per class required")

    @property
    def class_count(self) -> int:
        return len(self.class_labels)

    def __eq__(self, other):
        return (isinstance(other, ClassificationTask)
                and self.class_labels == other.class_labels
                and self.noise_sigma == other.noise_sigma
                and np.array_equal(self.prototypes, other.prototypes))


Task = Union[SineTask, ClassificationTask]


@dataclass(eq=False)
class Sample:
    input: np.ndarray
    target: object = None
    has_label: bool = True


@dataclass
class SupportQuerySplit:
    support: list
    query: list


@dataclass(frozen=True)
class TaskDistributionConfig:
    kind: str = "sine"
    amplitude: tuple[float, float] = (0.1, 5.0)
    frequency: tuple[float, float] = (0.8, 1.2)
    phase: tuple[float, float] = (0.0, math.pi)
    x_range: tuple[float, float] = (-5.0, 5.0)
    class_count: int = 5
    feature_dim: int = 16
    noise_sigma: float = 0.3
    class_pool: int = 50
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sine", "synthetic_classification"):
            raise StreamError(f"unknown task kind {self.kind!r}")
        for name in ("amplitude", "frequency", "phase", "x_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise StreamError(f"{name} range is inverted: {lo} > {hi}")
        if self.kind == "synthetic_classification":
            if self.class_count < 2:
                raise StreamError("class_count must be >= 2")
            if self.class_count > self.class_pool:
                raise StreamError(
                    f"class_count {self.class_count} exceeds class pool {self.class_pool}")
            if self.noise_sigma < 0:
                raise StreamError("noise_sigma must be non-negative")

    @property
    def input_dim(self) -> int:
        return 1 if self.kind == "sine" else self.feature_dim

    @property
    def output_dim(self) -> int:
        return 1 if self.kind == "sine" else self.class_count


def symmetric_phase_preset(**overrides) -> TaskDistributionConfig:
    """Sine tasks with phase over a full period, so the task-average function is zero."""
    return TaskDistributionConfig(kind="sine", phase=(0.0, 2 * math.pi), **overrides)


def classification_preset(**overrides) -> TaskDistributionConfig:
    return TaskDistributionConfig(kind="synthetic_classification", **overrides)


def class_pool(dist: TaskDistributionConfig) -> np.ndarray:
    """The fixed pool of unit-norm class prototypes, seeded by ``dist.seed``."""
    rng = np.random.default_rng([dist.seed, 0x9001])
    pool = rng.normal(size=(dist.class_pool, dist.feature_dim))
    return pool / np.linalg.norm(pool, axis=1, keepdims=True)


def sample_task(dist: TaskDistributionConfig, task_seed: int) -> Task:
    rng = np.random.default_rng(task_seed)
    if dist.kind == "sine":
        a = rng.uniform(*dist.amplitude)
        b = rng.uniform(*dist.frequency)
        c = rng.uniform(*dist.phase)
        return SineTask(float(a), float(b), float(c))
    labels = rng.choice(dist.class_pool, size=dist.class_count, replace=False)
    protos = class_pool(dist)[labels]
    return ClassificationTask(protos, dist.noise_sigma, tuple(int(i) for i in labels))


def sample_points(task: SineTask, n: int, x_range=(-5.0, 5.0), seed: int = 0,
                  with_labels: bool = True, xs: Sequence[float] | None = None,
                  label_noise: float = 0.0) -> list[Sample]:
    """Draw ``n`` points uniformly over ``x_range``; ``xs`` forces the inputs."""
    rng = np.random.default_rng(seed)
    if xs is None:
        if n < 1:
            raise StreamError("n must be >= 1")
        xs = rng.uniform(x_range[0], x_range[1], size=n)
    xs = np.asarray(xs, dtype=np.float64)
    ys = task(xs)
    if label_noise > 0:
        ys = ys + rng.normal(0.0, label_noise, size=ys.shape)
    return [Sample(np.array([x]), np.array([y]) if with_labels else None, with_labels)
            for x, y in zip(xs, ys)]


def sample_classification_batch(task: ClassificationTask, n: int, seed: int = 0,
                                per_class: int | None = None) -> list[Sample]:
    """Noisy prototype draws with local labels in ``[0, M)``.

    With ``per_class`` set, exactly that many samples per class are drawn (in
    shuffled order) instead of ``n`` uniformly-labelled ones.
    """
    rng = np.random.default_rng(seed)
    m = task.class_count
    if per_class is not None:
        labels = rng.permutation(np.repeat(np.arange(m), per_class))
    else:
        if n < 1:
            raise StreamError("n must be >= 1")
        labels = rng.integers(0, m, size=n)
    noise = rng.normal(0.0, 1.0, size=(labels.size, task.prototypes.shape[1]))
    inputs = task.prototypes[labels] + task.noise_sigma * noise
    return [Sample(x, int(y), True) for x, y in zip(inputs, labels)]


def client_stream(dist: TaskDistributionConfig, task: Task, n: int, seed: int) -> list[Sample]:
    """``n`` labelled samples for a task; for classification ``n`` counts shots per class."""
    if dist.kind == "sine":
        return sample_points(task, n, dist.x_range, seed, label_noise=dist.label_noise)
    return sample_classification_batch(task, 0, seed, per_class=n)


def split_support_query(samples: Sequence[Sample], support_size: int,
                        seed: int | None = None) -> SupportQuerySplit:
    """Shuffle (when ``seed`` is given) then cut off the first ``support_size`` samples."""
    if support_size < 0 or support_size > len(samples):
        raise StreamError(f"support_size {support_size} outside [0, {len(samples)}]")
    order = list(range(len(samples)))
    if seed is not None:
        order = list(np.random.default_rng(seed).permutation(len(samples)))
    picked = [samples[i] for i in order]
    return SupportQuerySplit(picked[:support_size], picked[support_size:])


def load_csv_stream(path, input_columns: Sequence[str],
                    label_column: str | None = None) -> list[Sample]:
    """Read samples in file order.

    The header must contain every input column (and the label column when one
    is named). Rows with a blank label become unlabelled samples.
    """
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("CSV file has no header row") from None
        header = [h.strip() for h in header]
        wanted = list(input_columns) + ([label_column] if label_column else [])
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"header lacks columns {missing}")
        cols = [header.index(c) for c in input_columns]
        label_at = header.index(label_column) if label_column else None
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"line {line}: expected {len(header)} columns, got {len(row)}")
            try:
                x = np.array([float(row[i]) for i in cols])
            except ValueError as exc:
                raise MalformedRowError(line, str(exc)) from None
            if label_at is None or row[label_at].strip() == "":
                samples.append(Sample(x, None, False))
                continue
            try:
                y = np.array([float(row[label_at])])
            except ValueError as exc:
                raise MalformedRowError(line, str(exc)) from None
            samples.append(Sample(x, y, True))
    return samples


def inputs_targets(samples: Sequence[Sample]):
    """Stack labelled samples into an input matrix and a target array."""
    xs = np.stack([s.input for s in samples])
    first = samples[0].target
    if isinstance(first, (int, np.integer)):
        ys = np.array([s.target for s in samples], dtype=np.int64)
    else:
        ys = np.stack([np.asarray(s.target, dtype=np.float64).reshape(-1) for s in samples])
    return xs, ys

