"""Meta-testing: adapt an initialization to fresh tasks and score it."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import nncore, streams
from ..nncore import NetworkConfig, ParameterVector
from .protocols import (GlobalLocalPartition, _stacked, derive_seed, fresh_local, online_sgd)

_TEST = 0x7E57


@dataclass
class MetaTestReport:
    dataset_size: int
    losses: np.ndarray
    accuracies: np.ndarray | None

    @property
    def mean_loss(self) -> float:
        return float(self.losses.mean())

    @property
    def std_loss(self) -> float:
        return float(self.losses.std())

    @property
    def median_loss(self) -> float:
        return float(np.median(self.losses))

    @property
    def mean_accuracy(self) -> float:
        return math.nan if self.accuracies is None else float(self.accuracies.mean())

    @property
    def std_accuracy(self) -> float:
        return math.nan if self.accuracies is None else float(self.accuracies.std())


def heldout_task_seed(seed: int, trial: int) -> int:
    return derive_seed(seed, _TEST, trial)


def evaluation_set(dist: streams.TaskDistributionConfig, task, size: int, seed: int):
    """Held-out data: an even grid over the input range for sine, fresh draws otherwise."""
    if dist.kind == "sine":
        xs = np.linspace(dist.x_range[0], dist.x_range[1], size)
        return streams.sample_points(task, size, xs=xs)
    return streams.sample_classification_batch(task, size, derive_seed(seed, 2))


def adapt(values: np.ndarray, config: NetworkConfig, data, lr: float, epochs: int,
          partition: GlobalLocalPartition | None = None) -> np.ndarray:
    """Fine-tune a copy of ``values`` with online SGD.

    With a partition, the first half of the epochs rebuild the local slice
    alone (global frozen) and the rest train every weight, so the step count
    matches plain fine-tuning.
    """
    values = np.array(values, dtype=np.float64)
    if partition is None or partition.n_local == 0:
        return online_sgd(values, config, data, lr, epochs)
    local_epochs = (epochs + 1) // 2
    online_sgd(values, config, data, lr, local_epochs, update=partition.local_slice)
    return online_sgd(values, config, data, lr, epochs - local_epochs)


def meta_test(init: np.ndarray, config: NetworkConfig, dist: streams.TaskDistributionConfig,
              dataset_size: int, finetune_epochs: int, eval_size: int = 100, trials: int = 20,
              seed: int = 0, lr: float = 0.02,
              partition: GlobalLocalPartition | None = None,
              local_init: str = "zeros") -> MetaTestReport:
    """Fine-tune on ``dataset_size`` labelled samples per fresh task, then evaluate.

    ``dataset_size`` counts points for sine tasks and shots per class for
    classification. ``init`` is a full parameter vector, or just the global
    slice when ``partition`` is given (the local slice is then freshly
    initialized per trial, as ``local_init`` says). Each trial runs ``finetune_epochs`` passes over
    the fine-tuning data; zero data or zero epochs is zero-shot evaluation.
    """
    losses, accs = [], []
    loss_kind = nncore.default_loss(config)
    for t in range(trials):
        task_seed = heldout_task_seed(seed, t)
        task = streams.sample_task(dist, task_seed)
        if partition is not None and np.size(init) == partition.n_global:
            local = fresh_local(config, partition, derive_seed(task_seed, 1), local_init)
            start = partition.assemble(init, local)
        else:
            start = np.array(init, dtype=np.float64)
        data = (streams.client_stream(dist, task, dataset_size, derive_seed(task_seed, 3))
                if dataset_size > 0 else [])
        tuned = adapt(start, config, data, lr, finetune_epochs, partition)
        held = evaluation_set(dist, task, eval_size, task_seed)
        xs, ts = _stacked(config, held)
        loss, _ = nncore.loss_and_grad(tuned, config, xs, ts, loss_kind)
        losses.append(loss)
        if config.output_head == "softmax":
            pred = np.argmax(nncore.forward(ParameterVector(tuned, config.manifest), config, xs), 1)
            accs.append(float(np.mean(pred == ts)))
    return MetaTestReport(dataset_size, np.array(losses),
                          np.array(accs) if accs else None)


def meta_objective_estimate(init: np.ndarray, config: NetworkConfig,
                            dist: streams.TaskDistributionConfig, sample_tasks: int, k: int,
                            lr: float, dataset_size: int = 10, eval_size: int = 100,
                            seed: int = 0, partition: GlobalLocalPartition | None = None) -> float:
    """Monte-Carlo mean of post-adaptation loss: a practical stand-in for the
    expected distance to each task's optimum, which is never observable."""
    return meta_test(init, config, dist, dataset_size, k, eval_size, sample_tasks, seed, lr,
                     partition).mean_loss
