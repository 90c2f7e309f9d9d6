"""Federated meta-learning protocols: FedSGD, batched Reptile, TinyReptile, TinyMetaFed.

The server side lives in :class:`Federation`; the device side in
:class:`ClientRuntime`. The two meet through a link object that either calls
the runtime in-process (:class:`DirectLink`) or talks to a device loop over a
transport (``tinyfed.netsim.RemoteLink``). Every value that crosses a link is
rounded to float32, the wire precision, so all links yield the same numbers.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import nncore, streams
from ..nncore import NetworkConfig, ParameterVector
from .schedule import CosineSchedule, cosine_annealing_lr
from .sparse import SparseUpdate, apply_sparse_update, select_top_p, selection_size

PROTOCOLS = ("fedsgd", "reptile", "tinyreptile", "tinymetafed")
PROTOCOL_IDS = {"fedsgd": 1, "reptile": 2, "tinyreptile": 3, "tinymetafed": 4}
PROTOCOL_NAMES = {v: k for k, v in PROTOCOL_IDS.items()}
LOCAL_INITS = ("zeros", "glorot")

# seed-derivation tags
_INIT, _TASK, _DATA, _SUPPORT, _LOCAL = 1, 2, 3, 4, 5


class ReconstructionError(ValueError):
    """Local weights cannot be rebuilt without support samples."""


def derive_seed(*parts: int) -> int:
    """Mix integers into an independent 64-bit seed."""
    lo, hi = np.random.SeedSequence([int(p) for p in parts]).generate_state(2)
    return int(lo) | (int(hi) << 32)


@dataclass(frozen=True)
class MetaConfig:
    server_lr: float = 0.1
    schedule: CosineSchedule = field(default_factory=CosineSchedule)
    use_schedule: bool = True
    device_lr: float = 0.02
    local_steps: int = 5
    rounds: int = 1000
    scalar_budget: int | None = None
    reptile_batch: int = 8
    client_batch_size: int | None = None
    top_p: float = 100.0
    local_layers: int = 1
    local_init: str = "zeros"
    points_per_device: int = 10
    support_size: int = 5
    query_size: int = 10
    record_losses: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.top_p <= 100:
            raise ValueError(f"top_p must lie in (0, 100], got {self.top_p}")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.reptile_batch < 1:
            raise ValueError("reptile_batch must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.device_lr < 0 or self.server_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.local_init not in LOCAL_INITS:
            raise ValueError(f"local_init must be one of {LOCAL_INITS}")
        if self.local_layers < 0:
            raise ValueError("local_layers must be >= 0")
        if self.support_size < 0 or self.query_size < 0 or self.points_per_device < 0:
            raise ValueError("data sizes must be non-negative")


@dataclass(frozen=True)
class GlobalLocalPartition:
    """Global weights are the leading block of the flat vector, local weights the tail."""

    n_params: int
    split: int

    @property
    def global_slice(self) -> slice:
        return slice(0, self.split)

    @property
    def local_slice(self) -> slice:
        return slice(self.split, self.n_params)

    @property
    def n_global(self) -> int:
        return self.split

    @property
    def n_local(self) -> int:
        return self.n_params - self.split

    @property
    def global_indices(self) -> np.ndarray:
        return np.arange(0, self.split)

    @property
    def local_indices(self) -> np.ndarray:
        return np.arange(self.split, self.n_params)

    def assemble(self, g: np.ndarray, l: np.ndarray) -> np.ndarray:
        out = np.empty(self.n_params, dtype=np.float64)
        out[self.global_slice] = g
        out[self.local_slice] = l
        return out


def partition_parameters(config: NetworkConfig, local_layers: int = 1) -> GlobalLocalPartition:
    """Make the last ``local_layers`` layers (weights and bias) local."""
    if local_layers < 0 or local_layers >= config.n_layers:
        raise ValueError(
            f"local_layers must lie in [0, {config.n_layers - 1}], got {local_layers}")
    if local_layers == 0:
        return GlobalLocalPartition(config.n_params, config.n_params)
    return GlobalLocalPartition(config.n_params, config.manifest[-local_layers].offset)


# --- device-side procedures ------------------------------------------------

def _stacked(config: NetworkConfig, samples: Sequence[streams.Sample]):
    xs, ys = streams.inputs_targets(samples)
    return xs, nncore._targets(config, ys, nncore.default_loss(config), xs.shape[0])


def online_sgd(values: np.ndarray, config: NetworkConfig, samples: Sequence[streams.Sample],
               lr: float, epochs: int, update: slice = slice(None),
               batch_size: int = 1) -> np.ndarray:
    """Epochs of in-order SGD over ``samples``, touching only ``values[update]``.

    Modifies ``values`` in place and returns it.
    """
    if not samples or epochs <= 0:
        return values
    loss = nncore.default_loss(config)
    xs, ts = _stacked(config, samples)
    n = xs.shape[0]
    batches = [(xs[i:i + batch_size], ts[i:i + batch_size]) for i in range(0, n, batch_size)]
    for _ in range(epochs):
        for xb, tb in batches:
            _, grad = nncore.loss_and_grad(values, config, xb, tb, loss)
            values[update] -= lr * grad[update]
    return values


def tinyreptile_client(phi: ParameterVector, config: NetworkConfig,
                       stream: Sequence[streams.Sample], lr: float, k: int) -> ParameterVector:
    """k passes of one-sample SGD over the device stream, starting from ``phi``."""
    if not stream:
        warnings.warn("empty client stream; returning the received weights unchanged")
        return phi.copy()
    values = np.array(phi.values, dtype=np.float64)
    return phi.with_values(online_sgd(values, config, stream, lr, k))


def reptile_client(phi: ParameterVector, config: NetworkConfig,
                   dataset: Sequence[streams.Sample], lr: float, k: int,
                   batch_size: int | None = None) -> ParameterVector:
    """Batch-mode local training over a stored dataset (the batched Reptile client)."""
    values = np.array(phi.values, dtype=np.float64)
    bs = batch_size or max(len(dataset), 1)
    return phi.with_values(online_sgd(values, config, dataset, lr, k, batch_size=bs))


def fedsgd_client(phi: ParameterVector, config: NetworkConfig,
                  dataset: Sequence[streams.Sample]) -> np.ndarray:
    """Mean gradient of the loss over the whole local dataset at ``phi``."""
    xs, ts = _stacked(config, dataset)
    _, grad = nncore.loss_and_grad(np.asarray(phi.values, dtype=np.float64), config, xs, ts,
                                   nncore.default_loss(config))
    return grad


def fresh_local(config: NetworkConfig, partition: GlobalLocalPartition, seed: int,
                kind: str = "zeros") -> np.ndarray:
    """Starting point for the local slice: zeros, or Glorot draws seeded by ``seed``."""
    if kind == "zeros":
        return np.zeros(partition.n_local)
    return nncore.init_network(config, seed).values[partition.local_slice].copy()


def reconstruct_local(g: np.ndarray, config: NetworkConfig, partition: GlobalLocalPartition,
                      support: Sequence[streams.Sample], lr: float, k: int,
                      seed: int, local_init: str = "zeros") -> np.ndarray:
    """Rebuild the local slice from the support set with the global slice frozen."""
    values = partition.assemble(g, fresh_local(config, partition, seed, local_init))
    if partition.n_local:
        if not support:
            raise ReconstructionError("local weights need a non-empty support set")
        online_sgd(values, config, support, lr, k, update=partition.local_slice)
    return values


def tinymetafed_client(g: np.ndarray, config: NetworkConfig, split: streams.SupportQuerySplit,
                       lr: float, k: int, partition: GlobalLocalPartition, seed: int,
                       return_full: bool = False, local_init: str = "zeros"):
    """Two-phase client update; returns the new global slice (dense).

    Phase one trains only the local slice on the support set; phase two trains
    only the global slice on the query set with the local slice frozen.
    """
    values = reconstruct_local(np.asarray(g, dtype=np.float64), config, partition,
                               split.support, lr, k, seed, local_init)
    online_sgd(values, config, split.query, lr, k, update=partition.global_slice)
    g_t = values[partition.global_slice].copy()
    return (g_t, values) if return_full else g_t


def server_interpolate(phi, phi_hat, rate: float) -> np.ndarray:
    phi = np.asarray(phi)
    phi_hat = np.asarray(phi_hat)
    if phi.shape != phi_hat.shape:
        raise ValueError("parameter vectors differ in length")
    if not 0.0 <= rate <= 1.0:
        warnings.warn(f"server rate {rate} outside [0, 1]")
    return phi + rate * (phi_hat.astype(phi.dtype) - phi)


class ClientRuntime:
    """Everything a device knows: network shape, data source, and protocol settings."""

    def __init__(self, config: NetworkConfig, dist: streams.TaskDistributionConfig,
                 meta: MetaConfig):
        self.config = config
        self.dist = dist
        self.meta = meta
        self._partition = None

    @property
    def partition(self) -> GlobalLocalPartition:
        # built on first use: only TinyMetaFed needs a valid global/local split
        if self._partition is None:
            self._partition = partition_parameters(self.config, self.meta.local_layers)
        return self._partition

    def task(self, task_seed: int):
        return streams.sample_task(self.dist, task_seed)

    def _draw(self, task, n: int, seed: int) -> list:
        return streams.client_stream(self.dist, task, n, seed) if n > 0 else []

    def dataset(self, task_seed: int) -> list:
        return self._draw(self.task(task_seed), self.meta.points_per_device,
                          derive_seed(task_seed, _DATA))

    def split(self, task_seed: int) -> streams.SupportQuerySplit:
        # support and query are independent draws; the query set uses the same
        # seed as the plain dataset so an empty partition reduces to TinyReptile
        task = self.task(task_seed)
        return streams.SupportQuerySplit(
            self._draw(task, self.meta.support_size, derive_seed(task_seed, _SUPPORT)),
            self._draw(task, self.meta.query_size, derive_seed(task_seed, _DATA)))

    def local_seed(self, task_seed: int) -> int:
        return derive_seed(task_seed, _LOCAL)

    def handle(self, protocol: str, round: int, task_seed: int, received: np.ndarray):
        """Run one client round on wire-precision weights; return the wire reply."""
        m = self.meta
        start = np.asarray(received, dtype=np.float32).astype(np.float64)
        if protocol == "tinymetafed":
            g_t = tinymetafed_client(start, self.config, self.split(task_seed), m.device_lr,
                                     m.local_steps, self.partition, self.local_seed(task_seed),
                                     local_init=m.local_init)
            return select_top_p(start, g_t, m.top_p, round)
        phi = ParameterVector(start, self.config.manifest)
        data = self.dataset(task_seed)
        if protocol == "tinyreptile":
            out = tinyreptile_client(phi, self.config, data, m.device_lr, m.local_steps).values
        elif protocol == "reptile":
            out = reptile_client(phi, self.config, data, m.device_lr, m.local_steps,
                                 m.client_batch_size).values
        elif protocol == "fedsgd":
            out = fedsgd_client(phi, self.config, data)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
        return out.astype(np.float32)


@dataclass
class Exchange:
    reply: object
    scalars_down: int
    scalars_up: int


def reply_scalars(reply) -> int:
    return 2 * len(reply) if isinstance(reply, SparseUpdate) else int(np.asarray(reply).size)


class DirectLink:
    """In-process link: calls the client runtime directly."""

    def __init__(self, runtime: ClientRuntime):
        self.runtime = runtime

    def exchange(self, protocol: str, round: int, task_seed: int, down: np.ndarray) -> Exchange:
        wire = np.asarray(down, dtype=np.float32)
        reply = self.runtime.handle(protocol, round, task_seed, wire)
        return Exchange(reply, wire.size, reply_scalars(reply))

    def close(self):
        pass


# --- server side -------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    protocol: str
    task_id: int
    lr: float
    pre_loss: float
    post_loss: float
    accuracy: float | None
    scalars_down: int
    scalars_up: int
    cumulative_scalars: int


@dataclass
class CommunicationLedger:
    down: int = 0
    up: int = 0
    per_round: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.down + self.up

    def add(self, down: int, up: int) -> int:
        self.down += down
        self.up += up
        self.per_round.append((down, up))
        return self.total


@dataclass
class ServerState:
    values: np.ndarray
    round: int = 0
    ledger: CommunicationLedger = field(default_factory=CommunicationLedger)


@dataclass
class TrainingRun:
    protocol: str
    state: ServerState
    records: list
    evaluations: list

    @property
    def values(self) -> np.ndarray:
        return self.state.values


def round_cost(protocol: str, config: NetworkConfig, meta: MetaConfig) -> int:
    """Scalars crossing the link in one round."""
    n = config.n_params
    if protocol == "tinyreptile":
        return 2 * n
    if protocol in ("reptile", "fedsgd"):
        return 2 * n * meta.reptile_batch
    g = partition_parameters(config, meta.local_layers).n_global
    return g + 2 * selection_size(g, meta.top_p)


def rounds_for_budget(protocol: str, config: NetworkConfig, meta: MetaConfig,
                      budget: int) -> int:
    return budget // round_cost(protocol, config, meta)


def _mean_eval(config: NetworkConfig, values: np.ndarray, samples) -> tuple[float, float | None]:
    if not samples:
        return math.nan, None
    xs, ts = _stacked(config, samples)
    loss, _ = nncore.loss_and_grad(values, config, xs, ts, nncore.default_loss(config))
    acc = None
    if config.output_head == "softmax":
        pred = np.argmax(nncore.forward(ParameterVector(values, config.manifest), config, xs), 1)
        acc = float(np.mean(pred == ts))
    return loss, acc


class Federation:
    """Server-side round logic for one protocol."""

    def __init__(self, protocol: str, config: NetworkConfig, dist: streams.TaskDistributionConfig,
                 meta: MetaConfig, link=None):
        if protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {protocol!r}")
        self.protocol = protocol
        self.config = config
        self.dist = dist
        self.meta = meta
        self.runtime = ClientRuntime(config, dist, meta)
        self.link = link or DirectLink(self.runtime)

    @property
    def partition(self) -> GlobalLocalPartition:
        return self.runtime.partition

    def initial_state(self) -> ServerState:
        phi = nncore.init_network(self.config, derive_seed(self.meta.seed, _INIT)).values
        if self.protocol == "tinymetafed":
            phi = phi[self.partition.global_slice].copy()
        return ServerState(phi)

    def task_seed(self, round: int, client: int = 0) -> int:
        return derive_seed(self.meta.seed, _TASK, round, client)

    def server_lr(self, round: int) -> float:
        if self.protocol == "tinymetafed" and self.meta.use_schedule:
            return cosine_annealing_lr(round, self.meta.schedule)
        return self.meta.server_lr

    def full_params(self, values: np.ndarray, seed: int | None = None) -> np.ndarray:
        """Expand a server state to a full parameter vector (fresh local slice if needed)."""
        if self.protocol != "tinymetafed":
            return values
        seed = derive_seed(self.meta.seed, _LOCAL) if seed is None else seed
        local = fresh_local(self.config, self.partition, seed, self.meta.local_init)
        return self.partition.assemble(values, local)

    def _record(self, state, task_id, lr, pre, post, acc, down, up) -> RoundRecord:
        total = state.ledger.add(down, up)
        return RoundRecord(state.round, self.protocol, task_id, lr, pre, post, acc,
                           down, up, total)

    def _dense_losses(self, before, after, seeds):
        if not self.meta.record_losses:
            return math.nan, math.nan, None
        pre, post, accs = [], [], []
        for s in seeds:
            data = self.runtime.dataset(s)
            pre.append(_mean_eval(self.config, before, data)[0])
            loss, acc = _mean_eval(self.config, after, data)
            post.append(loss)
            accs.append(acc)
        acc = None if accs[0] is None else float(np.mean(accs))
        return float(np.mean(pre)), float(np.mean(post)), acc

    def tinyreptile_round(self, state: ServerState) -> tuple[ServerState, RoundRecord]:
        i = state.round
        seed = self.task_seed(i)
        lr = self.server_lr(i)
        ex = self.link.exchange("tinyreptile", i, seed, state.values)
        new = server_interpolate(state.values, np.asarray(ex.reply, dtype=np.float64), lr)
        pre, post, acc = self._dense_losses(state.values, new, [seed])
        rec = self._record(state, seed, lr, pre, post, acc, ex.scalars_down, ex.scalars_up)
        return ServerState(new, i + 1, state.ledger), rec

    def reptile_round(self, state: ServerState) -> tuple[ServerState, RoundRecord]:
        i, n = state.round, self.meta.reptile_batch
        lr = self.server_lr(i)
        seeds = [self.task_seed(i, j) for j in range(n)]
        deltas, down, up = [], 0, 0
        for s in seeds:
            ex = self.link.exchange("reptile", i, s, state.values)
            deltas.append(np.asarray(ex.reply, dtype=np.float64) - state.values)
            down += ex.scalars_down
            up += ex.scalars_up
        new = state.values + lr * np.mean(np.stack(deltas), axis=0)
        pre, post, acc = self._dense_losses(state.values, new, seeds)
        rec = self._record(state, seeds[0], lr, pre, post, acc, down, up)
        return ServerState(new, i + 1, state.ledger), rec

    def fedsgd_round(self, state: ServerState) -> tuple[ServerState, RoundRecord]:
        i, n = state.round, self.meta.reptile_batch
        lr = self.server_lr(i)
        seeds = [self.task_seed(i, j) for j in range(n)]
        grads, down, up = [], 0, 0
        for s in seeds:
            ex = self.link.exchange("fedsgd", i, s, state.values)
            grads.append(np.asarray(ex.reply, dtype=np.float64))
            down += ex.scalars_down
            up += ex.scalars_up
        new = state.values - lr * np.mean(np.stack(grads), axis=0)
        pre, post, acc = self._dense_losses(state.values, new, seeds)
        rec = self._record(state, seeds[0], lr, pre, post, acc, down, up)
        return ServerState(new, i + 1, state.ledger), rec

    def tinymetafed_round(self, state: ServerState) -> tuple[ServerState, RoundRecord]:
        i = state.round
        seed = self.task_seed(i)
        lr = self.server_lr(i)
        ex = self.link.exchange("tinymetafed", i, seed, state.values)
        new = apply_sparse_update(state.values, ex.reply, lr)
        pre = post = math.nan
        acc = None
        if self.meta.record_losses:
            rt, m = self.runtime, self.meta
            split = rt.split(seed)
            wire_g = state.values.astype(np.float32).astype(np.float64)
            full = reconstruct_local(wire_g, self.config, self.partition, split.support,
                                     m.device_lr, m.local_steps, rt.local_seed(seed),
                                     m.local_init)
            local = full[self.partition.local_slice]
            pre = _mean_eval(self.config, self.partition.assemble(state.values, local),
                             split.query)[0]
            post, acc = _mean_eval(self.config, self.partition.assemble(new, local), split.query)
        rec = self._record(state, seed, lr, pre, post, acc, ex.scalars_down, ex.scalars_up)
        return ServerState(new, i + 1, state.ledger), rec

    def step(self, state: ServerState) -> tuple[ServerState, RoundRecord]:
        return getattr(self, f"{self.protocol}_round")(state)

    def planned_rounds(self) -> int:
        if self.meta.scalar_budget is not None:
            return rounds_for_budget(self.protocol, self.config, self.meta,
                                     self.meta.scalar_budget)
        return self.meta.rounds

    def run(self, rounds: int | None = None, state: ServerState | None = None,
            eval_every: int | None = None,
            evaluator: Callable[[np.ndarray], float] | None = None) -> TrainingRun:
        """Run rounds; with an evaluator, score the server state every ``eval_every`` rounds.

        Evaluations are ``(round, cumulative_scalars, value)`` tuples, starting
        with the untrained state.
        """
        rounds = self.planned_rounds() if rounds is None else rounds
        state = state or self.initial_state()
        records, evals = [], []

        def evaluate():
            evals.append((state.round, state.ledger.total, evaluator(state.values)))

        if evaluator is not None and eval_every:
            evaluate()
        for _ in range(rounds):
            state, rec = self.step(state)
            records.append(rec)
            if evaluator is not None and eval_every and state.round % eval_every == 0:
                evaluate()
        return TrainingRun(self.protocol, state, records, evals)


ROUND_COLUMNS = ("round", "protocol", "task_id", "lr", "pre_loss", "post_loss", "accuracy",
                 "scalars_down", "scalars_up", "cumulative_scalars")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_rounds_csv(records: Sequence[RoundRecord]) -> str:
    lines = [",".join(ROUND_COLUMNS)]
    for r in records:
        lines.append(",".join(_fmt(getattr(r, c)) for c in ROUND_COLUMNS))
    return "\n".join(lines) + "\n"


def write_rounds_csv(path, records: Sequence[RoundRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(format_rounds_csv(records))

