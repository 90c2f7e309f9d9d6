"""Experiment recipes shared by the CLI and the acceptance suite."""
from __future__ import annotations

import contextlib
import sys
import threading
from dataclasses import replace

import numpy as np

from . import netsim, tinyol
from .config import ConfigError, ExperimentConfig
from .fedmeta.evaluation import meta_test
from .fedmeta.protocols import ClientRuntime, Federation, round_cost
from .nncore import ParameterVector
from .netsim.transport import TcpListener, parse_address


@contextlib.contextmanager
def open_link(cfg: ExperimentConfig, announce=None):
    """Yield a server-side link to ``cfg.devices`` device loops over the configured transport."""
    runtime = ClientRuntime(cfg.network, cfg.task, cfg.meta)
    if cfg.transport == "loopback":
        ends, threads = [], []
        for _ in range(cfg.devices):
            server_end, device_end = netsim.loopback_transport(cfg.seed)
            t = threading.Thread(target=netsim.run_device_loop, args=(device_end, runtime),
                                 daemon=True)
            t.start()
            ends.append(server_end)
            threads.append(t)
        link = netsim.RemoteLink(ends)
        try:
            yield link
        finally:
            link.close()
            for t in threads:
                t.join(timeout=10)
        return
    listener = TcpListener(*parse_address(cfg.listen))
    try:
        host, port = listener.address
        if announce:
            announce(f"{host}:{port}")
        ends = [listener.accept(timeout=60) for _ in range(cfg.devices)]
    finally:
        listener.close()
    link = netsim.RemoteLink(ends)
    try:
        yield link
    finally:
        link.close()


def federation(cfg: ExperimentConfig, link=None) -> Federation:
    return Federation(cfg.protocol, cfg.network, cfg.task, cfg.meta, link)


def evaluator(cfg: ExperimentConfig, fed: Federation):
    """Median post-adaptation loss over ``cfg.eval.trials`` held-out tasks."""
    partition = fed.partition if cfg.protocol == "tinymetafed" else None

    def score(values):
        return meta_test(values, cfg.network, cfg.task, cfg.eval.points, cfg.eval.epochs,
                         cfg.eval.size, cfg.eval.trials, cfg.eval.seed, cfg.eval.lr,
                         partition, cfg.meta.local_init).median_loss
    return score


def train(cfg: ExperimentConfig, with_eval: bool = False, link=None, announce=None):
    """Run the configured protocol; returns (run, federation)."""
    if link is None:
        with open_link(cfg, announce) as own:
            return train(cfg, with_eval, own)
    fed = federation(cfg, link)
    if with_eval:
        run = fed.run(eval_every=cfg.eval.every, evaluator=evaluator(cfg, fed))
    else:
        run = fed.run()
    return run, fed


def final_params(fed: Federation, values: np.ndarray) -> ParameterVector:
    return ParameterVector(fed.full_params(values), fed.config.manifest)


def finetune_table(cfg: ExperimentConfig, params: ParameterVector, d_sizes, trials: int):
    """Rows of (D, mean, std): accuracy for classification, MSE for regression."""
    rows = []
    for d in d_sizes:
        rep = meta_test(params.values, cfg.network, cfg.task, d, cfg.eval.epochs, cfg.eval.size,
                        trials, cfg.eval.seed, cfg.eval.lr)
        if cfg.task.kind == "sine":
            rows.append((d, rep.mean_loss, rep.std_loss))
        else:
            rows.append((d, rep.mean_accuracy, rep.std_accuracy))
    return rows


def tinyol_demo(cfg: ExperimentConfig, trials: int | None = None, base=None, learning_rate=None):
    """Per-sample losses of the frozen and TinyOL arms for each seeded trial."""
    if cfg.task.kind != "sine":
        raise ConfigError("task.kind: the TinyOL demo streams sine tasks")
    d = cfg.demo
    drift = tinyol.DriftSpec(d.amplitude_drift, d.phase_drift)
    lr = d.lr if learning_rate is None else learning_rate
    results = []
    for t in range(d.trials if trials is None else trials):
        results.append(tinyol.drift_trial(cfg.seed + t, drift=drift,
                                          stream_length=d.stream_length, learning_rate=lr,
                                          window=d.window, dist=cfg.task, config=cfg.network,
                                          base=base))
    return results


def _same_setup(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    return a.task == b.task and a.network == b.network


def compare(cfgs):
    """Loss-vs-communication series for several protocols on one task family."""
    first = cfgs[0]
    for other in cfgs[1:]:
        if not _same_setup(first, other):
            raise ConfigError("compare: configurations use different task distributions "
                              "or networks")
    rows = []
    for cfg in cfgs:
        run, _ = train(cfg, with_eval=True)
        rows += [(cfg.protocol, total, value) for _, total, value in run.evaluations]
    return rows


ABLATION_SETTINGS = (
    ("tinyreptile", "tinyreptile", dict(top_p=100.0, use_schedule=False)),
    ("reconstruction", "tinymetafed", dict(top_p=100.0, use_schedule=False)),
    ("reconstruction+schedule", "tinymetafed", dict(top_p=100.0, use_schedule=True)),
    ("p75", "tinymetafed", dict(top_p=75.0, use_schedule=True)),
    ("p50", "tinymetafed", dict(top_p=50.0, use_schedule=True)),
)


def ablation(cfg: ExperimentConfig):
    """Final metric and exact per-round cost for each strategy combination.

    Every setting runs the same number of rounds; cost ratios are relative to
    the first (dense TinyReptile) row.
    """
    rows, baseline = [], None
    for name, protocol, changes in ABLATION_SETTINGS:
        sub = replace(cfg, protocol=protocol, meta=replace(cfg.meta, **changes))
        run, fed = train(sub)
        cost = round_cost(protocol, sub.network, sub.meta)
        baseline = baseline or cost
        partition = fed.partition if protocol == "tinymetafed" else None
        rep = meta_test(run.values, sub.network, sub.task, sub.eval.points, sub.eval.epochs,
                        sub.eval.size, sub.eval.trials, sub.eval.seed, sub.eval.lr, partition,
                        sub.meta.local_init)
        metric = rep.median_loss if cfg.task.kind == "sine" else rep.mean_accuracy
        rows.append((name, protocol, changes["top_p"], changes["use_schedule"],
                     protocol == "tinymetafed", metric, cost, cost / baseline))
    return rows


def serve_device(cfg: ExperimentConfig, address: str) -> int:
    runtime = ClientRuntime(cfg.network, cfg.task, cfg.meta)
    endpoint = netsim.tcp_connect(address)
    try:
        return netsim.run_device_loop(endpoint, runtime)
    finally:
        endpoint.close()


def announce_stderr(address: str) -> None:
    print(f"listening on {address}", file=sys.stderr, flush=True)
