"""Experiment configuration: flat ``section.key = value`` text files.

Blank lines and ``#`` comments are ignored. Later assignments win, so command
line overrides are simply appended.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

from .fedmeta.protocols import LOCAL_INITS, PROTOCOLS, MetaConfig
from .fedmeta.schedule import CosineSchedule
from .nncore import NetworkConfig
from .streams import TaskDistributionConfig

SEED_ENV = "TINYFED_SEED"
TRANSPORTS = ("loopback", "tcp")


class ConfigError(ValueError):
    pass


def _floats(n):
    def parse(text):
        parts = [float(p) for p in text.split(",")]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return tuple(parts)
    return parse


def _ints(text):
    return tuple(int(p) for p in text.split(",") if p.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _optional_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


def _expression_int(text):
    # allows 5e6 or 5_000_000 for budgets
    value = float(text.replace("_", ""))
    if not value.is_integer():
        raise ValueError("expected an integer")
    return int(value)


KEYS = {
    "protocol": _choice(PROTOCOLS),
    "seed": int,
    "transport": _choice(TRANSPORTS),
    "listen": str,
    "devices": int,
    "out.rounds": str,
    "out.checkpoint": str,
    "net.layers": _ints,
    "net.activation": _choice(("tanh", "relu")),
    "net.head": _choice(("linear", "softmax")),
    "task.kind": _choice(("sine", "synthetic_classification")),
    "task.amplitude": _floats(2),
    "task.frequency": _floats(2),
    "task.phase": _floats(2),
    "task.x_range": _floats(2),
    "task.classes": int,
    "task.feature_dim": int,
    "task.noise_sigma": float,
    "task.class_pool": int,
    "task.label_noise": float,
    "task.seed": int,
    "meta.server_lr": float,
    "meta.device_lr": float,
    "meta.local_steps": int,
    "meta.rounds": int,
    "meta.scalar_budget": lambda t: None if t.strip().lower() in ("", "none") else _expression_int(t),
    "meta.reptile_batch": int,
    "meta.client_batch_size": _optional_int,
    "meta.top_p": float,
    "meta.local_layers": int,
    "meta.local_init": _choice(LOCAL_INITS),
    "meta.points": int,
    "meta.support": int,
    "meta.query": int,
    "meta.use_schedule": _bool,
    "meta.record_losses": _bool,
    "schedule.lr_min": float,
    "schedule.lr_max": float,
    "schedule.period": int,
    "schedule.decay": float,
    "eval.points": int,
    "eval.epochs": int,
    "eval.size": int,
    "eval.trials": int,
    "eval.every": int,
    "eval.lr": float,
    "eval.d_sizes": _ints,
    "eval.seed": int,
    "demo.stream_length": int,
    "demo.amplitude_drift": float,
    "demo.phase_drift": float,
    "demo.lr": float,
    "demo.window": int,
    "demo.trials": int,
}


@dataclass(frozen=True)
class EvalSettings:
    points: int = 8
    epochs: int = 4
    size: int = 100
    trials: int = 20
    every: int = 100
    lr: float = 0.02
    d_sizes: tuple[int, ...] = (0, 1, 2, 4, 8)
    seed: int = 1


@dataclass(frozen=True)
class DemoSettings:
    stream_length: int = 1000
    amplitude_drift: float = 0.2
    phase_drift: float = 0.5
    lr: float = 0.01
    window: int = 50
    trials: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "tinyreptile"
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig((1, 32, 32, 1)))
    task: TaskDistributionConfig = field(default_factory=TaskDistributionConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    transport: str = "loopback"
    listen: str = "127.0.0.1:0"
    devices: int = 1
    rounds_path: str = "rounds.csv"
    checkpoint_path: str = "model.tnfd"
    eval: EvalSettings = field(default_factory=EvalSettings)
    demo: DemoSettings = field(default_factory=DemoSettings)
    seed: int = 0


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key = value")
        raw[key.strip()] = value.strip()
    return raw


def read_config_file(path) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_lines(fh, str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def _typed(raw: dict[str, str]) -> dict[str, object]:
    out = {}
    for key, text in raw.items():
        if key not in KEYS:
            raise ConfigError(f"{key}: unknown configuration key")
        try:
            out[key] = KEYS[key](text)
        except ValueError as exc:
            raise ConfigError(f"{key}: invalid value {text!r} ({exc})") from None
    return out


def _defaults_for(kind: str) -> dict[str, object]:
    if kind == "synthetic_classification":
        return {"net.activation": "relu", "net.head": "softmax", "meta.local_steps": 1,
                "meta.points": 5, "meta.support": 2, "meta.query": 5, "eval.epochs": 5}
    return {}


def build_config(raw: dict[str, str], env=None) -> ExperimentConfig:
    """Turn raw key/value pairs into a validated :class:`ExperimentConfig`."""
    env = os.environ if env is None else env
    v = _typed(raw)
    kind = v.get("task.kind", "sine")
    v = {**_defaults_for(kind), **v}
    if SEED_ENV in env:
        try:
            v["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: not an integer: {env[SEED_ENV]!r}") from None

    def get(key, default):
        return v.get(key, default)

    try:
        task = TaskDistributionConfig(
            kind=kind,
            amplitude=get("task.amplitude", (0.1, 5.0)),
            frequency=get("task.frequency", (0.8, 1.2)),
            phase=get("task.phase", (0.0, math.pi)),
            x_range=get("task.x_range", (-5.0, 5.0)),
            class_count=get("task.classes", 5),
            feature_dim=get("task.feature_dim", 16),
            noise_sigma=get("task.noise_sigma", 0.3),
            class_pool=get("task.class_pool", 50),
            label_noise=get("task.label_noise", 0.0),
            seed=get("task.seed", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from None

    default_layers = (1, 32, 32, 1) if kind == "sine" else (task.feature_dim, 32, task.class_count)
    try:
        net = NetworkConfig(get("net.layers", default_layers),
                            get("net.activation", "tanh"), get("net.head", "linear"))
    except ValueError as exc:
        raise ConfigError(f"net: {exc}") from None
    if net.input_dim != task.input_dim:
        raise ConfigError(f"net.layers: input width {net.input_dim} does not match "
                          f"task input width {task.input_dim}")
    if net.output_dim != task.output_dim:
        raise ConfigError(f"net.layers: output width {net.output_dim} does not match "
                          f"task output width {task.output_dim}")
    want_head = "linear" if kind == "sine" else "softmax"
    if net.output_head != want_head:
        raise ConfigError(f"net.head: {kind} tasks need a {want_head} output head")

    try:
        sched = CosineSchedule(get("schedule.lr_min", 0.001), get("schedule.lr_max", 0.5),
                               get("schedule.period", 500), get("schedule.decay", 0.1))
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    seed = get("seed", 0)
    try:
        meta = MetaConfig(
            server_lr=get("meta.server_lr", 0.1), schedule=sched,
            use_schedule=get("meta.use_schedule", True), device_lr=get("meta.device_lr", 0.02),
            local_steps=get("meta.local_steps", 5), rounds=get("meta.rounds", 1000),
            scalar_budget=get("meta.scalar_budget", None),
            reptile_batch=get("meta.reptile_batch", 8),
            client_batch_size=get("meta.client_batch_size", None),
            top_p=get("meta.top_p", 100.0), local_layers=get("meta.local_layers", 1),
            local_init=get("meta.local_init", "zeros"), points_per_device=get("meta.points", 10),
            support_size=get("meta.support", 5), query_size=get("meta.query", 10),
            record_losses=get("meta.record_losses", True), seed=seed)
    except ValueError as exc:
        raise ConfigError(f"meta: {exc}") from None
    if meta.local_layers >= net.n_layers:
        raise ConfigError(f"meta.local_layers: must be below the layer count {net.n_layers}")

    eval_kw = {f.name: v[f"eval.{f.name}"] for f in fields(EvalSettings) if f"eval.{f.name}" in v}
    demo_kw = {f.name: v[f"demo.{f.name}"] for f in fields(DemoSettings) if f"demo.{f.name}" in v}
    cfg = ExperimentConfig(
        protocol=get("protocol", "tinyreptile"), network=net, task=task, meta=meta,
        transport=get("transport", "loopback"), listen=get("listen", "127.0.0.1:0"),
        devices=get("devices", 1), rounds_path=get("out.rounds", "rounds.csv"),
        checkpoint_path=get("out.checkpoint", "model.tnfd"),
        eval=EvalSettings(**eval_kw), demo=DemoSettings(**demo_kw), seed=seed)
    if cfg.devices < 1:
        raise ConfigError("devices: need at least one device")
    if cfg.eval.every < 1 or cfg.eval.trials < 1:
        raise ConfigError("eval: every and trials must be >= 1")
    return cfg


def load_config(path=None, overrides=(), env=None) -> ExperimentConfig:
    raw = read_config_file(path) if path else {}
    raw.update(parse_lines(overrides, "<override>"))
    return build_config(raw, env)
