"""Command line entry point: ``tinyfed <subcommand> [options]``.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a configuration
error. Every option is checked before any output file is opened.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiments, nncore
from .config import ConfigError, ExperimentConfig, load_config
from .fedmeta.protocols import format_rounds_csv

log = logging.getLogger("tinyfed")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _num(v) -> str:
    return repr(float(v)) if v is not None else ""


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_num(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def _emit(text: str, path) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)


def _check_writable(*paths) -> None:
    for path in paths:
        if path in (None, "-"):
            continue
        parent = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(parent):
            raise ConfigError(f"output directory does not exist: {parent}")


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set or ())


def cmd_meta_train(args) -> int:
    cfg = _config(args)
    rounds_path = args.rounds or cfg.rounds_path
    ckpt_path = args.checkpoint or cfg.checkpoint_path
    _check_writable(rounds_path, ckpt_path)
    announce = experiments.announce_stderr if cfg.transport == "tcp" else None
    run, fed = experiments.train(cfg, announce=announce)
    with open(rounds_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(format_rounds_csv(run.records))
    nncore.save_checkpoint(ckpt_path, experiments.final_params(fed, run.values), cfg.network)
    log.info("%s: %d rounds, %d scalars", cfg.protocol, len(run.records),
             run.state.ledger.total)
    return EXIT_OK


def cmd_finetune_eval(args) -> int:
    cfg = _config(args)
    d_sizes = tuple(int(d) for d in args.d_sizes.split(",")) if args.d_sizes else cfg.eval.d_sizes
    if not d_sizes or min(d_sizes) < 0:
        raise ConfigError("--d-sizes: need non-negative dataset sizes")
    trials = args.trials or cfg.eval.trials
    _check_writable(args.out)
    params, net = nncore.load_checkpoint(args.checkpoint, cfg.network.activation,
                                         cfg.network.output_head)
    if net.layer_sizes != cfg.network.layer_sizes:
        raise ConfigError(f"checkpoint layers {net.layer_sizes} do not match net.layers "
                          f"{cfg.network.layer_sizes}")
    rows = experiments.finetune_table(cfg, params, d_sizes, trials)
    _emit(_csv(("d", "mean", "std"), rows), args.out)
    if args.check_trend:
        by_d = {d: mean for d, mean, _ in rows}
        if 0 not in by_d or max(by_d) == 0:
            raise ConfigError("--check-trend needs D=0 and a larger D in the sweep")
        lo, hi = by_d[0], by_d[max(by_d)]
        better = hi < lo if cfg.task.kind == "sine" else hi > lo
        if not better:
            print(f"trend check failed: D={max(by_d)} mean {hi!r} vs D=0 mean {lo!r}",
                  file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_tinyol_demo(args) -> int:
    cfg = _config(args)
    if cfg.task.kind != "sine":
        raise ConfigError("task.kind: the TinyOL demo streams sine tasks")
    _check_writable(args.out)
    base = None
    if args.base:
        base, net = nncore.load_checkpoint(args.base, cfg.network.activation,
                                           cfg.network.output_head)
        if net.layer_sizes != cfg.network.layer_sizes:
            raise ConfigError(f"base checkpoint layers {net.layer_sizes} do not match "
                              f"net.layers {cfg.network.layer_sizes}")
    results = experiments.tinyol_demo(cfg, base=base)
    rows = []
    for t, res in enumerate(results):
        for i in range(len(res.frozen_losses)):
            rows.append((t, i, float(res.frozen_losses[i]), float(res.tinyol_losses[i]),
                         float(res.frozen_windowed[i]), float(res.tinyol_windowed[i])))
    _emit(_csv(("trial", "sample", "frozen_loss", "tinyol_loss", "frozen_window",
                "tinyol_window"), rows), args.out)
    wins = sum(r.final_ratio <= 0.7 for r in results)
    log.info("TinyOL final window <= 0.7x frozen in %d/%d trials", wins, len(results))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfgs = [load_config(path, args.set or ()) for path in args.configs]
    _check_writable(args.out)
    rows = experiments.compare(cfgs)
    _emit(_csv(("protocol", "cumulative_scalars", "eval_loss"), rows), args.out)
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = _config(args)
    _check_writable(args.out)
    rows = experiments.ablation(cfg)
    _emit(_csv(("setting", "protocol", "top_p", "schedule", "reconstruction", "metric",
                "scalars_per_round", "cost_ratio"), rows), args.out)
    return EXIT_OK


def cmd_serve_device(args) -> int:
    cfg = _config(args)
    rounds = experiments.serve_device(cfg, args.connect)
    log.info("device served %d rounds", rounds)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinyfed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, with_config=True):
        p = sub.add_parser(name, help=help_text)
        if with_config:
            p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.set_defaults(func=func)
        return p

    p = add("meta-train", cmd_meta_train, "train a meta-initialization, write rounds CSV")
    p.add_argument("--rounds", help="rounds CSV path (default from out.rounds)")
    p.add_argument("--checkpoint", help="checkpoint path (default from out.checkpoint)")

    p = add("finetune-eval", cmd_finetune_eval, "fine-tune a checkpoint over dataset sizes")
    p.add_argument("checkpoint")
    p.add_argument("--d-sizes", help="comma-separated dataset sizes (default eval.d_sizes)")
    p.add_argument("--trials", type=int, help="test tasks per size (default eval.trials)")
    p.add_argument("--check-trend", action="store_true",
                   help="exit 1 unless the largest D beats D=0")
    p.add_argument("--out", help="output CSV (default stdout)")

    p = add("tinyol-demo", cmd_tinyol_demo, "frozen base vs. online head under drift")
    p.add_argument("--base", help="base checkpoint (default: train a fresh base per trial)")
    p.add_argument("--out", help="output CSV (default stdout)")

    p = add("compare", cmd_compare, "loss vs. communicated scalars for several configs",
            with_config=False)
    p.add_argument("configs", nargs="+", help="one configuration file per protocol")
    p.add_argument("--out", help="output CSV (default stdout)")

    p = add("ablation", cmd_ablation, "sweep the TinyMetaFed strategy switches")
    p.add_argument("--out", help="output CSV (default stdout)")

    p = add("serve-device", cmd_serve_device, "run a device loop against a TCP server")
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports every failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
