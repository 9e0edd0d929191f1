"""Command-line driver: ``annealprune {train,schedule,eval,compress,plot}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .data import DataFormatError
from .harness import evaluate, load_datasets, read_metrics_csv, run_experiment, target_layer
from .network import Network
from .pruning import ProtocolError, ScheduleError, schedule_table

PROG = "annealprune"
EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, getattr(args, "set", None))
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["out"] = args.out
    return cfg.replace(**changes).validate() if changes else cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.no_plots:
        cfg = cfg.replace(plots=False)
    result = run_experiment(cfg)
    out = result["out"]
    if cfg.plots:
        from .plotting import plot_accuracy, plot_nonzero
        label = cfg.regularizer if cfg.regularizer != "ap" else f"ap ({cfg.ap.mode})"
        plot_accuracy({f"{label}, mean of {cfg.repeats}": result["mean"]}, out / "accuracy.png")
        schedule = None
        if cfg.regularizer == "ap":
            schedule = schedule_table(cfg.ap, _target_size(cfg, result), cfg.epochs)
        plot_nonzero({label: result["mean"]}, out / "nonzero.png", schedule)
    last = result["mean"][-1]
    print(f"wrote {cfg.repeats} run(s) to {out}; final mean test accuracy {last.test_acc:.4f}, "
          f"nonzero fraction {last.nonzero_frac:.4f}")
    return 0


def _target_size(cfg, result) -> int:
    ckpt = checkpoint.read_checkpoint(result["out"] / "run_00.ckpt")
    layer = ckpt.extra["target_layer"]
    return sum(p.value.size for p in ckpt.params if p.layer == layer)


def _schedule_network(cfg: ExperimentConfig) -> Network:
    from .harness import build_network
    from .tensor import Rng
    classes = {"cifar10": 10, "mnist": 10}.get(cfg.dataset, cfg.synth_classes)
    return build_network(cfg, cfg.input_shape(), classes, Rng(cfg.seed))


def cmd_schedule(args) -> int:
    cfg = _config(args)
    if cfg.regularizer != "ap":
        raise UsageError(f"schedule needs regularizer.kind = ap, config has {cfg.regularizer!r}")
    net = _schedule_network(cfg)
    M = net.layer_param_count(target_layer(cfg, net))
    rows = schedule_table(cfg.ap, M, cfg.epochs)
    lines = ["epoch,i,M_e,fraction"] + [f"{e},{i},{m},{f!r}" for e, i, m, f in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "schedule.csv").write_text(text)
        if not args.no_plots:
            from .plotting import plot_schedule
            plot_schedule(rows, out / "schedule.png")
    sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    ckpt = checkpoint.read_checkpoint(args.checkpoint)
    net = ckpt.network()
    cfg = _config(args)
    _, test = load_datasets(cfg)
    if test.sample_shape != net.input_shape:
        raise ConfigError(f"checkpoint expects inputs {net.input_shape}, dataset has {test.sample_shape}")
    if test.classes != net.num_classes:
        raise ConfigError(f"checkpoint has {net.num_classes} classes, dataset has {test.classes}")
    acc, confusion = evaluate(net, test)
    print(f"accuracy={acc!r}")
    print(f"samples={len(test)}")
    print("confusion (rows: true class, columns: predicted class)")
    width = max(5, len(str(confusion.max())) + 1)
    print("true\\pred" + "".join(f"{c:>{width}}" for c in range(confusion.shape[1])))
    for i, row in enumerate(confusion):
        print(f"{i:>9}" + "".join(f"{v:>{width}}" for v in row))
    return 0


def cmd_compress(args) -> int:
    report = checkpoint.compression_report(checkpoint.read_checkpoint(args.checkpoint))
    if args.format in ("table", "both"):
        print(checkpoint.format_report_table(report))
    if args.format == "both":
        print()
    if args.format in ("kv", "both"):
        print(checkpoint.format_report_kv(report))
    return 0


def _run_label(run_dir: Path) -> str:
    cfg_path = run_dir / "config.cfg"
    if cfg_path.exists():
        cfg = load_config(cfg_path)
        return cfg.regularizer if cfg.regularizer != "ap" else f"ap ({cfg.ap.mode})"
    return run_dir.name


def cmd_plot(args) -> int:
    from .plotting import plot_accuracy, plot_nonzero
    curves = {}
    for d in args.runs:
        run_dir = Path(d)
        label = _run_label(run_dir)
        if label in curves:
            label = f"{label} [{run_dir.name}]"
        curves[label] = read_metrics_csv(run_dir / "mean.csv")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plot_accuracy(curves, out / "accuracy.png", args.title)
    plot_nonzero(curves, out / "nonzero.png")
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "epoch", "test_acc", "nonzero_frac"])
        for label, rows in curves.items():
            for r in rows:
                writer.writerow([label, r.epoch, repr(r.test_acc), repr(r.nonzero_frac)])
    print(f"wrote {out / 'accuracy.png'} and {out / 'nonzero.png'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Annealed pruning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p, seed=True, out=True):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="base seed (runs use seed, seed+1, ...)")
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train runs and write metrics CSVs, checkpoints and figures")
    config_flags(p)
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("schedule", help="print the annealing schedule without training")
    config_flags(p, seed=False)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("eval", help="accuracy and confusion counts of a checkpoint")
    p.add_argument("checkpoint")
    config_flags(p, out=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compress", help="parameter and storage report of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--format", choices=("table", "kv", "both"), default="both")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("plot", help="overlay mean curves of several train output directories")
    p.add_argument("runs", nargs="+", help="train output directories")
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (checkpoint.CheckpointError, DataFormatError, ScheduleError, ProtocolError,
            OSError, ValueError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
