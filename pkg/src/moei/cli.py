"""Command-line front end.

    moei pretrain      pretrain a GI backbone and save it
    moei train         adapt with one method
    moei ablate        every method of the ablation grid, over one or more seeds
    moei sweep-replay  GI retention / EI metrics against replay-set size
    moei route-stats   mean gate values of a trained checkpoint
    moei eval          score a checkpoint on every task family
    moei plot          render charts from exported CSVs

Config keys come from ``--config FILE`` and are overridden by ``--<key> value``
flags. Exit status: 0 ok, 1 usage, 2 validation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

from . import __version__
from .backbone import Backbone
from .bench.experiment import (
    ForgettingReport,
    build_bench,
    pretrain_backbone,
    replay_size_sweep,
    router_stats,
    run_experiment,
    run_method,
    score_all,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import VALID_KEYS, RunConfig, config_dict, parse_config, parse_overrides, render_config
from .errors import ConfigError, MoEIError
from .export import (
    atomic_write_text,
    write_ablation_csv,
    write_report_csv,
    write_report_json,
    write_router_csv,
    write_router_json,
    write_sweep_csv,
)
from .training import METHODS, canonical_method

logger = logging.getLogger("moei")

EXIT_OK, EXIT_USAGE = 0, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _method_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moei", description=__doc__.split("\n\n")[0],
                     epilog="Config keys (use as --key value): " + ", ".join(VALID_KEYS), allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"moei {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False,
                           epilog="Any config key may be overridden with --key value, e.g. --train.lambda 2.")
        p.add_argument("--config", help="flat dotted-key config file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return p

    p = command("pretrain", "pretrain the backbone on the GI task families")

    p = command("train", "adapt a pretrained backbone with one method")
    p.add_argument("--method", default="MoEI", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--backbone", help="pretrained backbone checkpoint (pretrained on the fly if omitted)")

    p = command("ablate", "run the full method grid and report forgetting")
    p.add_argument("--methods", type=_method_list, default=list(METHODS), help="comma-separated subset")
    p.add_argument("--seeds", type=_int_list, default=None, help="comma-separated seeds (default: train.seed)")
    p.add_argument("--backbone", help="pretrained backbone for a single-seed run")

    p = command("sweep-replay", "vary the replay-set size for MoEI and LoRA+Replay")
    p.add_argument("--sizes", type=_int_list, default=[0, 100, 500, 2000])
    p.add_argument("--methods", type=_method_list, default=["MoEI", "LoRA+Replay"])
    p.add_argument("--backbone", help="pretrained backbone checkpoint")

    p = command("route-stats", "mean router gate values per site and dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint with gated adapters")

    p = command("eval", "score a checkpoint on every task family")
    p.add_argument("--checkpoint", required=True)

    p = command("plot", "render charts from exported metric CSVs")
    p.add_argument("--input", help="directory with metrics.csv / sweep.csv / router CSVs (default: output_dir)")
    return parser


# ---------------------------------------------------------------- helpers
class Run:
    """Output directory bookkeeping: artifacts, manifest and the run log."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.dir = cfg.output_dir
        self.artifacts: List[str] = []
        os.makedirs(self.dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def wrote(self, name: str) -> str:
        self.artifacts.append(name)
        return self.path(name)

    def finish(self) -> None:
        entries = []
        for name in self.artifacts:
            with open(self.path(name), "rb") as fh:
                blob = fh.read()
            entries.append({"path": name, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()})
        manifest = {"tool": f"moei {__version__}", "command": self.command, "config": config_dict(self.cfg),
                    "artifacts": entries}
        atomic_write_text(self.path("manifest.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _setup_logging(verbose: bool, log_path: Optional[str]) -> None:
    root = logging.getLogger("moei")
    root.handlers.clear()
    root.setLevel(logging.INFO)
    root.propagate = False
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    stderr = logging.StreamHandler(sys.stderr)
    stderr.setLevel(logging.INFO if verbose else logging.WARNING)
    stderr.setFormatter(fmt)
    root.addHandler(stderr)
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        fh = logging.FileHandler(log_path, mode="w")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _load_backbone(path: str) -> Backbone:
    if not os.path.exists(path):
        raise ConfigError(f"backbone checkpoint not found: {path}")
    return load_checkpoint(path).model


def _backbone_for(args, cfg: RunConfig, bench, run: Run) -> Backbone:
    if getattr(args, "backbone", None):
        return _load_backbone(args.backbone)
    model = pretrain_backbone(cfg.model, cfg.train, bench, log_every=50 if args.verbose else 0)
    save_checkpoint(run.wrote("backbone.ckpt"), model, config=config_dict(cfg), meta={"kind": "backbone"})
    return model


def _print_rows(report) -> None:
    print(f"{'method':<24}{'seed':>5}  " + "  ".join(f"{k:>11}" for k in ("perception", "cognition", "expression"))
          + f"  {'GI before':>9}  {'GI after':>8}  {'delta GI':>8}")
    for r in report.rows:
        ei = "  ".join(f"{r.ei_after[k]:>11.3f}" for k in ("perception", "cognition", "expression"))
        print(f"{r.method:<24}{r.seed:>5}  {ei}  {r.gi_before_mean:>9.3f}  {r.gi_after_mean:>8.3f}  {r.delta_GI:>+8.3f}")


def _write_report(run: Run, report) -> None:
    write_report_csv(report, run.wrote("metrics.csv"))
    write_report_json(report, run.wrote("metrics.json"))
    write_ablation_csv(report, run.wrote("ablation.csv"))


# ---------------------------------------------------------------- subcommands
def cmd_pretrain(args, cfg: RunConfig, run: Run) -> int:
    bench = build_bench(cfg.bench.seed, cfg.bench.sizes, cfg.model.vocab_size)
    model = pretrain_backbone(cfg.model, cfg.train, bench, log_every=50 if args.verbose else 0)
    scores = score_all(model, None, bench)
    save_checkpoint(run.wrote("backbone.ckpt"), model, config=config_dict(cfg),
                    meta={"kind": "backbone", "scores": scores})
    atomic_write_text(run.wrote("pretrain_scores.json"), json.dumps(scores, indent=1, sort_keys=True) + "\n")
    for name, value in scores.items():
        print(f"{name:<16}{value:.3f}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, run: Run) -> int:
    method = canonical_method(args.method)
    bench = build_bench(cfg.bench.seed, cfg.bench.sizes, cfg.model.vocab_size)
    backbone = _backbone_for(args, cfg, bench, run)
    result = run_method(method, backbone, bench, cfg.train, cfg.adapters,
                        log_every=50 if args.verbose else 0)
    report = ForgettingReport([result.row])
    save_checkpoint(run.wrote(f"{_slug(method)}.ckpt"), result.model, result.sites, config=config_dict(cfg),
                    meta={"kind": "adapted", "method": method})
    _write_report(run, report)
    if result.router is not None:
        write_router_csv(result.router, run.wrote("router_stats.csv"))
        write_router_json(result.router, run.wrote("router_stats.json"))
    _print_rows(report)
    return EXIT_OK


def _slug(method: str) -> str:
    return method.replace("+", "_plus_").replace("-", "_").lower()


def cmd_ablate(args, cfg: RunConfig, run: Run) -> int:
    methods = [canonical_method(m) for m in args.methods]
    seeds = args.seeds or [cfg.train.seed]
    backbones = None
    if args.backbone:
        if len(seeds) != 1:
            raise ConfigError("--backbone can only be combined with a single seed")
        backbones = {seeds[0]: _load_backbone(args.backbone)}
    result = run_experiment(methods, seeds, cfg.model, cfg.train, cfg.bench.sizes, cfg.bench.seed, cfg.adapters,
                            backbones=backbones, log_every=50 if args.verbose else 0)
    _write_report(run, result.report)
    for (method, seed), mrun in result.runs.items():
        if mrun.router is not None:
            write_router_csv(mrun.router, run.wrote(f"router_{_slug(method)}_seed{seed}.csv"))
    _print_rows(result.report)
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig, run: Run) -> int:
    bench = build_bench(cfg.bench.seed, cfg.bench.sizes, cfg.model.vocab_size)
    backbone = _backbone_for(args, cfg, bench, run)
    rows = replay_size_sweep(args.sizes, backbone, bench, cfg.train, [canonical_method(m) for m in args.methods],
                             cfg.adapters)
    write_sweep_csv(rows, run.wrote("sweep.csv"))
    print(f"{'method':<16}{'size':>6}  {'GI after':>8}  {'delta GI':>8}  {'mean EI':>7}")
    for r in rows:
        ei = sum(r.ei_after.values()) / len(r.ei_after)
        print(f"{r.method:<16}{r.replay_size:>6}  {r.gi_after:>8.3f}  {r.delta_GI:>+8.3f}  {ei:>7.3f}")
    return EXIT_OK


def _checkpoint(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_route_stats(args, cfg: RunConfig, run: Run) -> int:
    ckpt = _checkpoint(args.checkpoint)
    if ckpt.sites is None or not ckpt.sites.gated:
        raise ConfigError(f"{args.checkpoint} has no routed adapters")
    bench = build_bench(cfg.bench.seed, cfg.bench.sizes, ckpt.model.config.vocab_size)
    stats = router_stats(ckpt.model, ckpt.sites, bench.eval_sets())
    write_router_csv(stats, run.wrote("route_stats.csv"))
    write_router_csv(stats, run.wrote("route_stats_summary.csv"), site=stats.summary_site)
    write_router_json(stats, run.wrote("route_stats.json"))
    print(stats.format_table())
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, run: Run) -> int:
    ckpt = _checkpoint(args.checkpoint)
    bench = build_bench(cfg.bench.seed, cfg.bench.sizes, ckpt.model.config.vocab_size)
    scores = score_all(ckpt.model, ckpt.sites, bench)
    atomic_write_text(run.wrote("eval.json"), json.dumps(scores, indent=1, sort_keys=True) + "\n")
    for name, value in scores.items():
        print(f"{name:<16}{value:.3f}")
    return EXIT_OK


def cmd_plot(args, cfg: RunConfig, run: Run) -> int:
    from . import plots

    src = args.input or cfg.output_dir
    if not os.path.isdir(src):
        raise ConfigError(f"plot input directory not found: {src}")
    made = 0
    if os.path.exists(os.path.join(src, "metrics.csv")):
        plots.plot_forgetting(os.path.join(src, "metrics.csv"), run.wrote("plots/forgetting.png"))
        made += 1
    if os.path.exists(os.path.join(src, "sweep.csv")):
        plots.plot_sweep(os.path.join(src, "sweep.csv"), run.wrote("plots/replay_sweep.png"))
        made += 1
    for name in sorted(os.listdir(src)):
        if name.endswith(".csv") and (name.startswith("router_") or name == "route_stats.csv"):
            plots.plot_router(os.path.join(src, name), run.wrote(f"plots/{name[:-4]}.png"))
            made += 1
    if not made:
        raise ConfigError(f"no metrics.csv, sweep.csv or router CSVs found in {src}")
    for name in run.artifacts:
        print(run.path(name))
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep-replay": cmd_sweep,
    "route-stats": cmd_route_stats,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        cfg = parse_config(args.config, parse_overrides(rest))
        run = Run(args.command, cfg)
        _setup_logging(args.verbose, run.path("run.log"))
        for key, value in cfg.flat().items():
            logger.info("config %s = %s", key, value)
        atomic_write_text(run.wrote("config.txt"), render_config(cfg))
        status = COMMANDS[args.command](args, cfg, run)
        run.finish()
        return status
    except MoEIError as exc:
        print(f"moei {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"moei {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
