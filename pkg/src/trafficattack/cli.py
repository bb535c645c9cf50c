"""Command-line driver: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage, 2 data/artifact error, 3 numeric/divergence error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .errors import ContractError, NumericError, TrafficAttackError

log = logging.getLogger("trafficattack")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _endpoint(args, cfg):
    if getattr(args, "oracle_url", None):
        from .oracle import HttpEndpoint
        return HttpEndpoint(args.oracle_url, max_queries=cfg.max_queries)
    return None


def _with(cfg: pl.RunConfig, **overrides) -> pl.RunConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def cmd_gen_data(args) -> int:
    base = pl.RunConfig()
    if args.config:
        base = pl.RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    cfg = _with(base, seed=args.seed, sensors=args.sensors, days=args.days, noise_scale=args.noise_scale,
                noise_persistence=args.noise_persistence, ha_min_periods=args.ha_min_periods,
                target_epochs=args.target_epochs)
    if args.chronological:
        cfg = replace(cfg, chronological=True)
    if args.fractions:
        cfg = replace(cfg, fractions=tuple(args.fractions))
    outputs = pl.gen_data(pl.Workspace(args.workdir), cfg)
    print(f"wrote {outputs[0]} ({cfg.days * 24} rows, {cfg.sensors} sensors)")
    return 0


def cmd_import_data(args) -> int:
    ws = pl.Workspace(args.workdir)
    cfg = pl.RunConfig(seed=args.seed, flows_csv=str(args.flows), sensors_csv=str(args.sensor_positions))
    if args.ha_min_periods:
        cfg = replace(cfg, ha_min_periods=args.ha_min_periods)
    pl.import_data(ws, cfg, args.flows, args.sensor_positions)
    print(f"imported {args.flows}")
    return 0


def cmd_train_target(args) -> int:
    ws = pl.Workspace(args.workdir)
    cfg = _with(ws.load_config(), target_epochs=args.epochs, target_hidden=args.hidden)
    kinds = pl.TARGET_KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        print(f"trained {pl.train_target(ws, kind, cfg)}")
    return 0


def cmd_serve_oracle(args) -> int:
    from .model_zoo import load_model
    from .oracle import serve

    ws = pl.Workspace(args.workdir)
    bundle = load_model(ws.require(ws.target(args.target), f"train-target --kind {args.target}"))
    server = serve(bundle, args.host, args.port, background=False)
    print(f"serving {bundle.model_id} at {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_collect(args) -> int:
    ws = pl.Workspace(args.workdir)
    cfg = _with(ws.load_config(), max_queries=args.max_queries)
    print(f"wrote {pl.collect_stage(ws, args.target, cfg, _endpoint(args, cfg))}")
    return 0


def cmd_train_substitute(args) -> int:
    ws = pl.Workspace(args.workdir)
    cfg = _with(ws.load_config(), substitute_epochs=args.epochs, substitute_batch_size=args.batch_size,
                substitute_lr=args.lr)
    print(f"wrote {pl.train_substitute_stage(ws, args.target, cfg, _endpoint(args, cfg))}")
    return 0


def cmd_attack(args) -> int:
    ws = pl.Workspace(args.workdir)
    cfg = _with(ws.load_config(), epsilon=args.epsilon, alpha=args.alpha, iterations=args.iters,
                clip_min=args.clip_min, clip_max=args.clip_max, max_queries=args.max_queries)
    if args.use_oracle_targets:
        cfg = replace(cfg, use_oracle_targets=True)
    print(f"wrote {pl.attack_stage(ws, args.target, args.method, cfg, _endpoint(args, cfg))}")
    return 0


def cmd_evaluate(args) -> int:
    ws = pl.Workspace(args.workdir)
    cfg = _with(ws.load_config(), bins=args.bins)
    methods = pl.METHODS if args.method == "all" else (args.method,)
    for method in methods:
        print(f"wrote {pl.evaluate_stage(ws, args.target, method, cfg)}")
    return 0


def cmd_report(args) -> int:
    txt, _ = pl.report_stage(pl.Workspace(args.workdir), args.l2_scale)
    sys.stdout.write(txt.read_text())
    return 0


def cmd_run(args) -> int:
    ws = pl.Workspace(args.workdir)
    if ws.config_path.exists() and not args.regenerate:
        cfg, generate = ws.load_config(), False
    else:
        cfg, generate = _with(pl.RunConfig(), seed=args.seed, sensors=args.sensors, days=args.days), True
    pl.run_all(ws, cfg, args.targets, args.methods, generate=generate)
    sys.stdout.write((ws.root / "reports" / "table.txt").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trafficattack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def stage(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--workdir", type=Path, default=Path("run"), help="pipeline work directory")
        p.set_defaults(func=fn)
        return p

    p = stage("gen-data", cmd_gen_data, "generate synthetic flows and sensors, write config.json")
    p.add_argument("--sensors", type=int, required=True)
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise-scale", type=float)
    p.add_argument("--noise-persistence", type=float)
    p.add_argument("--fractions", type=float, nargs=3, metavar=("ORACLE", "ATTACK", "HOLDOUT"))
    p.add_argument("--chronological", action="store_true", help="split in time order instead of shuffling")
    p.add_argument("--ha-min-periods", type=int, help="weeks of history the historical average needs (default 4)")
    p.add_argument("--target-epochs", type=int)
    p.add_argument("--config", type=Path, help="JSON file with RunConfig fields")

    p = stage("import-data", cmd_import_data, "ingest a flow CSV and sensor CSV")
    p.add_argument("--flows", type=Path, required=True)
    p.add_argument("--sensor-positions", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ha-min-periods", type=int)

    p = stage("train-target", cmd_train_target, "train a target model")
    p.add_argument("--kind", choices=(*pl.TARGET_KINDS, "all"), required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)

    p = stage("serve-oracle", cmd_serve_oracle, "serve a target over HTTP (blocks)")
    p.add_argument("--target", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)

    for name, fn, text in (("collect", cmd_collect, "query the oracle on the oracle split"),
                           ("train-substitute", cmd_train_substitute, "fit a substitute to an oracle log"),
                           ("attack", cmd_attack, "craft adversarial signals and deliver them")):
        p = stage(name, fn, text)
        p.add_argument("--target", required=True)
        p.add_argument("--oracle-url", help="HTTP oracle; default is in-process from targets/")
        if name != "train-substitute":
            p.add_argument("--max-queries", type=int)
        if name == "train-substitute":
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--lr", type=float)
        if name == "attack":
            p.add_argument("--method", choices=pl.METHODS, required=True)
            p.add_argument("--epsilon", type=float)
            p.add_argument("--alpha", type=float)
            p.add_argument("--iters", type=int)
            p.add_argument("--clip-min", type=float)
            p.add_argument("--clip-max", type=float)
            p.add_argument("--use-oracle-targets", action="store_true",
                           help="ascend error against the target's forecasts instead of ground truth")

    p = stage("evaluate", cmd_evaluate, "compute the attack report")
    p.add_argument("--target", required=True)
    p.add_argument("--method", choices=(*pl.METHODS, "all"), required=True)
    p.add_argument("--bins", type=int)

    p = stage("report", cmd_report, "consolidated table over all reports")
    p.add_argument("--l2-scale", type=float, default=1.0, help="divide L2 columns by this for display")

    p = stage("run", cmd_run, "run every stage in one process")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sensors", type=int, default=10)
    p.add_argument("--days", type=int, default=60)
    p.add_argument("--targets", nargs="+", choices=pl.TARGET_KINDS, default=list(pl.TARGET_KINDS))
    p.add_argument("--methods", nargs="+", choices=pl.METHODS, default=list(pl.METHODS))
    p.add_argument("--regenerate", action="store_true", help="regenerate data even if config.json exists")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrafficAttackError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
