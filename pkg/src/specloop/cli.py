"""Command-line driver: run, sweep, analytics, pretrain."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from . import analytics
from . import config as cfgmod
from . import report
from .errors import IntegrityError, UsageError
from .orchestrator import ExperimentResult, pretrain, run_experiment
from .toylm import save_snapshot
from .traces import write_jsonl as write_traces

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML path or bundled config name")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable")
    p.add_argument("--out-dir", help="output directory (default: output.dir from the config)")
    p.add_argument("--mode", choices=("deterministic", "threaded"))
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-traces", action="store_true", help="also write traces.jsonl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specloop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment (and each of its variants)")
    _common(p)

    p = sub.add_parser("sweep", help="run an experiment once per parameter value")
    _common(p)
    p.add_argument("--param", help="dotted config path to sweep (default: sweep.parameter)")
    p.add_argument("--values", help="comma-separated values (default: sweep.values)")

    p = sub.add_parser("analytics", help="expected accept length and speedup")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--gamma", type=int, required=True)
    p.add_argument("--c", type=float, default=0.0)

    p = sub.add_parser("pretrain", help="produce a pretrained drafter snapshot")
    _common(p)
    p.add_argument("--output", help="snapshot path (default: <out-dir>/drafter.snap)")
    return parser


def resolve_config(args) -> cfgmod.ExperimentConfig:
    over = list(args.overrides)
    raw = cfgmod.apply_overrides(cfgmod.load_raw(args.config), over)
    if args.mode:
        raw["mode"] = args.mode
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.dump_traces:
        raw.setdefault("output", {})["dump_traces"] = True
    if args.out_dir:
        raw.setdefault("output", {})["dir"] = args.out_dir
    return cfgmod.ExperimentConfig.model_validate(raw)


def write_outputs(res: ExperimentResult, out: Path, dump_traces: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.write_jsonl(res.metrics, out / "metrics.jsonl")
    report.write_jsonl(res.learner_log, out / "learner.jsonl")
    report.write_json(res.summary, out / "summary.json")
    if dump_traces:
        with open(out / "traces.jsonl", "w") as fh:
            write_traces(res.traces, fh)


def expand_variants(cfg: cfgmod.ExperimentConfig) -> list[tuple[str | None, cfgmod.ExperimentConfig]]:
    """The base config alone, or one derived config per named variant."""
    if not cfg.variants:
        return [(None, cfg)]
    out = []
    for name, over in cfg.variants.items():
        vcfg = cfgmod.with_overrides(cfg, dict(over, variants={}, name=f"{cfg.name}/{name}"))
        out.append((name, vcfg))
    return out


def run_config(cfg: cfgmod.ExperimentConfig, out: Path) -> list[tuple[str | None, dict]]:
    results = []
    for name, vcfg in expand_variants(cfg):
        res = run_experiment(vcfg)
        write_outputs(res, out if name is None else out / name, vcfg.output.dump_traces)
        results.append((name, res.summary))
    return results


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.output.dir)
    for name, summary in run_config(cfg, out):
        label = cfg.name if name is None else f"{cfg.name}/{name}"
        print(f"{label}: final_moving_avg_accept_len={report.fmt_float(summary['final_moving_avg_accept_len'])} "
              f"mean_throughput={report.fmt_float(summary['mean_throughput'])} syncs={summary['syncs']}")
    print(f"wrote {out}")
    return EXIT_OK


def _value_label(v) -> str:
    return str(v).replace("/", "_").replace(" ", "")


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    param = args.param or (cfg.sweep.parameter if cfg.sweep else None)
    if args.values is not None:
        values = [cfgmod.parse_value(v) for v in args.values.split(",")]
    else:
        values = cfg.sweep.values if cfg.sweep else None
    if not param or not values:
        raise UsageError("sweep needs --param/--values or a sweep section in the config")
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    base = cfgmod.with_overrides(cfg, {"sweep": None})
    rows = []
    for value in values:
        vcfg = cfgmod.with_overrides(base, {param: value})
        for name, summary in run_config(vcfg, out / f"{param}={_value_label(value)}"):
            rows.append((value if name is None else f"{value}/{name}", summary))
    text = report.sweep_csv(param, rows)
    (out / "sweep.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_analytics(args) -> int:
    el = analytics.expected_accept_length(args.alpha, args.gamma)
    sp = analytics.expected_speedup(args.alpha, args.gamma, args.c)
    print(f"{'alpha':>8} {'gamma':>6} {'c':>8} {'E[L]':>12} {'speedup':>12}")
    print(f"{args.alpha:>8g} {args.gamma:>6d} {args.c:>8g} {report.fmt_float(el):>12g} {report.fmt_float(sp):>12g}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    params = pretrain(cfg)
    path = Path(args.output) if args.output else Path(cfg.output.dir) / "drafter.snap"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_snapshot(params, path)
    print(f"wrote {path} (version {params.version})")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "analytics": cmd_analytics, "pretrain": cmd_pretrain}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            print(f"config error: {loc}: {err['msg']}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
