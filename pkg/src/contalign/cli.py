"""Command-line interface.

Verbs:
  pretrain  build (or verify) the cached frozen backbone for a config
  run       execute all configured strategies and emit report files
  sweep     one ablation axis (temperature | beta | tau_rule | pooling | n_blocks)
  route     score a saved router pool against an exported dataset
  report    rebuild summary tables from a run's stage-metrics files

Exit code is 0 only when every requested piece of work succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import (
    default_config,
    env_jobs_override,
    env_output_override,
    load_config,
    save_config,
)
from .experiment import (
    SWEEP_AXES,
    ablation_sweep,
    emit_comparison,
    ensure_backbone,
    run_experiment,
    score_pool_on_dataset,
)

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contalign",
        description="Continual segmentation benchmark with routed alignment adapters",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="experiment config JSON (defaults to the built-in config)")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--seed-override", type=int, default=None,
                        help="replace the master seed and every strategy seed")
    common.add_argument("--jobs", type=int, default=1,
                        help="parallel strategy workers (default 1)")

    p = sub.add_parser("pretrain", parents=[common],
                       help="pretrain and cache the frozen backbone")

    p = sub.add_parser("run", parents=[common], help="run all configured strategies")
    p.add_argument("--export-stream", action="store_true",
                   help="also export the generated task stream as a dataset directory")

    p = sub.add_parser("sweep", parents=[common], help="run an ablation sweep")
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--grid", type=str, default=None,
                   help="comma-separated grid values overriding the default")

    p = sub.add_parser("route", help="score a saved pool against a dataset")
    p.add_argument("--pool", type=Path, required=True, help="router pool directory")
    p.add_argument("--data", type=Path, required=True, help="exported dataset directory")
    p.add_argument("--backbone", type=Path, required=True, help="backbone checkpoint file")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("report", help="rebuild summaries from stage tables")
    p.add_argument("--run", type=Path, required=True, help="existing run directory")
    p.add_argument("--out", type=Path, default=None,
                   help="where to write rebuilt tables (default: the run directory)")
    return parser


def _load_or_default_config(args):
    config = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed_override", None) is not None:
        seed = args.seed_override
        config = replace(
            config,
            master_seed=seed,
            strategies=tuple(replace(s, seed=seed) for s in config.strategies),
        )
    return config


def _resolve_out(args, fallback: str) -> Path:
    out = env_output_override(str(args.out) if args.out else None)
    return Path(out) if out else Path(fallback)


def cmd_pretrain(args) -> int:
    config = _load_or_default_config(args)
    out = _resolve_out(args, "contalign-cache")
    backbone, path = ensure_backbone(config, out)
    print(f"backbone ready at {path} (held-out IoU {backbone.holdout_iou:.3f})")
    return 0


def cmd_run(args) -> int:
    config = _load_or_default_config(args)
    out = _resolve_out(args, "contalign-run")
    jobs = env_jobs_override(args.jobs)
    manifest = run_experiment(config, out, jobs=jobs)
    if args.export_stream:
        from .experiment import build_stream
        from .io import export_stream

        export_stream(out / "stream", build_stream(config))
    save_config(out / "config.json", config)
    for name in sorted(manifest["strategies"]):
        status = manifest["strategies"][name]
        line = f"{name}: {status['status']}"
        if status["status"] != "ok":
            line += f" ({status.get('error', 'unknown error')})"
        print(line)
    print(f"report written to {out}")
    return 0 if manifest["all_ok"] else 1


def cmd_sweep(args) -> int:
    config = _load_or_default_config(args)
    out = _resolve_out(args, "contalign-sweep")
    grid = None
    if args.grid:
        raw = args.grid.split(",")
        if args.axis in ("tau_rule", "pooling"):
            grid = tuple(raw)
        elif args.axis == "n_blocks":
            grid = tuple(int(v) for v in raw)
        else:
            grid = tuple(float(v) for v in raw)
    path = ablation_sweep(config, args.axis, out, grid=grid)
    print(f"sweep table written to {path}")
    return 0


def cmd_route(args) -> int:
    from .io import import_stream, load_backbone, load_pool

    pool = load_pool(args.pool)
    backbone = load_backbone(args.backbone)
    stream = import_stream(args.data)
    result = score_pool_on_dataset(pool, backbone, stream)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "routing_scores.json").write_text(
        json.dumps(result, indent=2, sort_keys=True)
    )
    lines = ["task,chosen,score"]
    lines += [f"{r['task']},{r['chosen']},{r['score']:.6f}" for r in result["decisions"]]
    (out / "routing_decisions.csv").write_text("\n".join(lines) + "\n")
    print(f"routing results written to {out}")
    return 0


def cmd_report(args) -> int:
    from .metrics import aggregate_summary, stage_metrics_from_csv
    from .strategies import EXEMPLAR_FREE

    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    summaries = {}
    for table in sorted(run_dir.glob("strategies/*/stage_metrics.csv")):
        name = table.parent.name
        sm = stage_metrics_from_csv(table.read_text())
        summaries[name] = {
            "aggregates": aggregate_summary(sm),
            "exemplar_free": EXEMPLAR_FREE.get(name, True),
        }
    if not summaries:
        print(f"no stage tables found under {run_dir}", file=sys.stderr)
        return 1
    path = emit_comparison(out, summaries)
    print(f"comparison table rebuilt at {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "pretrain": cmd_pretrain,
        "run": cmd_run,
        "sweep": cmd_sweep,
        "route": cmd_route,
        "report": cmd_report,
    }
    try:
        return handlers[args.verb](args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
