"""Command-line operator surface.

Subcommands: ``gendata`` (write a synthetic dataset), ``train`` (episodic
training run), ``eval`` (many-task evaluation of a checkpoint),
``gradcheck`` (finite-difference gradient verification) and ``sweep``
(paired-seed ablation).

Exit codes: 0 on success, 1 on runtime failure, 2 on usage or config
errors. Failures print a single machine-parsable line to stderr:
``error: <kind>: <message>``. ``ESPT_THREADS`` caps evaluation worker
parallelism. Every run writes its fully resolved config next to its
outputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from espt.backbone import ConfigError, load_checkpoint, save_checkpoint
from espt.config import (
    parse_run_config,
    parse_synthetic_config,
    run_config_to_text,
)
from espt.episodes import DatasetError, SamplerError, generate_synthetic, \
    load_dataset, save_dataset
from espt.evaluation import evaluate
from espt.gradcheck import default_gradcheck_config, run_model_gradcheck
from espt.sweep import SweepSpec, run_sweep, write_results_table
from espt.tensor import SolverError
from espt.training import TrainingError, train


def _parse_shape(text):
    try:
        n, k, l = (int(x) for x in text.split(","))
        return (n, k, l)
    except ValueError:
        raise ConfigError(f"shape must be 'n,k,l', got {text!r}")


def _resolved_train_config(args):
    if args.config is None:
        return default_gradcheck_config()
    rc = parse_run_config(args.config)
    if rc.train.precision != "float64":
        raise ConfigError("gradcheck requires precision = float64")
    return rc.train


def cmd_gendata(args):
    spec = parse_synthetic_config(args.spec)
    dataset = generate_synthetic(spec)
    manifest = save_dataset(dataset, args.out)
    counts = {s: len(ids) for s, ids in dataset.splits.items()}
    print(f"wrote {manifest} ({len(dataset.images)} classes, splits {counts})")
    return 0


def cmd_train(args):
    rc = parse_run_config(args.config)
    if rc.dataset_manifest is None:
        raise ConfigError("train requires [dataset] manifest")
    dataset = load_dataset(rc.dataset_manifest)
    out = rc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(run_config_to_text(rc))
    result = train(rc.train, dataset, log_path=out / "metrics.jsonl")
    extra = {
        "dataset_manifest": str(rc.dataset_manifest),
        "eval_split": rc.eval_split,
        "eval_shape": list(rc.eval_shape),
    }
    for name, model in (("best", result.best), ("final", result.final)):
        model.extra.update(extra)
        save_checkpoint(out / name, model)
    val_records = [m["val_acc"] for m in result.log if "val_acc" in m]
    tail = f", last validation accuracy {val_records[-1]:.4f}" if val_records else ""
    print(f"trained {len(result.log)} steps -> {out}{tail}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    manifest = args.manifest or model.extra.get("dataset_manifest")
    if manifest is None:
        raise ConfigError(
            "no dataset manifest: pass --manifest or use a checkpoint "
            "written by the train command")
    dataset = load_dataset(manifest)
    shape = _parse_shape(args.shape) if args.shape else \
        tuple(model.extra.get("eval_shape", (5, 1, 16)))
    split = args.split or model.extra.get("eval_split", "test")
    report = evaluate(model, dataset, split, shape, args.tasks, args.seed)
    out_path = Path(args.out) if args.out else Path(args.checkpoint) / "eval_report.json"
    out_path.write_text(report.to_record() + "\n")
    print(report.to_record())
    if args.table:
        with open(args.table, "a") as fh:
            fh.write(report.table_row() + "\n")
    print(f"mean accuracy {report.mean_accuracy:.4f} "
          f"+/- {report.ci95:.4f} over {report.num_tasks} tasks")
    return 0


def cmd_gradcheck(args):
    config = _resolved_train_config(args)
    rows = run_model_gradcheck(config, step=args.step, seed=args.seed)
    worst_by_param = {}
    for loss_name, param_name, err in rows:
        worst_by_param[param_name] = max(worst_by_param.get(param_name, 0.0), err)
    for param_name in sorted(worst_by_param):
        print(f"gradcheck {param_name} {worst_by_param[param_name]:.3e}")
    worst = max(worst_by_param.values())
    ok = worst < args.tol
    print(f"gradcheck worst relative error {worst:.3e} "
          f"({'PASS' if ok else 'FAIL'} at {args.tol:g})")
    return 0 if ok else 1


def cmd_sweep(args):
    rc = parse_run_config(args.config)
    if rc.sweep is None:
        raise ConfigError("sweep requires a [sweep] section")
    if rc.dataset_manifest is None:
        raise ConfigError("sweep requires [dataset] manifest")
    dataset = load_dataset(rc.dataset_manifest)
    out = rc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(run_config_to_text(rc))
    spec = SweepSpec(
        base=rc.train,
        axis=rc.sweep.axis,
        values=rc.sweep.values,
        seeds=rc.sweep.seeds,
        eval_split=rc.eval_split,
        eval_shape=rc.eval_shape,
        eval_tasks=rc.sweep.eval_tasks,
    )
    rows = run_sweep(spec, dataset,
                     progress=lambda r: print(
                         f"{r.axis}={r.value} seed={r.seed} "
                         f"acc={r.mean_acc:.4f} ci={r.ci95:.4f}"))
    table = write_results_table(rows, out / "results.csv")
    print(f"wrote {table}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="espt",
        description="Episodic few-shot training with a spatial-consistency "
                    "pretext objective.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="config with a [synthetic] section")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="run episodic training")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over many tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", type=int, default=1000)
    p.add_argument("--shape", help="episode shape n,k,l (default: from checkpoint)")
    p.add_argument("--split", help="dataset split (default: from checkpoint)")
    p.add_argument("--manifest", help="dataset manifest override")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report path (default: <checkpoint>/eval_report.json)")
    p.add_argument("--table", help="append a delimited row to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", help="run config (default: built-in toy setup)")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="paired-seed ablation sweep")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: config: {err}", file=sys.stderr)
        return 2
    except (DatasetError, SamplerError, SolverError, TrainingError) as err:
        print(f"error: runtime: {err}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError) as err:
        print(f"error: runtime: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
