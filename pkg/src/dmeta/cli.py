"""Command-line entry point: ``dmeta {pretrain,evaluate,probability,export-logits}``.

Exit codes: 0 success, 1 configuration/validation error, 2 I/O error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from dmeta import config as cfgmod
from dmeta import data as D
from dmeta import evaluation, model
from dmeta import rng as rngs
from dmeta.errors import InvalidArgumentError, NumericError
from dmeta.outer import run_pretraining

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("dmeta")


def load_splits(cfg):
    """Dataset splits named by the run config."""
    ds = cfg.dataset
    if ds.name == "synthetic":
        return D.synth_glyph_splits(ds.synthetic_pretraining_classes, ds.synthetic_evaluation_classes,
                                    ds.synthetic_per_class, ds.synthetic_seed, ds.synthetic_jitter)
    root = cfg.data_root()
    if not root:
        raise InvalidArgumentError(f"dataset {ds.name!r} needs dataset.root or ${cfgmod.DATA_ROOT_ENV}")
    if ds.name == "omniglot":
        return D.load_omniglot(root)
    if ds.name == "mini-imagenet":
        return D.load_mini_imagenet(root)
    raise InvalidArgumentError(f"unknown dataset {ds.name!r}")


def pretrain(cfg):
    """Run pretraining and write config, metrics and checkpoints into ``cfg.output_dir``."""
    inner = cfg.inner
    if inner.transductive != cfg.eval.transductive:
        raise InvalidArgumentError("inner.transductive and eval.transductive must agree")
    meta = cfg.resolved_meta()
    splits = load_splits(cfg)
    init = model.init_params(cfg.network_spec(), rngs.stream(cfg.seed, "init"))
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfgmod.dump(cfg))
    metrics = os.path.join(out, "metrics.jsonl")
    inner_log = os.path.join(out, "inner.jsonl")
    for path in (metrics, inner_log):
        if os.path.exists(path):
            os.remove(path)
    state = run_pretraining(meta, splits.pretraining, inner, init=init, metrics_path=metrics,
                            inner_log_path=inner_log if meta.mode.startswith("divergent") else None,
                            checkpoint_dir=out)
    final = os.path.join(out, "checkpoint_final.dmeta")
    model.save_checkpoint(state.params, final)
    return final, state


def evaluate_checkpoint(cfg, checkpoint, report_path=None, tasks_csv=None, mode=""):
    params = model.load_checkpoint(checkpoint)
    ev = cfg.eval
    if params.spec.num_logits != ev.way:
        raise InvalidArgumentError(f"checkpoint head has {params.spec.num_logits} logits but eval.way={ev.way}")
    splits = load_splits(cfg)
    report = evaluation.evaluate(params, splits.evaluation, ev.way, ev.shot, ev.queries, ev.num_tasks,
                                 seed=cfg.seed, steps=ev.steps, lr=ev.lr, mode=mode,
                                 transductive=ev.transductive, workers=cfg.effective_workers())
    if report_path:
        with open(report_path, "w") as fh:
            fh.write(report.to_json() + "\n")
    if tasks_csv:
        with open(tasks_csv, "w") as fh:
            fh.write("task,accuracy\n")
            for i, a in enumerate(report.per_task):
                fh.write(f"{i},{a!r}\n")
    return report


def export(cfg, checkpoint, task_seed, out):
    params = model.load_checkpoint(checkpoint)
    ev = cfg.eval
    if params.spec.num_logits != ev.way:
        raise InvalidArgumentError(f"checkpoint head has {params.spec.num_logits} logits but eval.way={ev.way}")
    splits = load_splits(cfg)
    task = D.sample_class_task(splits.evaluation, ev.way, ev.shot, ev.queries, rngs.stream(task_seed, "export-task"))
    tuned = evaluation.fine_tune(params, task, ev.steps, ev.lr, task_seed, ev.transductive)
    return evaluation.export_logits(tuned, task, out, task_id=task_seed, transductive=ev.transductive)


def _parser():
    p = argparse.ArgumentParser(prog="dmeta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("pretrain", help="run meta-pretraining")
    add_config(sp)
    sp.add_argument("--out", help="output directory (overrides output_dir)")

    sp = sub.add_parser("evaluate", help="few-shot evaluation of a checkpoint")
    add_config(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--report", help="write the EvalReport JSON here")
    sp.add_argument("--tasks-csv", help="dump per-task accuracies")
    sp.add_argument("--mode-label", default="", help="label stored in the report")

    sp = sub.add_parser("probability", help="chance that N draws hit N distinct classes")
    sp.add_argument("c", type=int, help="number of classes")
    sp.add_argument("m", type=int, help="images per class")
    sp.add_argument("N", type=int, help="sample size")

    sp = sub.add_parser("export-logits", help="fine-tune on one task and write query logits as CSV")
    add_config(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--task-seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "probability":
            print(f"{D.unique_class_probability(args.c, args.m, args.N):.6f}")
            return 0
        overrides = list(args.set)
        if getattr(args, "out", None) and args.command == "pretrain":
            overrides.append(f"output_dir={args.out}")
        cfg = cfgmod.load(args.config, overrides)
        if args.command == "pretrain":
            final, state = pretrain(cfg)
            print(f"{cfg.meta.mode}: {state.iteration} iterations, {state.accepted} learners accepted; wrote {final}")
        elif args.command == "evaluate":
            report = evaluate_checkpoint(cfg, args.checkpoint, args.report, args.tasks_csv, args.mode_label)
            print(report.summary())
            print(report.to_json())
        elif args.command == "export-logits":
            path = export(cfg, args.checkpoint, args.task_seed, args.out)
            print(f"wrote {path}")
        return 0
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
