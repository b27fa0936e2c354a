"""Command-line interface: train, eval, analyze, gradcheck, gen-data.

Exit codes form a stable contract for scripting:

* 0 -- success
* 1 -- verification failure (a gradient check exceeded tolerance)
* 2 -- usage or configuration error (bad flags, bad config, unmapped data)
* 3 -- runtime numerical failure (training loss became non-finite)

Every command is deterministic given its flags and inputs: rerunning with
the same arguments reproduces output files byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .config import load_config, parse_config, resolved_text
from .data import (
    PRESETS,
    generate_mixture,
    preset_specs,
    read_tokens_csv,
    write_tokens_csv,
)
from .errors import (
    ConfigError,
    EvaluationError,
    MappingError,
    ParameterError,
    ShapeError,
)
from .gradcheck import format_report, run_gradcheck
from .heatmap import write_heatmap_svg
from .model import MoeModel, load_checkpoint, save_checkpoint
from .training import TrainingDiverged, evaluate, train_run, write_metrics_csv

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.resolve()
    os.makedirs(args.out, exist_ok=True)

    def progress(step, bundle, report):
        print(
            f"step={step} total={bundle.total:.6f} task={bundle.task:.6f} "
            f"damex={bundle.damex:.6f} mean_purity={report.mean_purity():.4f}"
        )

    try:
        result = train_run(cfg, progress=progress)
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        batch = getattr(err, "batch", None)
        if batch is not None:
            dump = os.path.join(args.out, "diverged_batch.csv")
            write_tokens_csv(batch, dump)
            print(f"offending batch dumped to {dump}", file=sys.stderr)
        return EXIT_NUMERIC

    snapshot = resolved_text(cfg)
    save_checkpoint(result.model, snapshot, os.path.join(args.out, "checkpoint.txt"))
    write_metrics_csv(result.metrics, os.path.join(args.out, "metrics.csv"))
    with open(os.path.join(args.out, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(snapshot)
    final = result.metrics.final_eval()
    for d, acc in sorted(final.accuracy.items()):
        print(f"final accuracy dataset={d} {acc:.6f}")
    print(f"artifacts written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / analyze
# ---------------------------------------------------------------------------


def _restore(checkpoint_path):
    ckpt = load_checkpoint(checkpoint_path)
    cfg = parse_config(ckpt.config_text).resolve()
    model = MoeModel(cfg.model, seed=cfg.train.seed)
    model.load_state(ckpt.arrays)
    return cfg, model


def _write_utilization_csv(path, utilization) -> None:
    blocks = sorted(utilization)
    num_experts = utilization[blocks[0]].matrix.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["layer", "dataset", "present"] + [f"e{e}" for e in range(num_experts)]
        )
        for block in blocks:
            util = utilization[block]
            for i, dataset in enumerate(util.datasets):
                if util.present[i]:
                    row = ["%.17g" % w for w in util.matrix[i]]
                    writer.writerow([block, dataset, 1] + row)
                else:
                    writer.writerow([block, dataset, 0] + [""] * num_experts)


def _analyze(args, heatmap_out) -> int:
    cfg, model = _restore(args.checkpoint)
    batch = read_tokens_csv(args.data)
    for d in sorted(set(int(v) for v in batch.dataset_ids)):
        cfg.mapping.experts_for(d)  # raises MappingError -> exit 2

    report = evaluate(model, batch, cfg.mapping)
    _write_utilization_csv(args.out, report.utilization)

    for d, acc in sorted(report.accuracy.items()):
        print(f"accuracy dataset={d} {acc:.6f}")
    for (block, d), purity in sorted(report.purity.items()):
        print(f"purity layer={block} dataset={d} {purity:.6f}")
    for block, score in sorted(report.collapse.items()):
        print(f"collapse layer={block} {score:.6f}")
    for block, rate in sorted(report.drop_rate.items()):
        print(f"drop_rate layer={block} {rate:.6f}")

    if heatmap_out is not None:
        if not heatmap_out.endswith(".svg"):
            raise ConfigError(
                f"--heatmap-out must end in .svg, got {heatmap_out!r}"
            )
        write_heatmap_svg(report.utilization, heatmap_out)
        print(f"heatmap written to {heatmap_out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    return _analyze(args, heatmap_out=None)


def cmd_analyze(args) -> int:
    return _analyze(args, heatmap_out=args.heatmap_out)


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(
        base_seed=args.seed, eps=args.eps, seeds=args.seeds, corrupt=args.corrupt
    )
    sys.stdout.write(format_report(results, args.seed, args.eps, args.seeds))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFICATION


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    specs = preset_specs(args.preset, shots=args.shots)
    train, eval_batch = generate_mixture(specs, args.seed)
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.csv")
    eval_path = os.path.join(args.out, "eval.csv")
    write_tokens_csv(train, train_path)
    write_tokens_csv(eval_batch, eval_path)
    print(f"wrote {train_path} ({len(train)} tokens)")
    print(f"wrote {eval_path} ({len(eval_batch)} tokens)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="damex",
        description="Dataset-aware mixture-of-experts: training and analysis.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="run a training config")
    p_train.add_argument("--config", required=True, help="run config file")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", type=int, default=None, help="override train.seed")
    p_train.set_defaults(func=cmd_train)

    for verb, func in (("eval", cmd_eval), ("analyze", cmd_analyze)):
        p = sub.add_parser(verb, help=f"{verb} a checkpoint against token data")
        p.add_argument("--checkpoint", required=True, help="checkpoint file")
        p.add_argument("--data", required=True, help="token CSV file")
        p.add_argument("--out", required=True, help="utilization CSV output path")
        if verb == "analyze":
            p.add_argument("--heatmap-out", default=None, help="SVG heatmap path")
        p.set_defaults(func=func)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--seed", type=int, default=0, help="base seed")
    p_grad.add_argument("--eps", type=float, default=1e-5, help="probe step size")
    p_grad.add_argument("--seeds", type=int, default=100, help=argparse.SUPPRESS)
    p_grad.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_gen = sub.add_parser("gen-data", help="write preset token CSVs")
    p_gen.add_argument("--preset", required=True, choices=PRESETS)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--shots", type=int, default=50, help="minority shot count")
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MappingError, ParameterError, ShapeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
