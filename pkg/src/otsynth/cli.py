"""Command-line interface: one subcommand per pipeline stage plus the
multi-seed experiment and ablation runners.

Configuration precedence everywhere: command-line flags override the
``--config`` JSON file, which overrides built-in defaults; the effective
values are echoed into every report. All randomness derives from
``--seed``. Exit codes: 2 usage, 3 data/format errors, 4 numeric errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .data import DatasetSpec, kshot_sample, make_synthetic_dataset, \
    read_features, write_features
from .errors import DataError, NumericError
from .experiment import (ExperimentConfig, dump_json, experiment_doc,
                         reference_dataset_spec, run_experiment, summarize,
                         summary_to_table, _stage_doc)
from .nets import load_checkpoint, save_checkpoint
from .pipeline import (StageConfig, ablation_rows_to_csv,
                       ablation_rows_to_table, base_train, evaluate, finetune,
                       run_ablation_genloss, train_generator)
from .rng import RngState
from .transport import SinkhornConfig

DATASET_FILES = ("base_train.otfs", "kshot_pool.otfs", "test.otfs")

_DATASET_FLAGS = {
    "dim": "dim", "base_classes": "base_class_count",
    "novel_classes": "novel_class_count", "mean_radius": "mean_radius",
    "cov_scale": "cov_scale", "train_per_class": "train_per_class",
    "pool_per_class": "pool_per_class", "test_per_class": "test_per_class",
}

_STAGE_FLAGS = {
    "alpha": "alpha", "beta": "beta", "t_gen": "t_gen",
    "t_finetune": "t_finetune", "k_centroids": "k_centroids",
    "batch_real": "batch_real", "base_iterations": "base_iterations",
    "gen_iterations": "gen_iterations",
    "finetune_iterations": "finetune_iterations",
}


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _dataset_spec_from(args, config: dict, seed: int) -> DatasetSpec:
    spec = reference_dataset_spec(seed)
    spec = replace(spec, **{k: v for k, v in config.get("dataset", {}).items()})
    overrides = {field: getattr(args, flag)
                 for flag, field in _DATASET_FLAGS.items()
                 if getattr(args, flag, None) is not None}
    return replace(spec, seed=seed, **overrides)


def _stage_config_from(args, config: dict, seed: int) -> StageConfig:
    stage_doc = dict(config.get("stage", {}))
    sink_doc = stage_doc.pop("sinkhorn", {})
    for key in ("sgd_base", "sgd_gen", "sgd_finetune"):
        sub = stage_doc.pop(key, None)
        if sub is not None:
            from .nets import SgdConfig
            sub = dict(sub)
            sub["schedule"] = tuple(tuple(x) for x in sub.get("schedule", ()))
            stage_doc[key] = SgdConfig(**sub)
    stage = StageConfig(seed=seed, **stage_doc)
    if sink_doc:
        stage = replace(stage, sinkhorn=SinkhornConfig(**sink_doc))
    overrides = {field: getattr(args, flag)
                 for flag, field in _STAGE_FLAGS.items()
                 if getattr(args, flag, None) is not None}
    if overrides:
        stage = replace(stage, **overrides)
    if getattr(args, "epsilon", None) is not None:
        stage = replace(stage, sinkhorn=replace(stage.sinkhorn,
                                                epsilon=args.epsilon))
    return stage


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _load_dataset_dir(path: str):
    return tuple(read_features(os.path.join(path, name))
                 for name in DATASET_FILES)


def _parse_int_list(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip() != "")


# --- subcommand implementations ----------------------------------------------


def cmd_synth_data(args) -> int:
    config = _load_config_file(args.config)
    spec = _dataset_spec_from(args, config, args.seed)
    sets = make_synthetic_dataset(spec)
    os.makedirs(args.out, exist_ok=True)
    for name, fs in zip(DATASET_FILES, sets):
        write_features(os.path.join(args.out, name), fs)
    print(f"wrote {', '.join(DATASET_FILES)} to {args.out}")
    return 0


def cmd_base_train(args) -> int:
    config = _load_config_file(args.config)
    stage = _stage_config_from(args, config, args.seed)
    base_set, _, _ = _load_dataset_dir(args.dataset)
    rng = RngState(args.seed)
    cls = base_train(base_set, stage, rng=rng.split(1))
    save_checkpoint(args.out, classifier=cls)
    print(f"wrote classifier checkpoint to {args.out}")
    return 0


def cmd_gen_train(args) -> int:
    config = _load_config_file(args.config)
    stage = _stage_config_from(args, config, args.seed)
    base_set, _, _ = _load_dataset_dir(args.dataset)
    _, cls, _ = load_checkpoint(args.checkpoint)
    if cls is None:
        raise DataError(f"checkpoint {args.checkpoint} has no classifier")
    rng = RngState(args.seed)
    gen, records = train_generator(cls, base_set, stage, rng=rng.split(2),
                                   loss_variant=args.variant or "ot")
    save_checkpoint(args.out, generator=gen, classifier=cls)
    log_path = args.out + ".log.ndjson"
    _write_text(log_path, "".join(json.dumps(r) + "\n" for r in records))
    print(f"wrote generator checkpoint to {args.out} and log to {log_path}")
    return 0


def cmd_finetune(args) -> int:
    config = _load_config_file(args.config)
    stage = _stage_config_from(args, config, args.seed)
    _, pool, _ = _load_dataset_dir(args.dataset)
    gen, cls, _ = load_checkpoint(args.checkpoint)
    if cls is None:
        raise DataError(f"checkpoint {args.checkpoint} has no classifier")
    alpha = stage.alpha if args.alpha is None else args.alpha
    if alpha > 0 and gen is None:
        raise DataError("alpha > 0 requires a checkpoint with a generator")
    root = RngState(args.seed)
    kshot = kshot_sample(pool, args.shots, root.split(4, args.shots))
    tuned = finetune(gen, cls, kshot, stage, rng=root.split(3, args.shots),
                     alpha=alpha)
    save_checkpoint(args.out, generator=gen, classifier=tuned)
    print(f"wrote fine-tuned checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config_file(args.config)
    _, _, test = _load_dataset_dir(args.dataset)
    _, cls, _ = load_checkpoint(args.checkpoint)
    if cls is None:
        raise DataError(f"checkpoint {args.checkpoint} has no classifier")
    report = evaluate(cls, test, shots=args.shots, seed=args.seed)
    doc = {
        "format": "otsynth-eval",
        "version": 1,
        "report": report.to_doc(),
        "effective": {
            "dataset": args.dataset,
            "checkpoint": args.checkpoint,
            "shots": args.shots,
            "seed": args.seed,
        },
    }
    _write_text(args.out, dump_json(doc))
    print(f"wrote evaluation report to {args.out}")
    return 0


def cmd_run_experiment(args) -> int:
    config = _load_config_file(args.config)
    seeds = _parse_int_list(args.seeds) if args.seeds else \
        tuple(config.get("seeds", range(10)))
    shots = _parse_int_list(args.shots) if args.shots else \
        tuple(config.get("shots", (1, 2, 5)))
    seed0 = seeds[0]
    cfg = ExperimentConfig(
        dataset=_dataset_spec_from(args, config, seed0),
        stage=_stage_config_from(args, config, seed0),
        shots=shots, seeds=seeds,
        workers=args.workers or int(config.get("workers", 1)))

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "experiment.csv")
    with open(csv_path, "w") as csv_file:
        def sink(line):
            csv_file.write(line + "\n")
            csv_file.flush()
        rows = run_experiment(cfg, csv_sink=sink)

    summary = summarize(rows, cfg.shots, cfg.seeds)
    _write_text(os.path.join(args.out, "report.json"),
                dump_json(experiment_doc(cfg, rows, summary)))
    table = summary_to_table(summary)
    _write_text(os.path.join(args.out, "summary.txt"), table)
    print(table, end="")
    print(f"wrote experiment outputs to {args.out}")
    return 0


def cmd_ablation(args) -> int:
    config = _load_config_file(args.config)
    seeds = _parse_int_list(args.seeds) if args.seeds else (0, 1, 2)
    shots = _parse_int_list(args.shots) if args.shots else (1,)
    variants = tuple(args.variant.split(",")) if args.variant else \
        ("ot", "l2", "kl")
    seed0 = seeds[0]
    spec = _dataset_spec_from(args, config, seed0)
    stage = _stage_config_from(args, config, seed0)
    rows = run_ablation_genloss(spec, stage, shots, seeds, variants)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "ablation.csv"),
                ablation_rows_to_csv(rows))
    table = ablation_rows_to_table(rows)
    _write_text(os.path.join(args.out, "ablation.txt"), table)
    print(table, end="")
    print(f"wrote ablation outputs to {args.out}")
    return 0


# --- parser -------------------------------------------------------------------


def _add_stage_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--t-gen", dest="t_gen", type=int, default=None)
    p.add_argument("--t-finetune", dest="t_finetune", type=int, default=None)
    p.add_argument("--k-centroids", dest="k_centroids", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--batch-real", dest="batch_real", type=int, default=None)
    p.add_argument("--base-iterations", dest="base_iterations", type=int,
                   default=None)
    p.add_argument("--gen-iterations", dest="gen_iterations", type=int,
                   default=None)
    p.add_argument("--finetune-iterations", dest="finetune_iterations",
                   type=int, default=None)


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--base-classes", dest="base_classes", type=int, default=None)
    p.add_argument("--novel-classes", dest="novel_classes", type=int,
                   default=None)
    p.add_argument("--mean-radius", dest="mean_radius", type=float, default=None)
    p.add_argument("--cov-scale", dest="cov_scale", type=float, default=None)
    p.add_argument("--train-per-class", dest="train_per_class", type=int,
                   default=None)
    p.add_argument("--pool-per-class", dest="pool_per_class", type=int,
                   default=None)
    p.add_argument("--test-per-class", dest="test_per_class", type=int,
                   default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otsynth",
        description="Synthetic-feature augmentation for few-shot "
                    "classification, trained with a clustered transport loss.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None)
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("base-train", help="train the base-class classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None)
    _add_stage_flags(p)
    p.set_defaults(func=cmd_base_train)

    p = sub.add_parser("gen-train", help="train the feature generator")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="classifier checkpoint")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--variant", default=None,
                   help="generator loss: ot (default), l2, or kl")
    p.add_argument("--config", default=None)
    _add_stage_flags(p)
    p.set_defaults(func=cmd_gen_train)

    p = sub.add_parser("finetune", help="few-shot fine-tuning")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None)
    _add_stage_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report path")
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-experiment",
                       help="paired baseline/augmented multi-seed experiment")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--shots", default=None, help="comma-separated shot list")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--config", default=None)
    _add_dataset_flags(p)
    _add_stage_flags(p)
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("ablation", help="generator-loss ablation (ot/l2/kl)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", default=None,
                   help="comma-separated subset of ot,l2,kl")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--shots", default=None, help="comma-separated shot list")
    p.add_argument("--config", default=None)
    _add_dataset_flags(p)
    _add_stage_flags(p)
    p.set_defaults(func=cmd_ablation)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 4
    except FileNotFoundError as e:
        print(f"error: FileNotFound: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
