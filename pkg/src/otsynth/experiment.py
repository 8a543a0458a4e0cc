"""Multi-seed paired experiment: K-shot fine-tuning with and without
synthetic-feature augmentation.

For every seed the dataset is redrawn, the base classifier and the
generator are trained once, and each shot count is fine-tuned twice from
the same state: once with alpha = 0 (the generator is never invoked) and
once with the configured alpha. Rows pair up by (seed, shots), so the
per-seed novel-accuracy deltas isolate the effect of augmentation.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from .data import DatasetSpec, kshot_sample, make_synthetic_dataset
from .pipeline import StageConfig, base_train, evaluate, finetune, train_generator
from .rng import RngState

VARIANT_BASELINE = "baseline"
VARIANT_AUGMENTED = "augmented"

EXPERIMENT_CSV_HEADER = "variant,seed,shots,base_mean,novel_mean,overall_mean"


def reference_dataset_spec(seed: int = 0) -> DatasetSpec:
    """Desk-scale dataset with moderate class overlap: 15 base + 5 novel
    classes in 32 dimensions, 200 training samples per base class."""
    return DatasetSpec(dim=32, base_class_count=15, novel_class_count=5,
                       mean_radius=1.0, cov_scale=0.09,
                       train_per_class=200, pool_per_class=30,
                       test_per_class=100, seed=seed)


def reference_stage_config(seed: int = 0) -> StageConfig:
    """Stage defaults used by the reference experiment."""
    return StageConfig(seed=seed)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=reference_dataset_spec)
    stage: StageConfig = field(default_factory=reference_stage_config)
    shots: tuple = (1, 2, 5)
    seeds: tuple = tuple(range(10))
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if any(s < 1 for s in self.shots):
            raise ValueError("shots must be >= 1")
        self.shots = tuple(int(s) for s in self.shots)
        self.seeds = tuple(int(s) for s in self.seeds)


def run_seed(cfg: ExperimentConfig, seed: int) -> list:
    """All rows for one seed: both variants at every shot count."""
    stage = replace(cfg.stage, seed=seed)
    spec = replace(cfg.dataset, seed=seed)
    base_set, pool, test = make_synthetic_dataset(spec)
    root = RngState(seed)

    cls = base_train(base_set, stage, rng=root.split(1))
    gen, _ = train_generator(cls, base_set, stage, rng=root.split(2))

    rows = []
    for shots in cfg.shots:
        kshot = kshot_sample(pool, shots, root.split(4, shots))
        for variant in (VARIANT_BASELINE, VARIANT_AUGMENTED):
            if variant == VARIANT_BASELINE:
                tuned = finetune(None, cls, kshot, stage,
                                 rng=root.split(3, shots), alpha=0.0)
            else:
                tuned = finetune(gen, cls, kshot, stage,
                                 rng=root.split(3, shots))
            report = evaluate(tuned, test, shots=shots, seed=seed)
            rows.append({
                "variant": variant, "seed": seed, "shots": shots,
                "base_mean": report.base_mean,
                "novel_mean": report.novel_mean,
                "overall_mean": report.overall_mean,
            })
    return rows


def _row_to_csv(r: dict) -> str:
    return (f"{r['variant']},{r['seed']},{r['shots']},"
            f"{r['base_mean']:.6f},{r['novel_mean']:.6f},"
            f"{r['overall_mean']:.6f}")


def run_experiment(cfg: ExperimentConfig, csv_sink=None) -> list:
    """Run every (seed, shots, variant) cell; returns the row list.

    ``csv_sink``, when given, receives one CSV line at a time (header
    first) and is flushed as cells complete, so an interrupted run leaves
    a valid prefix. Rows arrive in deterministic (seed, shots, variant)
    order regardless of worker count.
    """
    if csv_sink is not None:
        csv_sink(EXPERIMENT_CSV_HEADER)
    rows = []

    def consume(seed_rows):
        for r in seed_rows:
            rows.append(r)
            if csv_sink is not None:
                csv_sink(_row_to_csv(r))

    if cfg.workers <= 1:
        for seed in cfg.seeds:
            consume(run_seed(cfg, seed))
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(run_seed, cfg, seed) for seed in cfg.seeds]
            for fut in futures:        # submission order keeps output stable
                consume(fut.result())
    return rows


def summarize(rows, shots_list=None, seeds=None) -> dict:
    """Aggregate rows into per-shot means, deviations, and paired deltas."""
    if shots_list is None:
        shots_list = sorted({r["shots"] for r in rows})
    if seeds is None:
        seeds = sorted({r["seed"] for r in rows})
    by_key = {(r["variant"], r["seed"], r["shots"]): r for r in rows}

    summary = {"shots": {}}
    for shots in shots_list:
        cell = {}
        for variant in (VARIANT_BASELINE, VARIANT_AUGMENTED):
            novel = [by_key[(variant, s, shots)]["novel_mean"] for s in seeds
                     if (variant, s, shots) in by_key]
            base = [by_key[(variant, s, shots)]["base_mean"] for s in seeds
                    if (variant, s, shots) in by_key]
            if not novel:
                continue
            cell[variant] = {
                "novel_mean": float(np.mean(novel)),
                "novel_std": float(np.std(novel)),
                "base_mean": float(np.mean(base)),
                "base_std": float(np.std(base)),
                "n_seeds": len(novel),
            }
        deltas = [by_key[(VARIANT_AUGMENTED, s, shots)]["novel_mean"]
                  - by_key[(VARIANT_BASELINE, s, shots)]["novel_mean"]
                  for s in seeds
                  if (VARIANT_AUGMENTED, s, shots) in by_key
                  and (VARIANT_BASELINE, s, shots) in by_key]
        base_deltas = [by_key[(VARIANT_AUGMENTED, s, shots)]["base_mean"]
                       - by_key[(VARIANT_BASELINE, s, shots)]["base_mean"]
                       for s in seeds
                       if (VARIANT_AUGMENTED, s, shots) in by_key
                       and (VARIANT_BASELINE, s, shots) in by_key]
        if deltas:
            cell["paired"] = {
                "novel_delta_mean": float(np.mean(deltas)),
                "novel_delta_std": float(np.std(deltas)),
                "novel_deltas": [float(d) for d in deltas],
                "base_delta_mean": float(np.mean(base_deltas)),
                "n_pairs": len(deltas),
            }
        summary["shots"][str(shots)] = cell
    return summary


def summary_to_table(summary: dict) -> str:
    """Aligned text rendering of a summary dict."""
    lines = [f"{'shots':>5}  {'variant':<10} {'novel acc':>16} {'base acc':>16}"]
    lines.append("-" * len(lines[0]))
    for shots, cell in summary["shots"].items():
        for variant in (VARIANT_BASELINE, VARIANT_AUGMENTED):
            if variant not in cell:
                continue
            v = cell[variant]
            lines.append(
                f"{shots:>5}  {variant:<10}"
                f" {v['novel_mean']:.4f} ± {v['novel_std']:.4f}"
                f" {v['base_mean']:.4f} ± {v['base_std']:.4f}")
        if "paired" in cell:
            p = cell["paired"]
            lines.append(
                f"{shots:>5}  {'delta':<10}"
                f" {p['novel_delta_mean']:+.4f} (novel, paired)"
                f" {p['base_delta_mean']:+.4f} (base)")
    return "\n".join(lines) + "\n"


def experiment_doc(cfg: ExperimentConfig, rows, summary) -> dict:
    """Full machine-readable result bundle with the effective config echoed."""
    return {
        "format": "otsynth-experiment",
        "version": 1,
        "config": {
            "dataset": asdict(cfg.dataset),
            "stage": _stage_doc(cfg.stage),
            "shots": list(cfg.shots),
            "seeds": list(cfg.seeds),
            "workers": cfg.workers,
        },
        "rows": rows,
        "summary": summary,
    }


def _stage_doc(stage: StageConfig) -> dict:
    doc = asdict(stage)
    doc["sinkhorn"] = asdict(stage.sinkhorn)
    for key in ("sgd_base", "sgd_gen", "sgd_finetune"):
        sub = asdict(getattr(stage, key))
        sub["schedule"] = [list(sm) for sm in sub["schedule"]]
        doc[key] = sub
    return doc


def dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
