"""Three-stage training pipeline plus evaluation and ablation runners.

Stage 1 (``base_train``) fits a cosine classifier on abundant base-class
features. Stage 2 (``train_generator``) freezes that classifier and trains
the conditional generator with a clustered transport loss: each step
synthesizes T features per real feature, groups them into K centroids,
and transports the real batch onto the centroid mass distribution under
cosine cost. Stage 3 (``finetune``) freezes the generator and fine-tunes
the classifier on K-shot data of all classes, mixing real features with
generated ones in the same update.

Loss bookkeeping: the transport term is already scale-free (the plan sums
to one), so the stage-2 classifier term is averaged over synthetic
features. In stage 3 both terms are normalized by the real batch size, so
with multiplier T each real feature's T synthetic descendants enter at
combined weight alpha * T relative to that real feature.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import ClusterResult, _sq_dists, cluster_mass, kmeans
from .data import LabeledFeatureSet, kshot_sample, make_synthetic_dataset
from .errors import (InsufficientData, MissingNovelClasses, ShapeMismatch,
                     UnknownClassInTestSet)
from .nets import (ClassifierParams, GeneratorParams, SgdConfig,
                   cls_forward, cls_loss_and_grad, extend_classifier,
                   gen_backward, gen_forward, init_classifier,
                   init_generator, sgd_step, update_prototypes)
from .numerics import cost_matrix
from .rng import RngState
from .transport import SinkhornConfig, ot_loss, ot_loss_grad_centroids, sinkhorn

logger = logging.getLogger("otsynth.pipeline")

GEN_LOSS_VARIANTS = ("ot", "l2", "kl")


@dataclass
class StageConfig:
    """Hyper-parameters for all three stages of one run."""

    alpha: float = 0.01            # stage-3 balance of synthetic vs real loss
    beta: float = 0.1              # stage-2 balance of classifier vs transport loss
    t_gen: int = 16                # synthetic features per real, stage 2
    t_finetune: int = 512          # synthetic features per real, stage 3
    k_centroids: int = 32
    batch_real: int = 64
    base_iterations: int = 500
    gen_iterations: int = 1000
    finetune_iterations: int = 300
    kmeans_max_iters: int = 25
    cluster_per_class: bool = False   # ablation: cluster each class separately
    freeze_base_rows: bool = True
    scale: float = 20.0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    sgd_base: SgdConfig = field(
        default_factory=lambda: SgdConfig(0.05, momentum=0.9))
    sgd_gen: SgdConfig = field(
        default_factory=lambda: SgdConfig(0.02, momentum=0.9,
                                          schedule=((250, 0.1), (750, 0.1))))
    sgd_finetune: SgdConfig = field(
        default_factory=lambda: SgdConfig(0.02, momentum=0.9))
    seed: int = 0

    def __post_init__(self):
        if min(self.t_gen, self.t_finetune, self.k_centroids, self.batch_real) < 1:
            raise ValueError("t_gen, t_finetune, k_centroids, batch_real must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.k_centroids > self.batch_real * self.t_gen:
            raise ValueError("k_centroids exceeds the synthetic batch size")
        if self.k_centroids > self.batch_real * self.t_finetune:
            raise ValueError("k_centroids exceeds the fine-tune synthetic count")


@dataclass
class EvalReport:
    """Per-class accuracy with base/novel/overall macro means."""

    per_class_accuracy: dict
    base_mean: float | None
    novel_mean: float | None
    overall_mean: float
    shots: int | None = None
    seed: int | None = None

    def to_doc(self) -> dict:
        return {
            "per_class_accuracy": {str(k): v
                                   for k, v in sorted(self.per_class_accuracy.items())},
            "base_mean": self.base_mean,
            "novel_mean": self.novel_mean,
            "overall_mean": self.overall_mean,
            "shots": self.shots,
            "seed": self.seed,
        }


def _class_count_check(fs: LabeledFeatureSet, minimum: int) -> None:
    present = np.unique(fs.labels)
    if present.size < 2:
        raise InsufficientData("need at least 2 classes with samples")
    for cid in present:
        if fs.indices_of(int(cid)).size < minimum:
            raise InsufficientData(f"class {cid} has fewer than {minimum} samples")


def _accuracy(cls: ClassifierParams, X: np.ndarray, rows: np.ndarray) -> float:
    logits = cls_forward(cls, X)
    return float(np.mean(np.argmax(logits, axis=1) == rows))


def base_train(base_set: LabeledFeatureSet, cfg: StageConfig,
               rng: RngState | None = None) -> ClassifierParams:
    """Stage 1: mini-batch cross-entropy training of the cosine classifier
    over base classes only."""
    novel = set(base_set.novel_ids)
    if set(np.unique(base_set.labels)) & novel:
        raise InsufficientData("base_train set must contain base classes only")
    _class_count_check(base_set, 2)
    if rng is None:
        rng = RngState(cfg.seed).split(1)

    class_ids = base_set.base_ids
    cls = init_classifier(base_set.dim, class_ids, rng.split(0), scale=cfg.scale)
    X = base_set.features64()
    rows = cls.rows_of(base_set.labels)
    n = X.shape[0]
    bsize = min(cfg.batch_real, n)
    batch_rng = rng.split(1)

    state = None
    for step in range(cfg.base_iterations):
        idx = batch_rng.choice(n, bsize, replace=False)
        _, dW, _ = cls_loss_and_grad(cls, X[idx], rows[idx])
        cls, state = update_prototypes(cls, dW, cfg.sgd_base, state, step)

    acc = _accuracy(cls, X, rows)
    if acc < 0.95:
        logger.warning("base training accuracy %.3f below 0.95; "
                       "classes may not be separable", acc)
    return cls


def _freeze_all(cls: ClassifierParams) -> ClassifierParams:
    return ClassifierParams(cls.prototypes.copy(), scale=cls.scale,
                            frozen_rows=frozenset(range(cls.n_classes)),
                            class_ids=cls.class_ids)


def _cluster_batch(Xhat: np.ndarray, rows: np.ndarray, cfg: StageConfig,
                   rng: RngState, step: int):
    """Cluster the synthetic batch; per-class mode splits K across classes."""
    if not cfg.cluster_per_class:
        return kmeans(Xhat, cfg.k_centroids, cfg.kmeans_max_iters,
                      rng.split(step))
    present = np.unique(rows)
    M = Xhat.shape[0]
    centroids, counts = [], []
    for j, row in enumerate(present):
        members = Xhat[rows == row]
        k_c = max(1, int(round(cfg.k_centroids * members.shape[0] / M)))
        res = kmeans(members, min(k_c, members.shape[0]),
                     cfg.kmeans_max_iters, rng.split(step, int(row)))
        centroids.append(res.centroids)
        counts.append(res.counts)
    centroids = np.vstack(centroids)
    # assignment indices are only used for gradient routing; rebuild them
    # against the merged centroid list
    assign = np.argmin(_sq_dists(Xhat, centroids), axis=1)
    counts = np.bincount(assign, minlength=centroids.shape[0])
    return ClusterResult(centroids, assign, counts,
                         counts / M, float("nan"), [])


def _gen_loss_l2(X_cond: np.ndarray, Xhat: np.ndarray):
    diff = Xhat - X_cond
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    return loss, 2.0 * diff / Xhat.shape[0]


def _gen_loss_kl(X_real: np.ndarray, Xhat: np.ndarray):
    """KL between diagonal-Gaussian moment fits, synthetic against real."""
    floor = 1e-8
    mu_r = X_real.mean(axis=0)
    var_r = np.maximum(X_real.var(axis=0), floor)
    mu_s = Xhat.mean(axis=0)
    var_s = np.maximum(Xhat.var(axis=0), floor)
    loss = 0.5 * float(np.sum(var_s / var_r + (mu_s - mu_r) ** 2 / var_r
                              - 1.0 + np.log(var_r / var_s)))
    M = Xhat.shape[0]
    grad = ((mu_s - mu_r) / var_r / M
            + (Xhat - mu_s) * (1.0 / var_r - 1.0 / var_s) / M)
    return loss, grad


def train_generator(frozen_cls: ClassifierParams, base_set: LabeledFeatureSet,
                    cfg: StageConfig, rng: RngState | None = None,
                    loss_variant: str = "ot",
                    init_gen: GeneratorParams | None = None):
    """Stage 2: train the conditional generator against the frozen classifier.

    Per step: sample ``batch_real`` real features, synthesize
    ``t_gen`` features from each, cluster them to ``k_centroids``
    centroids, and transport the real batch onto the cluster-mass
    distribution under cosine cost. Transport gradients reach the
    generator through the centroids, split equally among each cluster's
    members (the mean's exact Jacobian with assignments held fixed).

    Returns (generator, step records); each record carries the step index
    and loss components.
    """
    if loss_variant not in GEN_LOSS_VARIANTS:
        raise ValueError(f"loss_variant must be one of {GEN_LOSS_VARIANTS}")
    if base_set.n_samples == 0:
        raise InsufficientData("empty base set")
    if rng is None:
        rng = RngState(cfg.seed).split(2)

    frozen = _freeze_all(frozen_cls)
    gen = init_gen.copy() if init_gen is not None else \
        init_generator(base_set.dim, rng.split(0))
    X_all = base_set.features64()
    rows_all = frozen.rows_of(base_set.labels)
    n = X_all.shape[0]
    bsize = min(cfg.batch_real, n)
    d = base_set.dim

    batch_rng = rng.split(1)
    noise_rng = rng.split(2)
    cluster_rng = rng.split(3)

    params = gen.as_list()
    state = None
    records = []
    for step in range(cfg.gen_iterations):
        idx = batch_rng.choice(n, bsize, replace=False)
        X = X_all[idx]
        rows = rows_all[idx]
        X_rep = np.repeat(X, cfg.t_gen, axis=0)
        rows_rep = np.repeat(rows, cfg.t_gen)
        Z = noise_rng.standard_normal(X_rep.shape)
        Xhat, cache = gen_forward(gen, X_rep, Z)

        diag = {}
        if loss_variant == "l2":
            loss_main, upstream = _gen_loss_l2(X_rep, Xhat)
        elif loss_variant == "kl":
            loss_main, upstream = _gen_loss_kl(X, Xhat)
        else:
            clusters = _cluster_batch(Xhat, rows_rep, cfg, cluster_rng, step)
            r = np.full(bsize, 1.0 / bsize)
            c = cluster_mass(clusters.counts)
            C = cost_matrix(X, clusters.centroids)
            plan = sinkhorn(C, r, c, cfg.sinkhorn)
            if not plan.converged:
                logger.warning("NonConvergentSinkhorn at step %d "
                               "(%d iterations)", step, plan.iterations_used)
            loss_main = ot_loss(plan, C)
            g_cent = ot_loss_grad_centroids(X, clusters.centroids, plan)
            upstream = (g_cent[clusters.assignment]
                        / clusters.counts[clusters.assignment][:, None])
            diag["sinkhorn_converged"] = plan.converged
            diag["sinkhorn_iterations"] = plan.iterations_used

        if cfg.beta > 0:
            loss_syn, _, g_syn = cls_loss_and_grad(frozen, Xhat, rows_rep)
            upstream = upstream + cfg.beta * g_syn
        else:
            loss_syn = 0.0

        w_grads, b_grads = gen_backward(gen, cache, upstream)
        params, state = sgd_step(params, w_grads + b_grads, cfg.sgd_gen,
                                 state, step)
        gen = gen.replace_list(params)
        records.append({"step": step, "loss_main": loss_main,
                        "loss_syn": loss_syn,
                        "loss_gen": loss_main + cfg.beta * loss_syn,
                        "variant": loss_variant, **diag})
    return gen, records


def finetune(frozen_gen: GeneratorParams | None, cls: ClassifierParams,
             kshot_set: LabeledFeatureSet, cfg: StageConfig,
             rng: RngState | None = None,
             alpha: float | None = None) -> ClassifierParams:
    """Stage 3: extend the classifier with novel prototypes and fine-tune it
    on K-shot data, mixing real and synthetic features in each update.

    With ``alpha == 0`` the generator is never invoked (and may be None);
    the result is then bitwise identical to a generator-free fine-tune
    under the same seed. Novel prototypes are initialized from the
    normalized per-class shot means; base rows are frozen when
    ``cfg.freeze_base_rows`` is set.
    """
    if alpha is None:
        alpha = cfg.alpha
    if alpha > 0 and frozen_gen is None:
        raise ValueError("alpha > 0 requires a generator")
    if rng is None:
        rng = RngState(cfg.seed).split(3)

    counts = {ci.id: kshot_set.indices_of(ci.id).size for ci in kshot_set.roster}
    missing = [cid for cid in kshot_set.novel_ids if counts[cid] == 0]
    if missing:
        raise MissingNovelClasses(f"novel classes without shots: {missing}")
    distinct = sorted(set(counts.values()))
    if len(distinct) != 1:
        raise InsufficientData(f"unequal shot counts per class: {distinct}")

    novel_ids = kshot_set.novel_ids
    if tuple(cls.class_ids) != tuple(kshot_set.base_ids):
        raise ShapeMismatch("classifier rows must match the base class roster")
    init_feats = [kshot_set.features64()[kshot_set.indices_of(cid)]
                  for cid in novel_ids]
    ext = extend_classifier(cls, novel_ids, init_features=init_feats,
                            freeze_base=cfg.freeze_base_rows)

    X = kshot_set.features64()
    rows = ext.rows_of(kshot_set.labels)
    n = X.shape[0]
    bsize = min(cfg.batch_real, n)
    batch_rng = rng.split(1)
    noise_rng = rng.split(2)

    state = None
    for step in range(cfg.finetune_iterations):
        idx = batch_rng.choice(n, bsize, replace=False)
        _, dW, _ = cls_loss_and_grad(ext, X[idx], rows[idx])
        if alpha > 0:
            X_rep = np.repeat(X[idx], cfg.t_finetune, axis=0)
            rows_rep = np.repeat(rows[idx], cfg.t_finetune)
            Z = noise_rng.standard_normal(X_rep.shape)
            Xhat, _ = gen_forward(frozen_gen, X_rep, Z)
            _, dW_syn, _ = cls_loss_and_grad(ext, Xhat, rows_rep)
            # both terms normalized by the real batch: alpha weights each
            # real feature's T descendants jointly
            dW = dW + alpha * cfg.t_finetune * dW_syn
        ext, state = update_prototypes(ext, dW, cfg.sgd_finetune, state, step)
    return ext


def evaluate(cls: ClassifierParams, test_set: LabeledFeatureSet,
             shots: int | None = None, seed: int | None = None) -> EvalReport:
    """Argmax-of-logits accuracy per class, plus base/novel/overall means."""
    present = [int(c) for c in np.unique(test_set.labels)]
    known = set(cls.class_ids)
    unknown = [c for c in present if c not in known]
    if unknown:
        raise UnknownClassInTestSet(f"classifier has no rows for {unknown}")

    logits = cls_forward(cls, test_set.features64())
    pred_rows = np.argmax(logits, axis=1)
    pred_ids = np.asarray(cls.class_ids)[pred_rows]

    per_class = {}
    for cid in present:
        idx = test_set.indices_of(cid)
        per_class[cid] = float(np.mean(pred_ids[idx] == cid))

    def group_mean(ids):
        vals = [per_class[c] for c in ids if c in per_class]
        return float(np.mean(vals)) if vals else None

    return EvalReport(
        per_class_accuracy=per_class,
        base_mean=group_mean(test_set.base_ids),
        novel_mean=group_mean(test_set.novel_ids),
        overall_mean=float(np.mean(list(per_class.values()))),
        shots=shots, seed=seed)


# --- generator-loss ablation --------------------------------------------------

ABLATION_CSV_HEADER = "variant,seed,shots,base_mean,novel_mean,overall_mean"


def run_ablation_genloss(dataset_spec, cfg: StageConfig, shots_list,
                         seeds, variants=GEN_LOSS_VARIANTS):
    """Compare generator loss variants end to end.

    For each seed: regenerate the dataset, train the base classifier once,
    then per variant train a generator, fine-tune, and evaluate at each
    shot count. Returns one row dict per (variant, seed, shots).
    """
    for v in variants:
        if v not in GEN_LOSS_VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    rows = []
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        spec = replace(dataset_spec, seed=seed)
        base_set, pool, test = make_synthetic_dataset(spec)
        root = RngState(seed)
        cls = base_train(base_set, run_cfg, rng=root.split(1))
        for variant in variants:
            gen, _ = train_generator(cls, base_set, run_cfg,
                                     rng=root.split(2),
                                     loss_variant=variant)
            for shots in shots_list:
                kshot = kshot_sample(pool, shots, root.split(4, shots))
                tuned = finetune(gen, cls, kshot, run_cfg,
                                 rng=root.split(3, shots))
                report = evaluate(tuned, test, shots=shots, seed=seed)
                rows.append({
                    "variant": variant, "seed": seed, "shots": shots,
                    "base_mean": report.base_mean,
                    "novel_mean": report.novel_mean,
                    "overall_mean": report.overall_mean,
                })
    return rows


def ablation_rows_to_csv(rows) -> str:
    lines = [ABLATION_CSV_HEADER]
    for r in rows:
        lines.append(f"{r['variant']},{r['seed']},{r['shots']},"
                     f"{r['base_mean']:.6f},{r['novel_mean']:.6f},"
                     f"{r['overall_mean']:.6f}")
    return "\n".join(lines) + "\n"


def ablation_rows_to_table(rows) -> str:
    """Plain-text aligned table of the ablation results."""
    header = ("variant", "seed", "shots", "base_mean", "novel_mean", "overall_mean")
    cells = [header]
    for r in rows:
        cells.append((r["variant"], str(r["seed"]), str(r["shots"]),
                      f"{r['base_mean']:.4f}", f"{r['novel_mean']:.4f}",
                      f"{r['overall_mean']:.4f}"))
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
             for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
