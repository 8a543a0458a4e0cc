"""Synthetic-feature augmentation for few-shot classification.

A conditional generator is trained on abundant base-class features with a
clustered entropic-transport loss against K-means++ centroids of its own
outputs, then frozen and used to augment K-shot fine-tuning of a cosine
classifier on novel classes.
"""

from . import errors
from .clustering import ClusterResult, cluster_mass, kmeans, kmeans_pp_init
from .data import (ClassInfo, DatasetSpec, LabeledFeatureSet, kshot_sample,
                   make_synthetic_dataset, read_features, write_features)
from .experiment import (ExperimentConfig, reference_dataset_spec,
                         reference_stage_config, run_experiment, summarize)
from .nets import (ClassifierParams, GeneratorParams, SgdConfig,
                   cls_forward, cls_loss_and_grad, extend_classifier,
                   gen_backward, gen_forward, init_classifier, init_generator,
                   load_checkpoint, save_checkpoint, sgd_step,
                   update_prototypes)
from .numerics import (cosine_distance, cost_matrix, cross_entropy,
                       gaussian_sample, softmax)
from .pipeline import (EvalReport, StageConfig, base_train, evaluate,
                       finetune, run_ablation_genloss, train_generator)
from .rng import RngState
from .transport import (SinkhornConfig, TransportPlan, exact_ot_small,
                        ot_loss, ot_loss_grad_centroids, sinkhorn)

__version__ = "0.1.0"

__all__ = [
    "ClassInfo", "ClassifierParams", "ClusterResult", "DatasetSpec",
    "EvalReport", "ExperimentConfig", "GeneratorParams", "LabeledFeatureSet",
    "RngState", "SgdConfig", "SinkhornConfig", "StageConfig", "TransportPlan",
    "base_train", "cls_forward", "cls_loss_and_grad", "cluster_mass",
    "cosine_distance", "cost_matrix", "cross_entropy", "errors", "evaluate",
    "exact_ot_small", "extend_classifier", "finetune", "gaussian_sample",
    "gen_backward", "gen_forward", "init_classifier", "init_generator",
    "kmeans", "kmeans_pp_init", "kshot_sample", "load_checkpoint",
    "make_synthetic_dataset", "ot_loss", "ot_loss_grad_centroids",
    "read_features", "reference_dataset_spec", "reference_stage_config",
    "run_ablation_genloss", "run_experiment", "save_checkpoint", "sgd_step",
    "sinkhorn", "softmax", "summarize", "train_generator",
    "update_prototypes", "write_features",
]
