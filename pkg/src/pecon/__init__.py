"""Supervised contrastive alignment of CT and EHR embeddings with late fusion."""

from .datamodel import (
    Dataset,
    PatientSample,
    SyntheticConfig,
    average_subvolumes,
    filter_subsegmental,
    generate_synthetic,
    load_manifest,
    make_batches,
    normalize_ehr,
    synthesize,
)
from .evaluation import accuracy, auroc, evaluate, export_embeddings, f1, fuse, sweep_lambda
from .losses import barlow_twins_loss, binary_cross_entropy, infonce_loss, pecon_loss
from .neuralnet import Mlp, backward, forward, init_mlp, l2_normalize, sgd_step, step_lr
from .training import TrainConfig, finetune_head, pretrain, select_best_epoch

__version__ = "0.1.0"
