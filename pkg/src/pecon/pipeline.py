"""End-to-end runs: scale EHR, pretrain, fine-tune both heads, fuse and score."""

from __future__ import annotations

from dataclasses import dataclass

from .datamodel import fit_ehr_stats, normalize_dataset
from .evaluation import DEFAULT_GRID, MetricsReport, SweepResult, evaluate, sweep_lambda
from .neuralnet import Mlp, init_mlp
from .training import Classifier, TrainHistory, finetune_head, pretrain


def prepare_splits(dataset):
    """Return ``(train, val, test)`` with EHR scaled by training-split min/max."""
    train = dataset.split("train")
    stats = fit_ehr_stats(train)
    return tuple(normalize_dataset(dataset.split(s), stats) for s in ("train", "val", "test"))


def init_heads(model_cfg, d, D_e, seed):
    """Fresh CT and EHR projection heads with L2-normalised outputs."""
    f_c = init_mlp(model_cfg.visual_dims(d), "l2_normalized", seed, stream=0)
    f_e = init_mlp(model_cfg.ehr_dims(D_e), "l2_normalized", seed, stream=1)
    return f_c, f_e


@dataclass
class PipelineResult:
    f_c: Mlp
    f_e: Mlp
    pretrain_history: TrainHistory | None
    visual: Classifier
    ehr: Classifier
    visual_history: TrainHistory
    ehr_history: TrainHistory
    sweep: SweepResult
    lam: float
    reports: list[MetricsReport]


def run_pipeline(dataset, cfg, from_scratch=False):
    """Run both stages on ``dataset`` under a :class:`pecon.config.RunConfig`.

    With ``from_scratch`` the pretraining stage is skipped and fine-tuning
    starts from the same initial heads pretraining would have started from.
    When ``cfg.eval.lam`` is None the fusion weight is the best one on the
    validation sweep.
    """
    train, val, test = prepare_splits(dataset)
    f_c, f_e = init_heads(cfg.model, dataset.d, dataset.D_e, cfg.pretrain.seed)
    history = None
    if not from_scratch:
        f_c, f_e, history = pretrain(train, val, f_c, f_e, cfg.pretrain)
    visual, visual_hist = finetune_head(f_c, train, val, cfg.finetune_visual)
    ehr, ehr_hist = finetune_head(f_e, train, val, cfg.finetune_ehr)
    sweep = sweep_lambda(visual, ehr, val, cfg.eval.grid or DEFAULT_GRID, cfg.eval.threshold)
    lam = sweep.best_lambda if cfg.eval.lam is None else cfg.eval.lam
    reports = [
        evaluate(visual, ehr, test, lam, include, cfg.eval.threshold) for include in cfg.eval.include_subsegmental
    ]
    return PipelineResult(f_c, f_e, history, visual, ehr, visual_hist, ehr_hist, sweep, lam, reports)
