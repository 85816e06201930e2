"""Stage 1 contrastive pretraining of both projection heads and stage 2 fine-tuning.

Datasets passed in are expected to carry EHR features already scaled with
training-split statistics (see :func:`pecon.datamodel.normalize_dataset`).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .datamodel import filter_subsegmental, make_batches
from .neuralnet import (
    Mlp,
    OptimizerState,
    backward,
    forward,
    init_mlp,
    sgd_step,
    step_lr,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune_visual", "finetune_ehr")
STRATEGIES = ("pecon", "infonce", "barlow_twins")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    loss_strategy: str = "pecon"
    base_lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 100
    tau: float = 0.8
    scheduler_step: int = 100
    scheduler_gamma: float = 0.1
    seed: int = 0
    exclude_subsegmental_pretrain: bool = False
    exclude_subsegmental_finetune: bool = False
    direction_weight: float = 0.5
    lambda_bt: float = 0.005

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.loss_strategy not in STRATEGIES:
            raise ValueError(f"loss_strategy must be one of {STRATEGIES}, got {self.loss_strategy!r}")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < (2 if self.stage == "pretrain" else 1):
            raise ValueError("batch_size must be >= 2 for pretraining and >= 1 otherwise")
        if self.scheduler_step < 1:
            raise ValueError("scheduler_step must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def pretrain(cls, **overrides):
        return cls(**{"stage": "pretrain", **overrides})

    @classmethod
    def finetune_visual(cls, **overrides):
        base = dict(stage="finetune_visual", base_lr=0.01, epochs=25, scheduler_step=20)
        return cls(**{**base, **overrides})

    @classmethod
    def finetune_ehr(cls, **overrides):
        base = dict(stage="finetune_ehr", base_lr=0.1, epochs=25, scheduler_step=10)
        return cls(**{**base, **overrides})

    @property
    def excludes_subsegmental(self):
        if self.stage == "pretrain":
            return self.exclude_subsegmental_pretrain
        return self.exclude_subsegmental_finetune


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self):
        return select_best_epoch(self)

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]

    @property
    def lrs(self):
        return [r.lr for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def select_best_epoch(history):
    """Index of the lowest validation loss; the earliest epoch wins ties."""
    if not history.records:
        raise ValueError("empty training history")
    return int(np.argmin(history.val_losses))


# ---------------------------------------------------------------------------
# Stage 1


def contrastive_objective(cfg, z_c, z_e, labels):
    """Batch-size-normalised contrastive loss and gradients for both views.

    The supervised contrastive sum runs over ``2B`` anchors; it is divided by
    ``2B`` here so that the step size does not scale with the batch.
    """
    if cfg.loss_strategy == "pecon":
        res = losses.pecon_loss(np.vstack([z_c, z_e]), np.concatenate([labels, labels]), cfg.tau)
        n = 2 * len(labels)
        return res.value / n, res.grad[: len(labels)] / n, res.grad[len(labels) :] / n
    if cfg.loss_strategy == "infonce":
        res = losses.infonce_loss(z_c, z_e, cfg.tau, cfg.direction_weight)
    else:
        res = losses.barlow_twins_loss(z_c, z_e, cfg.lambda_bt)
    return res.value, res.grad[0], res.grad[1]


def contrastive_loss_on(f_c, f_e, dataset, cfg):
    """Mean per-batch contrastive loss over ``dataset`` in fixed order, without updates.

    Batches of fewer than two patients are skipped; the mean is weighted by
    batch size.
    """
    x_c, x_e, y = dataset.ct_matrix(), dataset.ehr_matrix(), dataset.labels()
    total, count = 0.0, 0
    for idx in make_batches(dataset, cfg.batch_size, shuffle=False):
        if len(idx) < 2:
            continue
        z_c, _ = forward(f_c, x_c[idx])
        z_e, _ = forward(f_e, x_e[idx])
        value, _, _ = contrastive_objective(cfg, z_c, z_e, y[idx])
        total += value * len(idx)
        count += len(idx)
    return total / count if count else float("nan")


def pretrain(train, val, f_c, f_e, cfg):
    """Jointly train both projection heads with ``cfg.loss_strategy``.

    ``f_c`` and ``f_e`` are updated in place; the returned heads are copies
    taken at the epoch with the lowest validation loss.
    """
    if cfg.stage != "pretrain":
        raise ValueError(f"pretrain() needs a pretrain config, got stage {cfg.stage!r}")
    if f_c.in_dim != train.d or f_e.in_dim != train.D_e:
        raise ValueError(
            f"head input widths ({f_c.in_dim}, {f_e.in_dim}) do not match data ({train.d}, {train.D_e})"
        )
    if f_c.out_dim != f_e.out_dim:
        raise ValueError("projection heads must share an output width")
    if cfg.exclude_subsegmental_pretrain:
        train = filter_subsegmental(train)
    x_c, x_e, y = train.ct_matrix(), train.ehr_matrix(), train.labels()
    params = f_c.params() + f_e.params()
    state = OptimizerState.for_params(params, cfg.momentum, cfg.base_lr)

    history = TrainHistory()
    best = (np.inf, f_c.copy(), f_e.copy())
    for epoch in range(cfg.epochs):
        state.current_lr = step_lr(epoch, cfg.base_lr, cfg.scheduler_step, cfg.scheduler_gamma)
        batch_losses = []
        for idx in make_batches(train, cfg.batch_size, cfg.seed, shuffle=True, drop_last=True, epoch=epoch):
            z_c, cache_c = forward(f_c, x_c[idx])
            z_e, cache_e = forward(f_e, x_e[idx])
            value, g_c, g_e = contrastive_objective(cfg, z_c, z_e, y[idx])
            grads_c, _ = backward(f_c, cache_c, g_c)
            grads_e, _ = backward(f_e, cache_e, g_e)
            sgd_step(params, grads_c + grads_e, state)
            batch_losses.append(value)
        if not batch_losses:
            raise ValueError(f"no complete batch of {cfg.batch_size} in {len(train)} training samples")
        val_loss = contrastive_loss_on(f_c, f_e, val, cfg)
        history.records.append(EpochRecord(epoch, float(np.mean(batch_losses)), val_loss, state.current_lr))
        log.debug("pretrain epoch %d train %.5f val %.5f", epoch, history.records[-1].train_loss, val_loss)
        if val_loss < best[0]:
            best = (val_loss, f_c.copy(), f_e.copy())
    return best[1], best[2], history


# ---------------------------------------------------------------------------
# Stage 2


@dataclass
class Classifier:
    """Projection head followed by a single linear logit unit."""

    head: Mlp
    unit: Mlp
    modality: str = "visual"

    def params(self):
        return self.head.params() + self.unit.params()

    def copy(self):
        return Classifier(self.head.copy(), self.unit.copy(), self.modality)

    def logits(self, x):
        z, _ = forward(self.head, x)
        out, _ = forward(self.unit, z)
        return out[:, 0]

    def predict_proba(self, x):
        return 1.0 / (1.0 + np.exp(-self.logits(x)))


def make_classifier(head, modality, seed=0):
    stream = {"visual": 10, "ehr": 11}[modality]
    return Classifier(head.copy(), init_mlp((head.out_dim, 1), "linear", seed, stream), modality)


def modality_inputs(dataset, modality):
    return dataset.ct_matrix() if modality == "visual" else dataset.ehr_matrix()


def bce_loss_on(model, dataset):
    if len(dataset) == 0:
        return float("nan")
    x = modality_inputs(dataset, model.modality)
    return losses.binary_cross_entropy(model.logits(x), dataset.labels()).value


def finetune_head(pretrained_head, train, val, cfg):
    """Append a logit unit to ``pretrained_head`` and train the whole stack with BCE.

    The input head is not modified. Returns the classifier from the epoch with
    the lowest validation loss, and the history.
    """
    if cfg.stage == "pretrain":
        raise ValueError("finetune_head() needs a finetune_visual or finetune_ehr config")
    modality = "visual" if cfg.stage == "finetune_visual" else "ehr"
    width = train.d if modality == "visual" else train.D_e
    if pretrained_head.in_dim != width:
        raise ValueError(f"{modality} head expects {pretrained_head.in_dim} inputs, data has {width}")
    if cfg.exclude_subsegmental_finetune:
        train = filter_subsegmental(train)

    model = make_classifier(pretrained_head, modality, cfg.seed)
    x, y = modality_inputs(train, modality), train.labels()
    params = model.params()
    state = OptimizerState.for_params(params, cfg.momentum, cfg.base_lr)

    history = TrainHistory()
    best = (np.inf, model.copy())
    for epoch in range(cfg.epochs):
        state.current_lr = step_lr(epoch, cfg.base_lr, cfg.scheduler_step, cfg.scheduler_gamma)
        batch_losses = []
        for idx in make_batches(train, cfg.batch_size, cfg.seed, shuffle=True, epoch=epoch):
            z, cache_h = forward(model.head, x[idx])
            logit, cache_u = forward(model.unit, z)
            res = losses.binary_cross_entropy(logit[:, 0], y[idx])
            grads_u, g_z = backward(model.unit, cache_u, res.grad[:, None])
            grads_h, _ = backward(model.head, cache_h, g_z)
            sgd_step(params, grads_h + grads_u, state)
            batch_losses.append(res.value)
        val_loss = bce_loss_on(model, val)
        history.records.append(EpochRecord(epoch, float(np.mean(batch_losses)), val_loss, state.current_lr))
        if val_loss < best[0]:
            best = (val_loss, model.copy())
    return best[1], history
