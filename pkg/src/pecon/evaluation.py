"""Late fusion of per-modality probabilities, classification metrics, and exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyInputError, ShapeError, UndefinedAUROCError
from .neuralnet import forward

DEFAULT_LAMBDA = 0.375
DEFAULT_GRID = tuple(k / 8 for k in range(9))
MODES = ("ct_only", "ehr_only", "fused")


def fuse(p_ct, p_ehr, lam=DEFAULT_LAMBDA):
    """Convex combination ``lam * p_ct + (1 - lam) * p_ehr``."""
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    p_ct = np.asarray(p_ct, dtype=np.float64)
    p_ehr = np.asarray(p_ehr, dtype=np.float64)
    if lam == 1:
        return p_ct.copy()
    if lam == 0:
        return p_ehr.copy()
    return lam * p_ct + (1 - lam) * p_ehr


def _as_pair(preds, labels):
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if preds.shape != labels.shape:
        raise ShapeError(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        raise EmptyInputError("metrics need at least one prediction")
    return preds, labels.astype(np.int64)


def accuracy(preds, labels, threshold=0.5):
    """Fraction correct; a prediction equal to ``threshold`` counts as positive."""
    preds, labels = _as_pair(preds, labels)
    return float(np.mean((preds >= threshold).astype(np.int64) == labels))


def f1(preds, labels, threshold=0.5):
    """Positive-class F1, ``2TP / (2TP + FP + FN)``, or 0 when undefined."""
    preds, labels = _as_pair(preds, labels)
    hard = preds >= threshold
    tp = int(np.sum(hard & (labels == 1)))
    fp = int(np.sum(hard & (labels == 0)))
    fn = int(np.sum(~hard & (labels == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def auroc(scores, labels):
    """Mann-Whitney AUROC with average ranks for tied scores."""
    scores, labels = _as_pair(scores, labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROCError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------


@dataclass
class PredictionSet:
    patient_ids: list[str]
    p_ct: np.ndarray
    p_ehr: np.ndarray
    labels: np.ndarray
    pe_types: list[str]

    def __post_init__(self):
        n = len(self.patient_ids)
        if not (len(self.p_ct) == len(self.p_ehr) == len(self.labels) == len(self.pe_types) == n):
            raise ShapeError("prediction set columns differ in length")
        for p in (self.p_ct, self.p_ehr):
            if np.any((p < 0) | (p > 1)):
                raise ValueError("probabilities must lie in [0, 1]")


def predict(visual_model, ehr_model, dataset):
    return PredictionSet(
        dataset.patient_ids,
        visual_model.predict_proba(dataset.ct_matrix()),
        ehr_model.predict_proba(dataset.ehr_matrix()),
        dataset.labels(),
        [s.pe_type for s in dataset.samples],
    )


@dataclass
class MetricsRow:
    mode: str
    lam: float | None
    include_subsegmental: bool
    accuracy: float
    f1: float
    auroc: float


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    annotations: list[str] = field(default_factory=list)

    def get(self, mode):
        return next(r for r in self.rows if r.mode == mode)

    def to_csv(self, path=None):
        lines = ["mode,lambda,include_subsegmental,accuracy,f1,auroc"]
        for r in self.rows:
            lam = "" if r.lam is None else repr(float(r.lam))
            lines.append(
                f"{r.mode},{lam},{str(r.include_subsegmental).lower()},"
                f"{r.accuracy!r},{r.f1!r},{r.auroc!r}"
            )
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def metric_triple(probs, labels, threshold=0.5, annotations=None, tag=""):
    """``(accuracy, f1, auroc)``; single-class AUROC becomes NaN plus an annotation."""
    try:
        auc = auroc(probs, labels)
    except UndefinedAUROCError as exc:
        auc = float("nan")
        if annotations is not None:
            annotations.append(f"{tag}: {exc}")
    if annotations is not None and f1(probs, labels, threshold) == 0.0:
        annotations.append(f"{tag}: F1 undefined or zero (no true positives)")
    return accuracy(probs, labels, threshold), f1(probs, labels, threshold), auc


def report_from_predictions(preds, lam=DEFAULT_LAMBDA, include_subsegmental=True, threshold=0.5):
    annotations = []
    keep = np.ones(len(preds.labels), dtype=bool)
    if not include_subsegmental:
        keep = np.array([t != "subsegmental" for t in preds.pe_types], dtype=bool)
    if not keep.any():
        raise EmptyInputError("no test samples left after filtering")
    y = preds.labels[keep]
    streams = {
        "ct_only": (preds.p_ct[keep], None),
        "ehr_only": (preds.p_ehr[keep], None),
        "fused": (fuse(preds.p_ct[keep], preds.p_ehr[keep], lam), lam),
    }
    rows = []
    for mode in MODES:
        probs, row_lam = streams[mode]
        acc, f, auc = metric_triple(probs, y, threshold, annotations, mode)
        rows.append(MetricsRow(mode, row_lam, include_subsegmental, acc, f, auc))
    return MetricsReport(rows, annotations)


def evaluate(visual_model, ehr_model, test, lam=DEFAULT_LAMBDA, include_subsegmental=True, threshold=0.5):
    """CT-only, EHR-only and fused metrics on ``test``.

    With ``include_subsegmental=False`` subsegmental cases are dropped from the
    test view before scoring.
    """
    if len(test) == 0:
        raise EmptyInputError("empty test set")
    return report_from_predictions(predict(visual_model, ehr_model, test), lam, include_subsegmental, threshold)


@dataclass
class SweepRow:
    lam: float
    accuracy: float
    f1: float
    auroc: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    best_lambda: float

    def to_csv(self, path=None):
        lines = ["lambda,accuracy,f1,auroc"]
        lines += [f"{r.lam!r},{r.accuracy!r},{r.f1!r},{r.auroc!r}" for r in self.rows]
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def sweep_lambda(visual_model, ehr_model, val, grid=DEFAULT_GRID, threshold=0.5):
    """Fused metrics for every weight in ``grid``; best is the earliest argmax of F1."""
    grid = [float(v) for v in grid]
    if not grid:
        raise ValueError("empty lambda grid")
    if any(not 0 <= v <= 1 for v in grid):
        raise ValueError("lambda grid values must lie in [0, 1]")
    preds = predict(visual_model, ehr_model, val)
    rows = []
    for lam in grid:
        acc, f, auc = metric_triple(fuse(preds.p_ct, preds.p_ehr, lam), preds.labels, threshold)
        rows.append(SweepRow(lam, acc, f, auc))
    best = max(range(len(rows)), key=lambda k: (rows[k].f1, -k))
    return SweepResult(rows, rows[best].lam)


def export_embeddings(f_c, f_e, dataset, path):
    """Write L2-normalised joint-space features, a CT row then an EHR row per patient."""
    z_c, _ = forward(f_c, dataset.ct_matrix())
    z_e, _ = forward(f_e, dataset.ehr_matrix())
    if f_c.output_transform != "l2_normalized":
        z_c = z_c / np.linalg.norm(z_c, axis=1, keepdims=True)
    if f_e.output_transform != "l2_normalized":
        z_e = z_e / np.linalg.norm(z_e, axis=1, keepdims=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "modality", "label"] + [f"z{j}" for j in range(z_c.shape[1])])
        for k, s in enumerate(dataset.samples):
            w.writerow([s.patient_id, "ct", s.label] + [repr(float(v)) for v in z_c[k]])
            w.writerow([s.patient_id, "ehr", s.label] + [repr(float(v)) for v in z_e[k]])
    return path
