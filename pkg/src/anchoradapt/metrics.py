"""Segmentation metrics and pseudo-label audits.

Confusion matrices use rows for ground truth and columns for prediction.
Per-category IoU is TP / (TP + FP + FN); the mean skips categories absent
from both truth and prediction of the evaluated set (0/0 has no sensible
value). Reports carry raw counts next to every ratio so two implementations
can be compared without rounding questions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .anchors import ActivationResult


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C] int64, rows = truth, cols = prediction

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def C(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.C != self.C:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def confusion(pred_labels, true_labels, C: int) -> ConfusionMatrix:
    """Exact per-pair counts; errors on any label outside [0, C)."""
    pred = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    for name, arr in (("prediction", pred), ("truth", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            raise ValueError(f"{name} label out of range [0, {C})")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return ConfusionMatrix(cm)


def iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-category IoU (NaN where excluded) and the unweighted mean.

    A category is excluded only when it appears in neither truth nor
    prediction; a predicted-but-absent category scores 0 and is included.
    """
    tp = np.diag(cm.counts).astype(np.float64)
    fn = cm.counts.sum(axis=1) - np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - np.diag(cm.counts)
    denom = tp + fp + fn
    per_cat = np.full(cm.C, np.nan)
    included = denom > 0
    per_cat[included] = tp[included] / denom[included]
    mean = float(per_cat[included].mean()) if included.any() else float("nan")
    return per_cat, mean


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        return float("nan")
    return float(np.diag(cm.counts).sum() / cm.total)


def pseudo_label_audit(activation: ActivationResult, oracle_labels) -> dict:
    """Precision and coverage of pseudo-labels against ground truth.

    Read-only: evaluation may see target labels, training never does.
    Precision is absent (None) when nothing is active; per-category
    precision is absent for categories never assigned.
    """
    truth = np.asarray(oracle_labels, dtype=np.int64).reshape(-1)
    if truth.shape != activation.active.shape:
        raise ValueError("oracle labels must match the activation length")
    active = activation.active
    pseudo = activation.pseudo_labels
    n_active = int(active.sum())
    out = {
        "pixels": int(active.size),
        "active": n_active,
        "coverage": n_active / active.size if active.size else 0.0,
        "precision": None,
        "per_category": {},
    }
    if n_active == 0:
        return out
    correct = (pseudo == truth) & active
    out["precision"] = float(correct.sum() / n_active)
    for c in np.unique(pseudo[active]):
        assigned = active & (pseudo == c)
        out["per_category"][int(c)] = {
            "assigned": int(assigned.sum()),
            "precision": float((correct & assigned).sum() / assigned.sum()),
            "coverage": float(assigned.sum() / max(1, (truth == c).sum())),
        }
    return out


@dataclass
class EvalReport:
    """Full evaluation of one model on one labeled dataset."""

    per_category_iou: list       # floats, None where the category is excluded
    miou: float
    pixel_acc: float
    tp: list
    fp: list
    fn: list
    pseudo_audit: dict | None = None

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix,
                       pseudo_audit: dict | None = None) -> "EvalReport":
        per_cat, mean = iou(cm)
        tp = np.diag(cm.counts)
        fn = cm.counts.sum(axis=1) - tp
        fp = cm.counts.sum(axis=0) - tp
        cats = [None if np.isnan(x) else float(x) for x in per_cat]
        return cls(cats, mean, pixel_accuracy(cm),
                   [int(x) for x in tp], [int(x) for x in fp],
                   [int(x) for x in fn], pseudo_audit)

    def to_json(self) -> str:
        return json.dumps({
            "per_category_iou": self.per_category_iou,
            "miou": self.miou,
            "pixel_accuracy": self.pixel_acc,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "pseudo_audit": self.pseudo_audit,
        }, sort_keys=True)

    def to_table(self) -> str:
        """Tab-separated, one row per category: name, IoU x 100, raw counts."""
        lines = ["category\tiou_x100\ttp\tfp\tfn"]
        for c, x in enumerate(self.per_category_iou):
            shown = "-" if x is None else f"{100.0 * x:.2f}"
            lines.append(f"cat{c}\t{shown}\t{self.tp[c]}\t{self.fp[c]}\t{self.fn[c]}")
        shown = "nan" if np.isnan(self.miou) else f"{100.0 * self.miou:.2f}"
        lines.append(f"mean\t{shown}\t-\t-\t-")
        return "\n".join(lines) + "\n"


def evaluate_model(model, dataset) -> EvalReport:
    """Confusion over every grid of a labeled dataset, merged, then scored."""
    cm = ConfusionMatrix(np.zeros((dataset.C, dataset.C), dtype=np.int64))
    for g in dataset.grids:
        if g.labels is None:
            raise ValueError("evaluation needs a labeled dataset")
        pred = model.predict_labels(g.features)
        cm = cm.merge(confusion(pred, g.labels.astype(np.int64), dataset.C))
    return EvalReport.from_confusion(cm)


def feature_alignment_distance(model, source_ds, target_ds) -> float:
    """Mean distance between matched per-category means in the model's
    alignment space. Evaluation-only: reads labels on both sides."""
    def means(ds):
        feats = np.concatenate([model.project_np(g.features) for g in ds.grids])
        labels = np.concatenate([g.labels.astype(np.int64) for g in ds.grids])
        out = {}
        for c in range(ds.C):
            sel = labels == c
            if sel.any():
                out[c] = feats[sel].mean(axis=0)
        return out

    ma, mb = means(source_ds), means(target_ds)
    shared = sorted(set(ma) & set(mb))
    if not shared:
        raise ValueError("no category present on both sides")
    return float(np.mean([np.linalg.norm(ma[c] - mb[c]) for c in shared]))
