"""Benchmark metrics for detection and grounding predictions.

Four groups: binary classification (AUC / EER / ACC), per-type multi-label
classification (mAP / CF1 / OF1), box grounding (IoUmean / IoU50 / IoU75,
over samples whose ground truth has a real box), and token grounding
(micro-averaged precision / recall / F1 over unmasked positions). Metrics
that are undefined for a given evaluation set are reported as absent rather
than guessed.
"""

from __future__ import annotations

import dataclasses
import json
import logging

import numpy as np

from .grounding import iou

log = logging.getLogger(__name__)

TYPE_NAMES = ("face_swap", "face_attribute", "text_swap", "text_attribute")


@dataclasses.dataclass
class PredictionRecord:
    """Model outputs for one sample, as probabilities."""

    id: str
    fake_prob: float
    type_probs: np.ndarray   # (4,) in FS, FA, TS, TA order
    box: np.ndarray          # (4,) normalized corners
    token_probs: np.ndarray  # (M,) per-token manipulated probability

    def validate(self):
        probs = np.concatenate([[self.fake_prob], self.type_probs, self.token_probs])
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError(f"{self.id}: probabilities outside [0, 1]")
        if np.any(self.box < 0) or np.any(self.box > 1):
            raise ValueError(f"{self.id}: box corners outside [0, 1]")


@dataclasses.dataclass
class MetricsReport:
    binary: dict
    multilabel: dict
    box: dict
    token: dict

    def to_dict(self) -> dict:
        return {
            "binary": dict(self.binary),
            "multilabel": dict(self.multilabel),
            "box": dict(self.box),
            "token": dict(self.token),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _roc_points(scores: np.ndarray, labels: np.ndarray):
    """ROC polyline with tied scores collapsed into single steps."""
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    fpr, tpr = [0.0], [0.0]
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and scores[j] == scores[i]:
            tp += labels[j]
            fp += 1 - labels[j]
            j += 1
        fpr.append(fp / n_neg)
        tpr.append(tp / n_pos)
        i = j
    return np.array(fpr), np.array(tpr)


def auc_score(scores, labels) -> float:
    """Area under the ROC curve by trapezoidal integration.

    Collapsing tied scores into single ROC steps makes the trapezoid rule
    equal to the pairwise-comparison estimator with ties counted one half.
    """
    fpr, tpr = _roc_points(np.asarray(scores, dtype=float), np.asarray(labels))
    return float(np.trapezoid(tpr, fpr))


def eer_score(scores, labels) -> float:
    """Equal error rate: the ROC point where FPR equals 1 - TPR."""
    fpr, tpr = _roc_points(np.asarray(scores, dtype=float), np.asarray(labels))
    diff = fpr + tpr - 1.0  # monotone from -1 to +1 along the curve
    k = int(np.searchsorted(diff >= 0, True))
    if diff[k] == 0.0:
        return float(fpr[k])
    f1, f2 = fpr[k - 1], fpr[k]
    t1, t2 = tpr[k - 1], tpr[k]
    denom = (f2 - f1) + (t2 - t1)
    t = (1.0 - t1 - f1) / denom
    return float(f1 + t * (f2 - f1))


def cls_metrics(scores, labels, threshold: float = 0.5) -> dict:
    """Binary-group metrics; AUC/EER are absent for single-class label sets."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    acc = float(((scores >= threshold).astype(int) == labels).mean())
    if labels.min() == labels.max():
        log.warning("single-class labels: AUC and EER are undefined")
        return {"auc": None, "eer": None, "acc": acc}
    return {"auc": auc_score(scores, labels), "eer": eer_score(scores, labels), "acc": acc}


def average_precision(scores, labels) -> float | None:
    """All-points interpolated AP (precision envelope over recall)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    rel = labels[order]
    tp = np.cumsum(rel)
    precision = tp / np.arange(1, len(rel) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[rel == 1].sum() / n_pos)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def multilabel_metrics(probs, targets, threshold: float = 0.5) -> dict:
    """mAP, mean per-class F1 (CF1), and micro-pooled F1 (OF1) over 4 types."""
    probs = np.asarray(probs, dtype=float)
    targets = np.asarray(targets, dtype=int)
    aps = []
    for c in range(probs.shape[1]):
        ap = average_precision(probs[:, c], targets[:, c])
        if ap is None:
            log.warning("class %d has no positives; excluded from mAP", c)
        else:
            aps.append(ap)
    preds = (probs >= threshold).astype(int)
    per_class_f1 = []
    tp_all = fp_all = fn_all = 0
    for c in range(probs.shape[1]):
        tp = int(((preds[:, c] == 1) & (targets[:, c] == 1)).sum())
        fp = int(((preds[:, c] == 1) & (targets[:, c] == 0)).sum())
        fn = int(((preds[:, c] == 0) & (targets[:, c] == 1)).sum())
        per_class_f1.append(_f1(tp, fp, fn))
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
    return {
        "map": float(np.mean(aps)) if aps else None,
        "cf1": float(np.mean(per_class_f1)),
        "of1": _f1(tp_all, fp_all, fn_all),
    }


def box_metrics(pred_boxes, gt_boxes) -> dict:
    """IoU statistics over samples with a real ground-truth box."""
    pred_boxes = np.asarray(pred_boxes, dtype=float)
    gt_boxes = np.asarray(gt_boxes, dtype=float)
    if len(pred_boxes) == 0:
        log.warning("no image-manipulated samples: box metrics are undefined")
        return {"iou_mean": None, "iou50": None, "iou75": None}
    ious = np.array([iou(p, g) for p, g in zip(pred_boxes, gt_boxes)])
    return {
        "iou_mean": float(ious.mean()),
        "iou50": float((ious > 0.5).mean()),
        "iou75": float((ious > 0.75).mean()),
    }


def token_metrics(token_probs, y_tok, pad_mask, threshold: float = 0.5) -> dict:
    """Micro P/R/F1 over all unmasked token positions (positive = manipulated)."""
    probs = np.asarray(token_probs, dtype=float)
    y = np.asarray(y_tok, dtype=int)
    mask = np.asarray(pad_mask, dtype=bool)
    pred = (probs[mask] >= threshold).astype(int)
    truth = y[mask]
    tp = int(((pred == 1) & (truth == 1)).sum())
    fp = int(((pred == 1) & (truth == 0)).sum())
    fn = int(((pred == 0) & (truth == 1)).sum())
    if tp + fp == 0:
        log.warning("no predicted positive tokens; precision set to 0")
    if tp + fn == 0:
        log.warning("no actual positive tokens; recall set to 0")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {"precision": precision, "recall": recall, "f1": _f1(tp, fp, fn)}


def compute_report(predictions, samples) -> MetricsReport:
    """Score aligned prediction/sample lists into one report."""
    if len(predictions) != len(samples):
        raise ValueError("predictions and samples differ in length")
    for p, s in zip(predictions, samples):
        if p.id != s.id:
            raise ValueError(f"prediction {p.id} does not align with sample {s.id}")
        p.validate()

    fake_probs = np.array([p.fake_prob for p in predictions])
    y_bin = np.array([s.y_bin for s in samples])
    type_probs = np.stack([p.type_probs for p in predictions])
    y_mul = np.stack([s.y_mul for s in samples])
    boxed = [i for i, s in enumerate(samples) if s.has_box]
    pred_boxes = np.stack([predictions[i].box for i in boxed]) if boxed else np.zeros((0, 4))
    gt_boxes = np.stack([np.asarray(samples[i].y_box) for i in boxed]) if boxed else np.zeros((0, 4))
    token_probs = np.stack([p.token_probs for p in predictions])
    y_tok = np.stack([s.y_tok for s in samples])
    pad_mask = np.stack([s.pad_mask for s in samples])

    return MetricsReport(
        binary=cls_metrics(fake_probs, y_bin),
        multilabel=multilabel_metrics(type_probs, y_mul),
        box=box_metrics(pred_boxes, gt_boxes),
        token=token_metrics(token_probs, y_tok, pad_mask),
    )


def format_report(report: MetricsReport) -> str:
    """Plain-text table for terminal display."""

    def fmt(v):
        return "   --" if v is None else f"{v:.4f}"

    rows = [
        ("binary", [("AUC", report.binary["auc"]), ("EER", report.binary["eer"]),
                    ("ACC", report.binary["acc"])]),
        ("multilabel", [("mAP", report.multilabel["map"]), ("CF1", report.multilabel["cf1"]),
                        ("OF1", report.multilabel["of1"])]),
        ("box", [("IoUmean", report.box["iou_mean"]), ("IoU50", report.box["iou50"]),
                 ("IoU75", report.box["iou75"])]),
        ("token", [("Precision", report.token["precision"]), ("Recall", report.token["recall"]),
                   ("F1", report.token["f1"])]),
    ]
    lines = []
    for group, entries in rows:
        cells = "  ".join(f"{name}={fmt(value)}" for name, value in entries)
        lines.append(f"{group:<11} {cells}")
    return "\n".join(lines)
