"""Binary classifier evaluation: confusion matrix, accuracy, F1, ROC/AUC,
average precision, and the JSON report shape the CLI writes.

Scores are positive-class probabilities (or any monotone score). ROC is
built by sweeping unique score thresholds in descending order, so tied
scores collapse to a single curve point and the trapezoidal AUC equals the
tie-corrected Mann-Whitney statistic. AP is the step-wise (non-interpolated)
area under the precision-recall curve.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricUndefinedError
from .ops import softmax


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    """One evaluation row: the four headline metrics plus curve points.

    auc/ap are None when undefined for the split (single-class labels);
    they are omitted from the JSON rather than reported as failures.
    """

    accuracy_pct: float
    f1: float
    confusion: ConfusionMatrix
    threshold: float
    auc: float = None
    ap: float = None
    roc_points: list = field(default_factory=list)
    pr_points: list = field(default_factory=list)
    dataset: str = ""
    model: str = ""

    def to_dict(self):
        out = {
            "dataset": self.dataset,
            "model": self.model,
            "accuracy_pct": self.accuracy_pct,
            "f1": self.f1,
            "confusion": {"tp": self.confusion.tp, "fp": self.confusion.fp,
                          "tn": self.confusion.tn, "fn": self.confusion.fn},
            "threshold": self.threshold,
        }
        if self.auc is not None:
            out["auc"] = self.auc
            out["roc"] = [[float(x), float(y)] for x, y in self.roc_points]
        if self.ap is not None:
            out["avg_precision"] = self.ap
            out["pr"] = [[float(x), float(y)] for x, y in self.pr_points]
        return out


def _check_scored(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores/labels must be equal-length vectors, got "
                         f"{scores.shape} and {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold=0.5):
    """Counts with 'predicted positive' meaning score >= threshold."""
    scores, labels = _check_scored(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(tp=int((pred & pos).sum()),
                           fp=int((pred & ~pos).sum()),
                           tn=int((~pred & ~pos).sum()),
                           fn=int((~pred & pos).sum()))


def accuracy(cm):
    """Percent of correct predictions."""
    if cm.n == 0:
        raise MetricUndefinedError("accuracy undefined for zero samples")
    return 100.0 * (cm.tp + cm.tn) / cm.n


def f1(cm):
    """Harmonic mean of precision and recall; 0 in the degenerate cases."""
    if cm.tp + cm.fp == 0 or cm.tp + cm.fn == 0:
        return 0.0
    precision = cm.tp / (cm.tp + cm.fp)
    recall = cm.tp / (cm.tp + cm.fn)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _threshold_counts(scores, labels):
    """Cumulative (tp, fp) after each unique score, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # last index of each tied group marks one threshold point
    boundary = np.nonzero(np.diff(s))[0]
    idx = np.concatenate([boundary, [len(s) - 1]])
    cum_tp = np.cumsum(y)[idx]
    cum_fp = np.cumsum(1 - y)[idx]
    return cum_tp, cum_fp


def roc_auc(scores, labels):
    """Trapezoidal area under the ROC curve plus its (fpr, tpr) points."""
    scores, labels = _check_scored(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            "roc_auc needs at least one positive and one negative label")
    cum_tp, cum_fp = _threshold_counts(scores, labels)
    tpr = np.concatenate([[0.0], cum_tp / n_pos])
    fpr = np.concatenate([[0.0], cum_fp / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return auc, list(zip(fpr.tolist(), tpr.tolist()))


def average_precision(scores, labels):
    """Step-wise AP = sum (R_k - R_{k-1}) * P_k over descending prefixes."""
    scores, labels = _check_scored(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("average_precision needs a positive label")
    cum_tp, cum_fp = _threshold_counts(scores, labels)
    recall = cum_tp / n_pos
    precision = cum_tp / (cum_tp + cum_fp)
    delta = np.diff(np.concatenate([[0.0], recall]))
    ap = float((delta * precision).sum())
    points = [(0.0, 1.0)] + list(zip(recall.tolist(), precision.tolist()))
    return ap, points


def score_batch(model, images, batch_size=32):
    """Softmax probabilities for a stack of [0,1]-scaled images."""
    images = np.asarray(images, dtype=np.float32)
    probs = []
    for i in range(0, len(images), batch_size):
        logits, _, _ = model.forward(images[i:i + batch_size], mode="infer")
        probs.append(softmax(logits))
    return np.concatenate(probs, axis=0)


def evaluate(model, images, labels, threshold=0.5, positive_class=1,
             rescale=1.0 / 255.0, batch_size=32):
    """Run inference over a split and assemble a MetricsReport.

    images are raw [0,255] (c,h,w) arrays; the positive-class softmax
    output becomes the score. Undefined metrics (single-class splits)
    come back as absent fields, not errors.
    """
    images = np.asarray(images, dtype=np.float32) * rescale
    labels = np.asarray(labels)
    scores = score_batch(model, images, batch_size)[:, positive_class]
    binary = (labels == positive_class).astype(np.int64)
    cm = confusion(scores, binary, threshold)
    report = MetricsReport(accuracy_pct=accuracy(cm), f1=f1(cm),
                           confusion=cm, threshold=threshold)
    try:
        report.auc, report.roc_points = roc_auc(scores, binary)
    except MetricUndefinedError:
        pass
    try:
        report.ap, report.pr_points = average_precision(scores, binary)
    except MetricUndefinedError:
        pass
    return report
