"""Evaluation against majority labels and per-annotator labels."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .annotations import MISSING, Dataset
from .mixture import LossLedger, LossMixtureModel, agree_disagree_split, loss_histogram

AVERAGES = ("macro", "positive")


def per_class_prf(predicted, reference, num_classes: int | None = None):
    """Per-class precision, recall and F1.

    Returns ``(precision, recall, f1, zero_division)`` where the first three are
    arrays over classes. A 0/0 ratio is reported as 0 and sets ``zero_division``.
    """
    pred = np.asarray(predicted, dtype=np.int64)
    ref = np.asarray(reference, dtype=np.int64)
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {ref.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), ref.max(initial=0))) + 1
    tp = np.array([np.sum((pred == c) & (ref == c)) for c in range(num_classes)], dtype=float)
    n_pred = np.bincount(pred, minlength=num_classes)[:num_classes].astype(float)
    n_ref = np.bincount(ref, minlength=num_classes)[:num_classes].astype(float)
    zero = bool((n_pred == 0).any() or (n_ref == 0).any())
    precision = np.divide(tp, n_pred, out=np.zeros(num_classes), where=n_pred > 0)
    recall = np.divide(tp, n_ref, out=np.zeros(num_classes), where=n_ref > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0)
    return precision, recall, f1, zero


def precision_recall_f1(predicted, reference, num_classes: int | None = None, average: str = "macro"):
    """(P, R, F1) against reference labels, macro-averaged over classes by default.

    ``average="positive"`` reports class 1 only.
    """
    if average not in AVERAGES:
        raise ValueError(f"average must be one of {AVERAGES}")
    p, r, f, _ = per_class_prf(predicted, reference, num_classes)
    if average == "positive":
        return float(p[1]), float(r[1]), float(f[1])
    return float(p.mean()), float(r.mean()), float(f.mean())


def majority_vote(head_preds, num_classes: int = 2) -> np.ndarray:
    """Per-row majority over head predictions, ties to the lowest class."""
    head_preds = np.asarray(head_preds, dtype=np.int64)
    counts = np.stack([(head_preds == c).sum(axis=1) for c in range(num_classes)], axis=1)
    return counts.argmax(axis=1)


def annotator_accuracy(head_preds, labels) -> float:
    """Mean over annotators of each head's accuracy on that annotator's labels.

    Annotators without any annotation are left out of the mean.
    """
    head_preds = np.asarray(head_preds)
    labels = np.asarray(labels)
    present = labels != MISSING
    accs = []
    for a in range(labels.shape[1]):
        sel = present[:, a]
        if sel.any():
            accs.append(np.mean(head_preds[sel, a] == labels[sel, a]))
    return float(np.mean(accs)) if accs else 0.0


def prediction_variance(head_preds, mask=None, num_classes: int = 2) -> float:
    """Mean over samples of count(1)*count(0)/n**2 of the head votes, times 100.

    ``mask`` restricts each sample to a subset of heads (e.g. its annotators);
    samples with no selected head are skipped.
    """
    if num_classes != 2:
        raise ValueError("variance formula defined for binary labels")
    votes = np.asarray(head_preds)
    sel = np.ones(votes.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = sel.sum(axis=1)
    ones = ((votes == 1) & sel).sum(axis=1)
    keep = n > 0
    if not keep.any():
        return 0.0
    var = ones[keep] * (n[keep] - ones[keep]) / n[keep] ** 2
    return float(var.mean() * 100.0)


def auc_score(labels, scores) -> float:
    """Area under the ROC curve (Mann-Whitney form; ties get half credit)."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    annotator_accuracy: float
    prediction_variance: float
    per_class: list
    num_samples: int
    num_annotators: int
    num_ties: int
    zero_division: bool
    split: dict = field(default_factory=dict)
    histogram: list = field(default_factory=list, repr=False)

    CSV_FIELDS = ("precision", "recall", "f1", "accuracy", "annotator_acc", "pred_variance",
                  "agree_frac", "disagree_frac", "agree_majority_frac", "disagree_majority_frac",
                  "num_samples", "num_annotators", "num_ties")

    def row(self) -> dict:
        """Flat metrics row; rates in [0, 1] except ``pred_variance`` (a percentage)."""
        s = self.split or {}
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "accuracy": self.accuracy, "annotator_acc": self.annotator_accuracy,
            "pred_variance": self.prediction_variance,
            "agree_frac": s.get("agree_frac", float("nan")),
            "disagree_frac": s.get("disagree_frac", float("nan")),
            "agree_majority_frac": s.get("agree_majority_frac", float("nan")),
            "disagree_majority_frac": s.get("disagree_majority_frac", float("nan")),
            "num_samples": self.num_samples, "num_annotators": self.num_annotators,
            "num_ties": self.num_ties,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["percent"] = {k: 100.0 * getattr(self, k) for k in
                        ("precision", "recall", "f1", "accuracy", "annotator_accuracy")}
        return d


def head_predictions(model, X) -> np.ndarray:
    from .model import predict_proba
    return predict_proba(model, X).argmax(axis=2)


def cell_losses(probs, labels) -> np.ndarray:
    """Plain per-cell cross-entropy; zero where the cell is missing."""
    labels = np.asarray(labels)
    safe = np.where(labels == MISSING, 0, labels)
    p = np.take_along_axis(probs, safe[:, :, None], axis=2)[:, :, 0]
    return np.where(labels == MISSING, 0.0, -np.log(np.clip(p, 1e-12, 1.0)))


def assemble_report(model, dataset: Dataset, config=None, probs=None) -> MetricsReport:
    """All metrics for ``model`` on ``dataset``, plus the agree/disagree split.

    A single-head model (baseline arms) is evaluated against every annotator
    with that one head. ``config`` supplies ``metric_average``,
    ``variance_heads`` and the mixture settings; defaults are used when None.
    """
    average = getattr(config, "metric_average", "macro")
    restrict = getattr(config, "variance_heads", "all") == "annotated"
    scope = getattr(config, "mixture_scope", "per_annotator")
    family = getattr(config, "mixture_family", "beta")
    min_obs = getattr(config, "min_mixture_obs", 50)

    from .model import predict_proba
    M = dataset.num_classes
    labels = dataset.annotations.labels
    if probs is None:
        probs = predict_proba(model, dataset.features)
    preds = probs.argmax(axis=2)
    ref, _, ties = dataset.annotations.majorities()
    pred_major = preds[:, 0] if preds.shape[1] == 1 else majority_vote(preds, M)
    p, r, f, zero = per_class_prf(pred_major, ref, M)
    P, R, F = precision_recall_f1(pred_major, ref, M, average)

    if preds.shape[1] == 1 and labels.shape[1] != 1:
        head_view = np.repeat(preds, labels.shape[1], axis=1)
        head_probs = np.repeat(probs, labels.shape[1], axis=1)
    else:
        head_view, head_probs = preds, probs
    mask = (labels != MISSING) if restrict else None
    var = prediction_variance(preds, None if preds.shape[1] == 1 else mask, M) if M == 2 else float("nan")

    ledger = LossLedger.from_matrix(-1, cell_losses(head_probs, labels), labels != MISSING)
    mix = LossMixtureModel.fit(ledger, scope, family, min_obs)
    split = agree_disagree_split(ledger, mix, labels, ref)
    conforms = labels[ledger.samples, ledger.annotators] == ref[ledger.samples]
    hist = loss_histogram(mix.normalized(ledger), conforms)

    per_class = [{"class": c, "precision": float(p[c]), "recall": float(r[c]), "f1": float(f[c])}
                 for c in range(M)]
    return MetricsReport(
        precision=P, recall=R, f1=F,
        accuracy=float(np.mean(pred_major == ref)),
        annotator_accuracy=annotator_accuracy(head_view, labels),
        prediction_variance=var,
        per_class=per_class,
        num_samples=dataset.num_samples,
        num_annotators=dataset.num_annotators,
        num_ties=int(ties.sum()),
        zero_division=zero,
        split=split.to_dict(),
        histogram=hist,
    )
