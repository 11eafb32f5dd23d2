"""Multi-label evaluation metrics.

Average precision in two protocols -- the 11-point interpolated form used by
the PASCAL VOC 2007 challenge and the exact precision-recall integral -- plus
top-k overall/per-class precision, recall and F1 in the form customarily
reported on COCO-style multi-label benchmarks.

Everything here is a pure numpy function over score/truth arrays; ranking
ties are broken by stable input order so results are reproducible bit for bit.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

PROTOCOLS = ("voc11point", "area")


class UndefinedAPError(ValueError):
    """AP is undefined: the label has no positive ground-truth items."""


@dataclass(frozen=True)
class ScoreMatrix:
    """Per-sample, per-label scores with parallel binary ground truth."""

    scores: np.ndarray
    truths: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        truths = np.asarray(self.truths)
        if scores.ndim != 2 or scores.shape != truths.shape:
            raise ValueError(
                f"scores {scores.shape} and truths {truths.shape} must be equal 2-D shapes"
            )
        if not np.isfinite(scores).all():
            raise ValueError("scores must be finite")
        if not np.isin(truths, (0, 1)).all():
            raise ValueError("ground truth must be binary")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "truths", truths.astype(np.int64))

    @property
    def num_labels(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class TopKMetrics:
    c_p: float
    c_r: float
    c_f1: float
    o_p: float
    o_r: float
    o_f1: float

    def as_dict(self) -> dict[str, float]:
        return {"C-P": self.c_p, "C-R": self.c_r, "C-F1": self.c_f1,
                "O-P": self.o_p, "O-R": self.o_r, "O-F1": self.o_f1}


@dataclass(frozen=True)
class MeanAPResult:
    per_label: dict[int, float]
    mean: float
    excluded: tuple[int, ...] = ()


def _ranked_truth(scores, labels) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores ({scores.shape}) and labels ({labels.shape}) differ in length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    # Descending by score; equal scores keep input order (stable mergesort).
    order = np.argsort(-scores, kind="stable")
    return labels[order].astype(np.float64)


def average_precision(scores, labels, protocol: str = "voc11point") -> float:
    """AP of one label's ranking.

    voc11point: mean over recall thresholds {0.0, 0.1, ..., 1.0} of the best
    precision achieved at recall >= threshold. area: the exact PR integral,
    i.e. the mean over positives of the precision at each positive's rank.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol '{protocol}'; expected one of {PROTOCOLS}")
    ranked = _ranked_truth(scores, labels)
    n_pos = int(ranked.sum())
    if n_pos == 0:
        raise UndefinedAPError("no positive labels; AP undefined")
    tp = np.cumsum(ranked)
    precision = tp / np.arange(1, ranked.size + 1)
    recall = tp / n_pos
    if protocol == "area":
        return float(precision[ranked == 1.0].sum() / n_pos)
    thresholds = np.linspace(0.0, 1.0, 11)
    total = 0.0
    for t in thresholds:
        feasible = precision[recall >= t - 1e-12]
        total += float(feasible.max()) if feasible.size else 0.0
    return total / 11.0


def mean_ap(matrix: ScoreMatrix, protocol: str = "voc11point") -> MeanAPResult:
    """Unweighted mean of per-label APs; positive-free labels are excluded
    with a warning (their AP is undefined)."""
    per_label = {}
    excluded = []
    for label in range(matrix.num_labels):
        try:
            per_label[label] = average_precision(
                matrix.scores[:, label], matrix.truths[:, label], protocol
            )
        except UndefinedAPError:
            excluded.append(label)
    if excluded:
        warnings.warn(f"labels without positives excluded from mAP: {excluded}", stacklevel=2)
    if not per_label:
        raise UndefinedAPError("every label is positive-free; mAP undefined")
    mean = float(np.mean(list(per_label.values())))
    return MeanAPResult(per_label=per_label, mean=mean, excluded=tuple(excluded))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def topk_metrics(matrix: ScoreMatrix, k: int) -> TopKMetrics:
    """Predict each sample's k highest-scoring labels and count.

    O-P/O-R pool all decisions; C-P/C-R average per-class precision/recall.
    Classes never predicted are excluded from C-P and classes without
    ground-truth positives are excluded from C-R (both are 0/0 corners).
    """
    n, num_labels = matrix.scores.shape
    if not 1 <= k <= num_labels:
        raise ValueError(f"k={k} must be in [1, {num_labels}]")
    top = np.argsort(-matrix.scores, axis=1, kind="stable")[:, :k]
    predicted = np.zeros_like(matrix.truths)
    np.put_along_axis(predicted, top, 1, axis=1)

    correct = predicted & matrix.truths
    total_correct = int(correct.sum())
    total_truth = int(matrix.truths.sum())
    o_p = total_correct / (k * n)
    o_r = total_correct / total_truth if total_truth else 0.0

    pred_per_class = predicted.sum(axis=0)
    truth_per_class = matrix.truths.sum(axis=0)
    correct_per_class = correct.sum(axis=0)
    has_pred = pred_per_class > 0
    has_truth = truth_per_class > 0
    c_p = float(np.mean(correct_per_class[has_pred] / pred_per_class[has_pred])) if has_pred.any() else 0.0
    c_r = float(np.mean(correct_per_class[has_truth] / truth_per_class[has_truth])) if has_truth.any() else 0.0

    return TopKMetrics(c_p=c_p, c_r=c_r, c_f1=_f1(c_p, c_r),
                       o_p=o_p, o_r=o_r, o_f1=_f1(o_p, o_r))


# ---------------------------------------------------------------------------
# CSV reports. Floats are written with repr() so reruns are byte-identical.
# ---------------------------------------------------------------------------


def write_ap_report(path, results: dict[str, MeanAPResult]) -> None:
    """Tidy per-label AP table: one row per (scenario, label) plus a mAP row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "label", "ap"])
        for scenario in sorted(results):
            result = results[scenario]
            for label in sorted(result.per_label):
                writer.writerow([scenario, label, repr(result.per_label[label])])
            writer.writerow([scenario, "mAP", repr(result.mean)])


def write_topk_report(path, results: dict[str, TopKMetrics]) -> None:
    """One row of the six top-k metrics per scenario."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "c_p", "c_r", "c_f1", "o_p", "o_r", "o_f1"])
        for scenario in sorted(results):
            m = results[scenario]
            writer.writerow([scenario] + [repr(v) for v in (m.c_p, m.c_r, m.c_f1, m.o_p, m.o_r, m.o_f1)])
