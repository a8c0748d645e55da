"""Frame-level segmentation metrics: PR/RE/F1/Jaccard, weighted averages, WMAPE.

Scores of classes absent from the ground truth are ``nan`` and are left out
of the weighted averages. Fold-level scores are computed from confusion
counts summed over the fold's videos (micro aggregation).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

CLASS_NAMES = (
    "outside", "insertion", "cecum", "ileum", "ascending",
    "transverse", "descending", "sigmoid", "rectum",
)
# labels that do not count towards withdrawal time
NON_WITHDRAWAL = (0, 1)


@dataclass
class ConfusionCounts:
    gt: np.ndarray
    pred: np.ndarray
    inter: np.ndarray

    @property
    def num_classes(self):
        return self.gt.size

    @property
    def frames(self):
        return int(self.gt.sum())

    def __add__(self, other):
        return ConfusionCounts(self.gt + other.gt, self.pred + other.pred, self.inter + other.inter)


def confusion(pred_labels, gt_labels, eval_mask=None, num_classes=9):
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError(f"prediction/ground-truth length mismatch: {pred.shape} vs {gt.shape}")
    if eval_mask is not None:
        eval_mask = np.asarray(eval_mask, dtype=bool)
        if eval_mask.shape != gt.shape:
            raise ValueError("eval mask length mismatch")
        pred, gt = pred[eval_mask], gt[eval_mask]
    pred = pred.astype(np.int64)
    gt = gt.astype(np.int64)
    for arr, what in ((pred, "prediction"), (gt, "ground truth")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{what} label outside [0, {num_classes})")
    return ConfusionCounts(
        np.bincount(gt, minlength=num_classes),
        np.bincount(pred, minlength=num_classes),
        np.bincount(gt[gt == pred], minlength=num_classes),
    )


def f1_scores(counts):
    """Per-class ``(precision, recall, f1)``.

    Precision is 0 for an empty prediction set; recall and F1 are ``nan``
    when the class has no ground-truth frames and no predictions.
    """
    gt, pred, inter = (a.astype(np.float64) for a in (counts.gt, counts.pred, counts.inter))
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred > 0, inter / pred, 0.0)
        recall = np.where(gt > 0, inter / gt, np.nan)
        # 2 PR RE / (PR + RE) == 2 I / (|GT| + |P|); 0 when PR + RE == 0
        denom = gt + pred
        f1 = np.where(denom > 0, 2.0 * inter / denom, np.nan)
    return precision, recall, f1


def jaccard_scores(counts):
    gt, pred, inter = (a.astype(np.float64) for a in (counts.gt, counts.pred, counts.inter))
    union = gt + pred - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def class_weights(counts, mode="support"):
    """Normalized class weights over classes present in the ground truth."""
    gt = counts.gt.astype(np.float64)
    present = gt > 0
    if not present.any():
        raise ValueError("no class present in the ground truth")
    w = np.zeros_like(gt)
    if mode == "support":
        w[present] = gt[present]
    elif mode == "inverse":
        w[present] = 1.0 / gt[present]
    else:
        raise ValueError(f"unknown weighting mode {mode!r}")
    return w / w.sum()


def weighted_average(per_class_scores, counts, mode="support"):
    w = class_weights(counts, mode)
    scores = np.asarray(per_class_scores, dtype=np.float64)
    present = w > 0
    return float(np.sum(w[present] * scores[present]))


def withdrawal_frames(labels, mask=None):
    labels = np.asarray(labels)
    if mask is not None:
        labels = labels[np.asarray(mask, dtype=bool)]
    return int(np.count_nonzero(~np.isin(labels, NON_WITHDRAWAL)))


def wmape(videos):
    """Mean over videos of ``|A - P| / A * 100`` on withdrawal frame counts.

    ``videos`` holds ``(gt_labels, pred_labels)`` or ``(gt, pred, mask)`` tuples.
    """
    errors = []
    for i, v in enumerate(videos):
        gt, pred = v[0], v[1]
        mask = v[2] if len(v) > 2 else None
        a = withdrawal_frames(gt, mask)
        p = withdrawal_frames(pred, mask)
        if a == 0:
            raise ValueError(f"video {i} has no withdrawal frames")
        errors.append(abs(a - p) / a * 100.0)
    if not errors:
        raise ValueError("no videos")
    return float(np.mean(errors))


@dataclass
class VideoResult:
    video_id: str
    frames: int
    actual_withdrawal: int
    predicted_withdrawal: int
    f1: List[float]
    accuracy: float


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    jaccard: np.ndarray
    wf1: float
    wjacc: float
    wf1_inverse: float
    wjacc_inverse: float
    wmape: float
    frames: int
    counts: ConfusionCounts
    videos: List[VideoResult] = field(default_factory=list)
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, class_names=CLASS_NAMES):
        def clean(arr):
            return {n: (None if np.isnan(x) else float(x)) for n, x in zip(class_names, arr)}

        return {
            "f1": clean(self.f1),
            "precision": clean(self.precision),
            "recall": clean(self.recall),
            "jaccard": clean(self.jaccard),
            "wF1": self.wf1,
            "wJacc": self.wjacc,
            "wF1_inverse_frequency": self.wf1_inverse,
            "wJacc_inverse_frequency": self.wjacc_inverse,
            "WMAPE": self.wmape,
            "frames": self.frames,
            "counts": {
                "gt": self.counts.gt.tolist(),
                "pred": self.counts.pred.tolist(),
                "intersection": self.counts.inter.tolist(),
            },
            "videos": [
                {
                    "video_id": v.video_id,
                    "frames": v.frames,
                    "actual_withdrawal": v.actual_withdrawal,
                    "predicted_withdrawal": v.predicted_withdrawal,
                    "accuracy": v.accuracy,
                    "f1": clean(v.f1),
                }
                for v in self.videos
            ],
            **self.extra,
        }


def evaluate(videos, num_classes=9, video_ids=None):
    """Full report for a list of ``(gt, pred, mask)`` videos (mask may be None)."""
    if not videos:
        raise ValueError("no videos to evaluate")
    total = None
    rows = []
    for i, v in enumerate(videos):
        gt, pred = np.asarray(v[0]), np.asarray(v[1])
        mask = v[2] if len(v) > 2 and v[2] is not None else np.ones(gt.shape, dtype=bool)
        cc = confusion(pred, gt, mask, num_classes)
        total = cc if total is None else total + cc
        _, _, vf1 = f1_scores(cc)
        n = cc.frames
        rows.append(
            VideoResult(
                video_ids[i] if video_ids else str(i),
                n,
                withdrawal_frames(gt, mask),
                withdrawal_frames(pred, mask),
                vf1.tolist(),
                float(cc.inter.sum() / n) if n else float("nan"),
            )
        )
    precision, recall, f1 = f1_scores(total)
    jac = jaccard_scores(total)
    return MetricsReport(
        precision, recall, f1, jac,
        weighted_average(f1, total), weighted_average(jac, total),
        weighted_average(f1, total, "inverse"), weighted_average(jac, total, "inverse"),
        wmape([(np.asarray(v[0]), np.asarray(v[1]), v[2] if len(v) > 2 else None) for v in videos]),
        total.frames, total, rows,
    )
