"""Frame-level metrics: ROC AUC, average precision, curve export.

Both metrics are rank statistics computed from a single descending sweep
over the scores. Ties are handled deterministically: AUC uses midranks
(equivalent to counting tied positive/negative pairs as half), AP groups
all frames sharing a score into one threshold step.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledScores:
    """Concatenated per-frame scores and 0/1 ground-truth labels."""

    scores: np.ndarray
    labels: np.ndarray
    videos: tuple = ()

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.ndim != 1 or labels.shape != scores.shape:
            raise EvaluationError("scores and labels must be 1-d and equal length, "
                                  f"got {scores.shape} and {labels.shape}")
        if scores.size == 0:
            raise EvaluationError("empty score list")
        if not np.isfinite(scores).all():
            raise EvaluationError("scores contain non-finite values")
        if not np.isin(labels, (0, 1)).all():
            raise EvaluationError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())

    @classmethod
    def concat(cls, items) -> "LabeledScores":
        """Join (video_id, scores, labels) triples into one labeled set."""
        vids, scores, labels = [], [], []
        for vid, s, l in items:
            s = np.asarray(s, dtype=np.float64)
            l = np.asarray(l)
            if s.shape != l.shape:
                raise EvaluationError(
                    f"video {vid}: {s.size} scores but {l.size} labels")
            vids.append(vid)
            scores.append(s)
            labels.append(l)
        if not vids:
            raise EvaluationError("no videos to evaluate")
        return cls(np.concatenate(scores), np.concatenate(labels), tuple(vids))

    def _video_set(self) -> str:
        return ", ".join(self.videos) if self.videos else "<unnamed>"


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the midpoint of their rank span."""
    order = np.argsort(x, kind="stable")
    sx = x[order]
    n = x.size
    steps = np.nonzero(np.diff(sx))[0] + 1
    starts = np.concatenate(([0], steps))
    ends = np.concatenate((steps, [n]))
    group_mid = 0.5 * (starts + ends - 1) + 1.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(group_mid, ends - starts)
    return ranks


def roc_auc(data: LabeledScores) -> float:
    """P(score of a positive > score of a negative), ties counted half."""
    p, n = data.n_pos, data.n_neg
    if p == 0 or n == 0:
        raise EvaluationError(
            f"AUC needs both classes, got {p} positives and {n} negatives "
            f"over videos [{data._video_set()}]")
    ranks = _midranks(data.scores)
    pos_rank_sum = ranks[data.labels == 1].sum()
    return float((pos_rank_sum - p * (p + 1) / 2.0) / (p * n))


def _descending_sweep(data: LabeledScores):
    """Cumulative (tp, fp) at each distinct threshold, highest first."""
    order = np.argsort(-data.scores, kind="stable")
    s = data.scores[order]
    l = data.labels[order]
    tp = np.cumsum(l)
    fp = np.cumsum(1 - l)
    last = np.concatenate((np.nonzero(np.diff(s))[0], [s.size - 1]))
    return tp[last].astype(np.float64), fp[last].astype(np.float64)


def pr_ap(data: LabeledScores) -> float:
    """Average precision: sum of precision times recall increment."""
    p = data.n_pos
    if p == 0:
        raise EvaluationError(
            f"AP needs at least one positive over videos [{data._video_set()}]")
    tp, fp = _descending_sweep(data)
    precision = tp / (tp + fp)
    recall = tp / p
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * precision))


def roc_curve(data: LabeledScores) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) points of the threshold sweep, anchored at (0, 0)."""
    p, n = data.n_pos, data.n_neg
    if p == 0 or n == 0:
        raise EvaluationError(
            f"ROC needs both classes over videos [{data._video_set()}]")
    tp, fp = _descending_sweep(data)
    fpr = np.concatenate(([0.0], fp / n))
    tpr = np.concatenate(([0.0], tp / p))
    return fpr, tpr


def pr_curve(data: LabeledScores) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) points of the threshold sweep."""
    p = data.n_pos
    if p == 0:
        raise EvaluationError(
            f"PR curve needs at least one positive over videos [{data._video_set()}]")
    tp, fp = _descending_sweep(data)
    return tp / p, tp / (tp + fp)


def export_curve(data: LabeledScores, kind: str, path) -> None:
    """Write the named curve as two-column csv text for external plotting."""
    if kind == "roc":
        a, b = roc_curve(data)
        header = "fpr,tpr"
    elif kind == "pr":
        a, b = pr_curve(data)
        header = "recall,precision"
    else:
        raise EvaluationError(f"unknown curve kind {kind!r}, expected roc or pr")
    lines = [header]
    for x, y in zip(a, b):
        lines.append(f"{x:.17g},{y:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def evaluate(data: LabeledScores) -> dict:
    return {"auc": roc_auc(data), "ap": pr_ap(data),
            "n_pos": data.n_pos, "n_neg": data.n_neg}


def append_summary(path, name: str, value: float, data: LabeledScores) -> None:
    """Append one metric line to the evaluation log."""
    with open(path, "a") as fh:
        fh.write(f"{name} {value:.17g} n_pos={data.n_pos} n_neg={data.n_neg}\n")


def position_accuracy(model, store, batch_cap: int = 3072) -> dict:
    """Fraction of grid cells whose position the classifier recovers.

    Only frame triples whose three frames are all labeled normal count
    (unlabeled videos count entirely). Returns joint and per-axis rates.
    """
    g = store.grid_w * store.grid_h
    chunk = max(1, batch_cap // g)
    hit_x = hit_y = hit_both = total = 0
    for video in range(len(store.manifest.videos)):
        gt = store.manifest.videos[video].ground_truth
        normal_ts = [t for t in range(store.triples(video))
                     if gt is None or not gt[t:t + 3].any()]
        for lo in range(0, len(normal_ts), chunk):
            parts = [store.frame_cells(video, t) for t in normal_ts[lo:lo + chunk]]
            vals = np.concatenate([p[0] for p in parts])
            lx = np.concatenate([p[1] for p in parts])
            ly = np.concatenate([p[2] for p in parts])
            out = model.forward_generator(vals, "eval")
            ok_x = np.argmax(out.prob_x, axis=1) == lx
            ok_y = np.argmax(out.prob_y, axis=1) == ly
            hit_x += int(ok_x.sum())
            hit_y += int(ok_y.sum())
            hit_both += int((ok_x & ok_y).sum())
            total += vals.shape[0]
    if total == 0:
        raise EvaluationError("no normal frame triples to measure accuracy on")
    return {"joint": hit_both / total, "x": hit_x / total,
            "y": hit_y / total, "count": total}
