"""Matching benchmarks: pair ROC with FPR at 95% recall, and nearest-neighbour
precision/recall against region-overlap ground truth."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ShapeError

log = logging.getLogger(__name__)

MAX_OVERLAP_ERROR = 0.5
RECALL_DENOMINATOR = "left patches with >=1 correspondence"


@dataclass
class EvalCurve:
    """Operating points ``(threshold, x, y)`` sorted by threshold.

    ROC curves use ``x = FPR, y = TPR``; PR curves ``x = recall,
    y = precision``. ``summary`` is FPR@95 or average precision.
    """
    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray
    summary: float
    x_name: str = "x"
    y_name: str = "y"

    def __len__(self):
        return len(self.thresholds)

    def points(self):
        return list(zip(self.thresholds.tolist(), self.x.tolist(), self.y.tolist()))


def _scored(distances, labels):
    distances = np.asarray(distances, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if distances.shape != labels.shape:
        raise ShapeError(f"{len(distances)} distances but {len(labels)} labels")
    if not np.all(np.isfinite(distances)):
        raise DataError("distances must be finite")
    if not np.all((labels == 1) | (labels == -1)):
        raise DataError("labels must be +1 or -1")
    pos = np.sort(distances[labels == 1])
    neg = np.sort(distances[labels == -1])
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("need at least one positive and one negative pair")
    return distances, pos, neg


def fpr_at_tpr(distances, labels, rate=0.95):
    """FPR at the smallest threshold accepting at least ``rate`` of positives.

    A pair is accepted when its distance is ``<= t``; ties at ``t`` count as
    accepted, so the result depends on the ranking of distances only.
    """
    _, pos, neg = _scored(distances, labels)
    needed = max(1, math.ceil(round(rate * len(pos), 9)))
    t = pos[needed - 1]
    return float(np.searchsorted(neg, t, side="right") / len(neg))


def fpr_at_95_tpr(distances, labels):
    return fpr_at_tpr(distances, labels, 0.95)


def roc_curve(distances, labels):
    """Sweep every distinct distance; starts at the reject-all point (0, 0)."""
    distances, pos, neg = _scored(distances, labels)
    thresholds = np.concatenate([[-np.inf], np.unique(distances)])
    tpr = np.searchsorted(pos, thresholds, side="right") / len(pos)
    fpr = np.searchsorted(neg, thresholds, side="right") / len(neg)
    return EvalCurve(thresholds, fpr, tpr, fpr_at_95_tpr(distances, labels), "fpr", "tpr")


def pair_distances(descriptors, pairs):
    desc = np.asarray(descriptors, dtype=np.float64)
    diff = desc[pairs.left] - desc[pairs.right]
    return np.sqrt(np.sum(diff * diff, axis=1))


# -- nearest-neighbour matching -----------------------------------------------------

def nn_match(left, right, chunk=64):
    """Exact L2 nearest neighbour in ``right`` for every row of ``left``.

    Returns ``(index, distance)``; distance ties resolve to the lowest index.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.ndim != 2 or right.ndim != 2:
        raise ShapeError("descriptor sets must be 2-D")
    if len(right) == 0:
        raise DataError("right descriptor set is empty")
    if left.shape[1] != right.shape[1]:
        raise ShapeError(f"dimension mismatch: {left.shape[1]} vs {right.shape[1]}",
                         axis="features")
    index = np.empty(len(left), dtype=np.int64)
    dist = np.empty(len(left), dtype=np.float64)
    for lo in range(0, len(left), chunk):
        block = left[lo:lo + chunk, None, :] - right[None, :, :]
        sq = np.sum(block * block, axis=2)
        best = np.argmin(sq, axis=1)
        index[lo:lo + chunk] = best
        dist[lo:lo + chunk] = np.sqrt(sq[np.arange(len(best)), best])
    return index, dist


@dataclass
class OverlapGroundTruth:
    """Correspondences ``(left, right, overlap_error)`` for one image pair."""
    left: np.ndarray
    right: np.ndarray
    overlap: np.ndarray
    rejected: int = 0
    duplicates: int = 0
    _pairs: set = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.overlap = np.asarray(self.overlap, dtype=np.float64)
        if np.any(self.overlap >= MAX_OVERLAP_ERROR) or np.any(self.overlap < 0):
            raise DataError("overlap errors must lie in [0, 0.5)")
        self._pairs = set(zip(self.left.tolist(), self.right.tolist()))

    def __len__(self):
        return len(self.left)

    def __contains__(self, pair):
        return tuple(pair) in self._pairs

    def matchable_left(self):
        return np.unique(self.left)


def load_overlap_gt(path):
    """Rows ``left_index right_index overlap_error``.

    Rows with overlap error >= 0.5 are dropped and counted in ``rejected``;
    repeated ``(left, right)`` rows are kept once and counted in ``duplicates``.
    """
    seen = {}
    rejected = duplicates = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 3:
                raise FormatError(f"expected 3 fields, got {len(parts)}", line=lineno)
            try:
                i, j, err = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise FormatError("malformed row", line=lineno) from None
            if i < 0 or j < 0 or not math.isfinite(err) or err < 0:
                raise FormatError("negative index or invalid overlap error", line=lineno)
            if err >= MAX_OVERLAP_ERROR:
                rejected += 1
                continue
            if (i, j) in seen:
                duplicates += 1
                continue
            seen[(i, j)] = err
    if rejected:
        log.warning("%s: rejected %d row(s) with overlap error >= 0.5", path, rejected)
    if duplicates:
        log.warning("%s: dropped %d duplicate row(s)", path, duplicates)
    keys = list(seen)
    return OverlapGroundTruth([k[0] for k in keys], [k[1] for k in keys],
                              list(seen.values()), rejected, duplicates)


def pr_curve(nn_index, nn_distance, gt, num_right=None):
    """Precision/recall of left->right NN matches accepted at ``distance <= t``.

    A match ``(i, nn_index[i])`` is correct iff it is a ground-truth
    correspondence. Recall is relative to the number of left patches that
    have at least one correspondence. Average precision is the trapezoidal
    area under the curve, anchored at recall 0 with the first precision.
    """
    nn_index = np.asarray(nn_index, dtype=np.int64)
    nn_distance = np.asarray(nn_distance, dtype=np.float64)
    if nn_index.shape != nn_distance.shape:
        raise ShapeError("nn_index and nn_distance differ in length")
    n_left = len(nn_index)
    if len(gt) and gt.left.max() >= n_left:
        raise DataError(f"ground truth references left patch {gt.left.max()} of {n_left}")
    if num_right is not None and len(gt) and gt.right.max() >= num_right:
        raise DataError(f"ground truth references right patch {gt.right.max()} of {num_right}")
    if num_right is not None and n_left and (nn_index.min() < 0 or nn_index.max() >= num_right):
        raise DataError("match index outside the right set")
    matchable = len(gt.matchable_left())
    if matchable == 0:
        raise DataError("ground truth has no matchable patches")
    if n_left == 0:
        raise DataError("no matches to evaluate")

    correct = np.fromiter(((i, j) in gt for i, j in enumerate(nn_index.tolist())),
                          dtype=bool, count=n_left)
    order = np.argsort(nn_distance, kind="stable")
    d_sorted = nn_distance[order]
    tp = np.cumsum(correct[order])
    # keep the last index of each run of equal distances
    last = np.flatnonzero(np.append(d_sorted[1:] != d_sorted[:-1], True))
    accepted = last + 1
    precision = tp[last] / accepted
    recall = tp[last] / matchable
    thresholds = np.concatenate([[-np.inf], d_sorted[last]])
    precision = np.concatenate([[precision[0]], precision])
    recall = np.concatenate([[0.0], recall])
    ap = float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2))
    return EvalCurve(thresholds, recall, precision, ap, "recall", "precision")


def average_precision(left_desc, right_desc, gt):
    index, dist = nn_match(left_desc, right_desc)
    return pr_curve(index, dist, gt, num_right=len(right_desc)).summary


def mean_ap(rows):
    """``rows`` of ``(sequence, image_pair, ap)`` -> (per-sequence means, overall mean).

    The overall value averages every image pair equally.
    """
    rows = list(rows)
    if not rows:
        raise DataError("no image pairs to average")
    per_sequence = {}
    for seq, _, ap in rows:
        per_sequence.setdefault(seq, []).append(float(ap))
    means = {seq: float(np.mean(v)) for seq, v in per_sequence.items()}
    overall = float(np.mean([float(r[2]) for r in rows]))
    return means, overall


def write_curve_csv(curve, path, header_comment):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["threshold", curve.x_name, curve.y_name])
        for t, x, y in curve.points():
            writer.writerow([repr(t), repr(x), repr(y)])


def write_map_csv(rows, path, header_comment):
    means, overall = mean_ap(rows)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["sequence", "image_pair", "ap"])
        for seq, pair, ap in rows:
            writer.writerow([seq, pair, repr(float(ap))])
        for seq, m in means.items():
            writer.writerow([seq, "mean", repr(m)])
        writer.writerow(["all", "mean", repr(overall)])
    return means, overall


def write_fpr_table(rows, path, header_comment):
    """``rows`` of ``(train_set, test_set, fpr95)``."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["train_set", "test_set", "fpr95"])
        for train, test, fpr in rows:
            writer.writerow([train, test, repr(float(fpr))])
