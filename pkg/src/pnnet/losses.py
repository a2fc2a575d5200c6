"""Triplet and pair losses over descriptor distances.

All functions are vectorized: distances may be scalars or equal-length
arrays, and per-example values are returned. Reduce with :func:`batch_loss`.
"""

from typing import NamedTuple

import numpy as np

from .errors import DataError, NonFiniteError

DEFAULT_MARGIN = 2.0


class TripletDistances(NamedTuple):
    d_pos: np.ndarray   # ||D(p1) - D(p2)||
    d_neg1: np.ndarray  # ||D(p1) - D(n)||
    d_neg2: np.ndarray  # ||D(p2) - D(n)||


def _finite(*arrays):
    out = [np.asarray(a, dtype=np.float64) for a in arrays]
    for a in out:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("loss received a non-finite distance")
    return out


def soft_negative(d_neg1, d_neg2):
    """Smaller of the two negative distances; ties select the first."""
    first = np.asarray(d_neg1) <= np.asarray(d_neg2)
    return np.where(first, d_neg1, d_neg2), first


def _softmax2(d_pos, d_neg):
    m = np.maximum(d_pos, d_neg)
    e_pos = np.exp(d_pos - m)
    e_neg = np.exp(d_neg - m)
    total = e_pos + e_neg
    return e_pos / total, e_neg / total


def ratio_terms(d_pos, d_neg):
    """The two squared terms of the ratio objective, kept separate.

    ``(s_pos**2, (s_neg - 1)**2)`` where ``(s_pos, s_neg)`` is the softmax of
    ``(d_pos, d_neg)``. The terms are analytically equal.
    """
    s_pos, s_neg = _softmax2(d_pos, d_neg)
    return s_pos ** 2, (s_neg - 1) ** 2


def ratio_loss(d_pos, d_neg):
    term1, term2 = ratio_terms(*_finite(d_pos, d_neg))
    return term1 + term2


def _ratio_grads(d_pos, d_neg):
    s_pos, s_neg = _softmax2(d_pos, d_neg)
    # ds_pos/dd_pos = s_pos*s_neg, ds_neg/dd_pos = -s_pos*s_neg; opposite for d_neg
    cross = s_pos * s_neg
    g_pos = 2 * s_pos * cross - 2 * (s_neg - 1) * cross
    return g_pos, -g_pos


def softpn_loss(d_pos, d_neg1, d_neg2):
    """SoftPN: the ratio objective between the positive distance and the
    soft negative ``min(d_neg1, d_neg2)``. Values lie in [0, 2)."""
    d_pos, d_neg1, d_neg2 = _finite(d_pos, d_neg1, d_neg2)
    d_star, _ = soft_negative(d_neg1, d_neg2)
    term1, term2 = ratio_terms(d_pos, d_star)
    return term1 + term2


def softpn_backward(d_pos, d_neg1, d_neg2):
    """Gradient w.r.t. ``(d_pos, d_neg1, d_neg2)``.

    Only the selected negative receives gradient; ties route to ``d_neg1``.
    """
    d_pos, d_neg1, d_neg2 = _finite(d_pos, d_neg1, d_neg2)
    d_star, first = soft_negative(d_neg1, d_neg2)
    g_pos, g_star = _ratio_grads(d_pos, d_star)
    return g_pos, np.where(first, g_star, 0.0), np.where(first, 0.0, g_star)


def softmax_ratio_loss(d_pos, d_neg1, d_neg2=None):
    """Same objective with the fixed negative ``d_neg1``; ``d_neg2`` is ignored."""
    return ratio_loss(d_pos, d_neg1)


def softmax_ratio_backward(d_pos, d_neg1, d_neg2=None):
    d_pos, d_neg1 = _finite(d_pos, d_neg1)
    g_pos, g_neg = _ratio_grads(d_pos, d_neg1)
    return g_pos, g_neg, np.zeros_like(g_pos)


def _labels(label):
    label = np.asarray(label)
    if not np.all((label == 1) | (label == -1)):
        raise DataError("pair labels must be +1 or -1")
    return label


def hinge_embedding_loss(dist, label, margin=DEFAULT_MARGIN):
    """``dist`` for positive pairs, ``max(0, margin - dist)`` for negatives."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    (dist,) = _finite(dist)
    label = _labels(label)
    return np.where(label == 1, dist, np.maximum(0.0, margin - dist))


def hinge_embedding_backward(dist, label, margin=DEFAULT_MARGIN):
    (dist,) = _finite(dist)
    label = _labels(label)
    active = (label == -1) & (dist < margin)
    return np.where(label == 1, 1.0, np.where(active, -1.0, 0.0))


def batch_loss(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot reduce an empty batch")
    return float(values.mean())


TRIPLET_LOSSES = {
    "softpn": (softpn_loss, softpn_backward),
    "softmax-ratio": (softmax_ratio_loss, softmax_ratio_backward),
}
PAIR_LOSSES = {
    "hinge": (hinge_embedding_loss, hinge_embedding_backward),
}
LOSS_NAMES = tuple(TRIPLET_LOSSES) + tuple(PAIR_LOSSES)
