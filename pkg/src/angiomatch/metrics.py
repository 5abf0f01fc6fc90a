"""Error metrics for matches and poses.

Cumulative-error AUC: sort the errors, form the step curve "fraction of
samples with error <= e" anchored at (0, 0), cut it at the threshold and
integrate with the trapezoid rule, then divide by the threshold. This is the
convention of the attention-matcher literature; errors at or above the
threshold (including infinite ones) only count in the denominator.
"""

from __future__ import annotations

import numpy as np

from .exceptions import EmptyInput, NoMatches
from .geometry import epipolar_distances

__all__ = ["cumulative_auc", "match_auc", "pose_auc", "match_errors", "epipolar_stats", "symmetric_epipolar_errors"]


def cumulative_auc(errors, threshold: float) -> float:
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise EmptyInput("no errors to summarize")
    if np.any(np.isnan(e)) or np.any(e < 0):
        raise ValueError("errors must be non-negative")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    e = np.sort(e)
    recall = np.arange(1, len(e) + 1) / len(e)
    e = np.concatenate([[0.0], e])
    recall = np.concatenate([[0.0], recall])
    last = np.searchsorted(e, threshold)
    x = np.concatenate([e[:last], [threshold]])
    y = np.concatenate([recall[:last], [recall[last - 1]]])
    return float(np.trapezoid(y, x) / threshold)


def match_auc(errors, threshold: float) -> float:
    """AUC of the cumulative pixel-error curve up to ``threshold`` px."""
    return cumulative_auc(errors, threshold)


def pose_auc(rotation_errors, threshold: float) -> float:
    """AUC of the cumulative rotation-error curve; pass failures as 180 degrees."""
    e = np.asarray(rotation_errors, dtype=float)
    if e.size and (np.any(e > 180.0 + 1e-9) or np.any(e < 0)):
        raise ValueError("rotation errors must lie in [0, 180] degrees")
    return cumulative_auc(e, threshold)


def match_errors(matches, gt_matches, keypointsB, num_a: int | None = None) -> np.ndarray:
    """Pixel error of each A keypoint's predicted partner.

    The pool is every A keypoint that has a ground-truth partner or received a
    match. The error is the distance in image B between the predicted and the
    true partner, so a correct index scores 0. A missing prediction or
    missing ground truth scores ``inf``.
    """
    kpB = np.asarray(keypointsB, dtype=float).reshape(-1, 2)
    m = np.asarray(matches, dtype=float)
    m = m.reshape(-1, m.shape[-1] if m.ndim == 2 else 2)[:, :2].astype(np.int64)
    gt = np.asarray(gt_matches, dtype=np.int64).reshape(-1, 2)
    pred = dict(zip(m[:, 0].tolist(), m[:, 1].tolist()))
    true = dict(zip(gt[:, 0].tolist(), gt[:, 1].tolist()))
    pool = sorted(set(pred) | set(true))
    out = np.empty(len(pool))
    for k, i in enumerate(pool):
        if i in pred and i in true:
            out[k] = float(np.linalg.norm(kpB[pred[i]] - kpB[true[i]]))
        else:
            out[k] = np.inf
    return out


def symmetric_epipolar_errors(F, ptsA, ptsB) -> np.ndarray:
    da, db = epipolar_distances(F, ptsA, ptsB)
    return 0.5 * (np.asarray(da) + np.asarray(db))


def epipolar_stats(pairs) -> tuple[float, float]:
    """Pooled mean and population std of symmetric epipolar distances.

    ``pairs`` is an iterable of ``(F, ptsA, ptsB)`` with matched points.
    """
    chunks = [np.atleast_1d(symmetric_epipolar_errors(F, a, b)) for F, a, b in pairs if len(a)]
    if not chunks:
        raise NoMatches("no matches to measure")
    e = np.concatenate(chunks)
    return float(e.mean()), float(e.std())
