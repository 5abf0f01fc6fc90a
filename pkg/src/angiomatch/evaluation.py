"""Baselines, benchmark runs, reports and PCA false color."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .descriptors import DescriptorSet, FeatureMap
from .exceptions import AngiomatchError, DegenerateCovariance
from .geometry import CameraModel, estimate_pose_ransac, fundamental_from_cameras, relative_pose, rotation_error
from .matcher.model import PairSample
from .metrics import epipolar_stats, match_auc, match_errors, pose_auc, symmetric_epipolar_errors

__all__ = [
    "mnn_baseline",
    "MNNMatcher",
    "pca_project",
    "pca_rgb",
    "BenchmarkPair",
    "PairRecord",
    "MetricsReport",
    "evaluate_pair",
    "summarize",
    "run_benchmark",
    "report_csv",
    "report_table",
    "records_csv",
    "FAILED_POSE_DEG",
    "match_auc",
    "pose_auc",
    "match_errors",
    "epipolar_stats",
]

FAILED_POSE_DEG = 180.0


def mnn_baseline(descA, descB) -> np.ndarray:
    """Mutual nearest neighbours under cosine similarity, as ``(i, j, similarity)`` rows.

    Accepts raw ``(n, c)`` arrays or :class:`DescriptorSet` (local descriptors).
    Ties are broken toward the lower index on both sides.
    """
    a = descA.local if isinstance(descA, DescriptorSet) else np.asarray(descA, dtype=float)
    b = descB.local if isinstance(descB, DescriptorSet) else np.asarray(descB, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 3))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    sim = (a / np.where(na > 0, na, 1.0)) @ (b / np.where(nb > 0, nb, 1.0)).T
    ab = np.argmax(sim, axis=1)
    ba = np.argmax(sim, axis=0)
    i = np.flatnonzero(ba[ab] == np.arange(len(a)))
    j = ab[i]
    return np.stack([i.astype(float), j.astype(float), sim[i, j]], axis=1)


class MNNMatcher(BaseEstimator):
    """Estimator form of :func:`mnn_baseline`; ``fit`` learns nothing."""

    def __init__(self, descriptor: str = "local"):
        self.descriptor = descriptor

    def fit(self, X=None, y=None):
        if self.descriptor not in ("local", "global"):
            raise ValueError("descriptor must be 'local' or 'global'")
        self.fitted_ = True
        return self

    def _pick(self, d):
        return d.local if self.descriptor == "local" else d.global_

    def match(self, descA, descB) -> np.ndarray:
        return mnn_baseline(self._pick(descA), self._pick(descB))

    def predict(self, X):
        return [self.match(a, b) for a, b in X]


# ---------------------------------------------------------------------------
# PCA visualization
# ---------------------------------------------------------------------------


def pca_project(fmap: FeatureMap, components: int = 3) -> np.ndarray:
    """Centered cell features projected on the top principal axes, ``(h, w, components)``."""
    C, H, W = fmap.data.shape
    if C < components:
        raise ValueError(f"need at least {components} channels, got {C}")
    X = fmap.data.reshape(C, -1).T.astype(np.float64)
    X = X - X.mean(axis=0)
    cov = X.T @ X / max(len(X), 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[0] <= 1e-12 * max(1.0, float(np.abs(fmap.data).max()) ** 2):
        raise DegenerateCovariance("feature map has zero variance; nothing to project")
    # sign convention: largest-magnitude loading of each axis is positive
    for k in range(evecs.shape[1]):
        if evecs[np.argmax(np.abs(evecs[:, k])), k] < 0:
            evecs[:, k] = -evecs[:, k]
    return (X @ evecs[:, :components]).reshape(H, W, components)


def pca_rgb(fmap: FeatureMap) -> np.ndarray:
    """False-color ``uint8`` raster from the top three principal components."""
    Y = pca_project(fmap, 3)
    lo = Y.min(axis=(0, 1))
    span = Y.max(axis=(0, 1)) - lo
    scaled = np.where(span > 0, (Y - lo) / np.where(span > 0, span, 1.0), 0.0)
    return np.round(scaled * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkPair:
    sample: PairSample
    camA: CameraModel
    camB: CameraModel
    pair_id: str = ""


@dataclass
class PairRecord:
    pair_id: str
    num_matches: int
    num_correct: int
    match_errors: np.ndarray = field(repr=False)
    rotation_error: float
    pose_ok: bool
    epipolar: np.ndarray = field(repr=False)


@dataclass
class MetricsReport:
    method: str
    match_auc_1px: float
    match_auc_3px: float
    pose_auc_15: float
    pose_auc_30: float
    pose_acc_15: float
    pose_acc_30: float
    epipolar_mean: float
    epipolar_std: float
    num_pairs: int
    num_matches: int
    records: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {
            "method": self.method,
            "match_auc_1px": self.match_auc_1px,
            "match_auc_3px": self.match_auc_3px,
            "pose_auc_15": self.pose_auc_15,
            "pose_auc_30": self.pose_auc_30,
            "pose_acc_15": self.pose_acc_15,
            "pose_acc_30": self.pose_acc_30,
            "epipolar_mean": self.epipolar_mean,
            "epipolar_std": self.epipolar_std,
            "num_pairs": self.num_pairs,
            "num_matches": self.num_matches,
        }


def evaluate_pair(pair: BenchmarkPair, matches, ransac_threshold: float = 1.0, seed: int = 0, compute_pose: bool = True) -> PairRecord:
    s = pair.sample
    m = np.asarray(matches, dtype=float).reshape(-1, 3) if len(matches) else np.zeros((0, 3))
    idx = m[:, :2].astype(np.int64)
    errs = match_errors(m, s.gt_matches, s.descB.keypoints)
    gt_map = dict(zip(s.gt_matches[:, 0].tolist(), s.gt_matches[:, 1].tolist()))
    correct = sum(1 for i, j in idx.tolist() if gt_map.get(i) == j)
    ptsA = s.descA.keypoints[idx[:, 0]]
    ptsB = s.descB.keypoints[idx[:, 1]]
    F = fundamental_from_cameras(pair.camA, pair.camB)
    epi = symmetric_epipolar_errors(F, ptsA, ptsB) if len(idx) else np.zeros(0)
    if not compute_pose:
        return PairRecord(pair.pair_id, len(idx), int(correct), errs, math.nan, False, epi)
    R_true, _ = relative_pose(pair.camA, pair.camB)
    try:
        est = estimate_pose_ransac(ptsA, ptsB, pair.camA, pair.camB, threshold=ransac_threshold, seed=seed)
        rerr, ok = min(rotation_error(est.rotation, R_true), FAILED_POSE_DEG), True
    except (AngiomatchError, np.linalg.LinAlgError):
        rerr, ok = FAILED_POSE_DEG, False
    return PairRecord(pair.pair_id, len(idx), int(correct), errs, float(rerr), ok, epi)


def summarize(method: str, records: list) -> MetricsReport:
    """Pool per-pair records: match errors and epipolar distances are pooled over all matches."""
    errs = np.concatenate([r.match_errors for r in records]) if records else np.zeros(0)
    rot = np.array([r.rotation_error for r in records])
    n = len(records)
    if n and np.isnan(rot).all():
        n_pose = 0
    else:
        n_pose = n
    mauc1 = match_auc(errs, 1.0) if errs.size else 0.0
    mauc3 = match_auc(errs, 3.0) if errs.size else 0.0
    pauc15 = pose_auc(rot, 15.0) if n_pose else math.nan
    pauc30 = pose_auc(rot, 30.0) if n_pose else math.nan
    epi = [r.epipolar for r in records if len(r.epipolar)]
    if epi:
        e = np.concatenate(epi)
        emean, estd = float(e.mean()), float(e.std())
    else:
        emean, estd = math.nan, math.nan
    return MetricsReport(
        method=method,
        match_auc_1px=mauc1,
        match_auc_3px=mauc3,
        pose_auc_15=pauc15,
        pose_auc_30=pauc30,
        pose_acc_15=float(np.mean(rot < 15.0)) if n_pose else math.nan,
        pose_acc_30=float(np.mean(rot < 30.0)) if n_pose else math.nan,
        epipolar_mean=emean,
        epipolar_std=estd,
        num_pairs=n,
        num_matches=int(sum(r.num_matches for r in records)),
        records=records,
    )


def run_benchmark(pairs, methods: dict, ransac_threshold: float = 1.0, seed: int = 0, pool=None, compute_pose: bool = True) -> dict:
    """Evaluate every method on every pair.

    ``methods`` maps a name to ``f(descA, descB) -> (n, 3) matches``.
    ``pool`` is an optional executor; results are reduced in pair order.
    With ``compute_pose=False`` RANSAC is skipped and pose metrics are NaN.
    Returns ``{name: MetricsReport}`` in the order of ``methods``.
    """
    out = {}
    for name, fn in methods.items():
        def one(k):
            p = pairs[k]
            return evaluate_pair(p, fn(p.sample.descA, p.sample.descB), ransac_threshold, seed + k, compute_pose)

        if pool is None:
            recs = [one(k) for k in range(len(pairs))]
        else:
            recs = list(pool.map(one, range(len(pairs))))
        out[name] = summarize(name, recs)
    return out


_COLUMNS = [
    "method",
    "match_auc_1px",
    "match_auc_3px",
    "pose_auc_15",
    "pose_auc_30",
    "pose_acc_15",
    "pose_acc_30",
    "epipolar_mean",
    "epipolar_std",
    "num_pairs",
    "num_matches",
]


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_csv(reports) -> str:
    """One row per method; epipolar std is the population std."""
    buf = io.StringIO()
    buf.write(",".join(_COLUMNS) + "\n")
    for r in reports.values() if isinstance(reports, dict) else reports:
        row = r.row()
        buf.write(",".join(_fmt(row[c]) for c in _COLUMNS) + "\n")
    return buf.getvalue()


def report_table(reports) -> str:
    rows = [r.row() for r in (reports.values() if isinstance(reports, dict) else reports)]
    cells = [_COLUMNS] + [[_fmt(r[c]) if not isinstance(r[c], float) else f"{r[c]:.4f}" for c in _COLUMNS] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(_COLUMNS))]
    lines = ["  ".join(c[i].ljust(widths[i]) if i == 0 else c[i].rjust(widths[i]) for i in range(len(_COLUMNS))) for c in cells]
    lines.insert(1, "-" * len(lines[0]))
    lines.append("(epipolar std is the population standard deviation; failed poses count as 180 deg)")
    return "\n".join(lines) + "\n"


def records_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    buf.write("pair_id,num_matches,num_correct,rotation_error,pose_ok,epipolar_mean\n")
    for r in report.records:
        em = float(np.mean(r.epipolar)) if len(r.epipolar) else math.nan
        buf.write(f"{r.pair_id},{r.num_matches},{r.num_correct},{r.rotation_error:.6f},{int(r.pose_ok)},{em:.6f}\n")
    return buf.getvalue()
