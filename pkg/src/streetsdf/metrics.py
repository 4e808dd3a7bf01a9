"""Evaluation metrics: PSNR, depth RMSE, trimmed Chamfer distance.

The Chamfer distance between point sets is

    C-D(P, G) = mean_{p in P} min_{g} |p - g|^2 + mean_{g in G} min_{p} |g - p|^2

computed over the closest keep_frac fraction of ground-truth points
(sensor outliers would otherwise dominate the average). The trimmed
ground-truth set serves both terms, so outliers vanish from both sides.
Nearest neighbors run on a k-d tree with a brute-force mode for oracle
tests.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when identical."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def depth_rmse(pred: np.ndarray, target: np.ndarray,
               valid: np.ndarray | None = None) -> float:
    """Root-mean-square range error over valid beams."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if valid is None:
        valid = np.ones(len(pred), dtype=bool)
    valid = np.asarray(valid, dtype=bool).ravel()
    if not valid.any():
        raise ValueError("no valid beams")
    err = pred[valid] - target[valid]
    return float(np.sqrt(np.mean(err ** 2)))


def _nn_sq(queries: np.ndarray, points: np.ndarray, brute: bool) -> np.ndarray:
    if brute:
        d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        return d2.min(axis=1)
    d, _ = cKDTree(points).query(queries, k=1)
    return d ** 2


def chamfer_trimmed(pred: np.ndarray, gt: np.ndarray, keep_frac: float = 0.97,
                    brute_force: bool = False) -> float:
    """Symmetric mean squared nearest-neighbor distance, trimmed.

    Ranks ground-truth points by distance to the prediction and keeps those
    within the keep_frac-quantile distance (ties included, so identical
    sets stay at exactly zero); both directions are evaluated against that
    kept set. keep_frac = 1 recovers the untrimmed value. Units: squared
    meters.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("point sets must be nonempty")
    if not (0 < keep_frac <= 1):
        raise ValueError("keep_frac must be in (0, 1]")
    d2_gt = _nn_sq(gt, pred, brute_force)
    k = max(1, int(round(keep_frac * len(gt))))
    thresh = np.partition(d2_gt, k - 1)[k - 1]
    kept_mask = d2_gt <= thresh
    kept = gt[kept_mask]
    gt_term = float(np.mean(d2_gt[kept_mask]))
    pred_term = float(np.mean(_nn_sq(pred, kept, brute_force)))
    return gt_term + pred_term
