"""Training objectives over render outputs, with closed-form gradients.

Total objective:

    L = L_photometric + l1 L_geometry + l2 L_mask + l3 L_eikonal
        + l4 L_sparsity + l5 L_entropy

The geometry term is exclusive: a logarithmic L1 on rendered depth against
lidar ranges when beams are supervised, otherwise the monocular-cue pair
(normal consistency plus scale/shift-aligned depth). Every *_grad function
returns d loss / d input for the exact value its partner computed; the
scale/shift depth alignment uses the envelope theorem, so its gradient is
evaluated at the optimum without differentiating the solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._neus import nld, nld_derivative

_CLAMP = 1e-6


@dataclass(frozen=True)
class LossWeights:
    geometry: float = 0.1      # l1; lidar branch (mono uses mono defaults)
    mask: float = 0.3          # l2
    eikonal: float = 0.01      # l3
    sparsity: float = 0.002    # l4
    entropy: float = 0.003     # l5
    mono_depth: float = 1.0    # lambda inside the mono geometry term

    def __post_init__(self):
        vals = (self.geometry, self.mask, self.eikonal, self.sparsity,
                self.entropy, self.mono_depth)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and nonnegative")


@dataclass
class MonoCues:
    """Per-pixel relative depth (scale/shift ambiguous) and unit normals."""

    depth: np.ndarray
    normal: np.ndarray
    valid: np.ndarray


@dataclass
class LossReport:
    photometric: float = 0.0
    geometry: float = 0.0
    mask: float = 0.0
    eikonal: float = 0.0
    sparsity: float = 0.0
    entropy: float = 0.0
    total: float = 0.0
    n_rays: int = 0
    n_samples: int = 0
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("photometric", "geometry", "mask", "eikonal", "sparsity",
                "entropy", "total", "n_rays", "n_samples")}
        out.update(self.extras)
        return out


def photometric_l1(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error over batch and channels."""
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(target))))


def photometric_l1_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred)
    return np.sign(pred - np.asarray(target)) / pred.size


def lidar_log_l1(pred_depth: np.ndarray, ranges: np.ndarray,
                 valid: np.ndarray | None = None) -> float:
    """mean ln(|D_hat - D| + 1) over valid beams; 0 when none are valid."""
    pred_depth = np.asarray(pred_depth)
    ranges = np.asarray(ranges)
    if valid is None:
        valid = ranges > 0
    if not valid.any():
        return 0.0
    return float(np.mean(np.log(np.abs(pred_depth[valid] - ranges[valid]) + 1.0)))


def lidar_log_l1_grad(pred_depth: np.ndarray, ranges: np.ndarray,
                      valid: np.ndarray | None = None) -> np.ndarray:
    pred_depth = np.asarray(pred_depth)
    ranges = np.asarray(ranges)
    if valid is None:
        valid = ranges > 0
    g = np.zeros_like(pred_depth, dtype=np.float64)
    if not valid.any():
        return g
    err = pred_depth[valid] - ranges[valid]
    g[valid] = np.sign(err) / (np.abs(err) + 1.0) / valid.sum()
    return g


def _solve_scale_shift(pred: np.ndarray, target: np.ndarray
                       ) -> tuple[float, float] | None:
    """(w, q) minimizing sum (w*pred + q - target)^2; None if singular."""
    n = len(pred)
    mp, mt = pred.mean(), target.mean()
    var = np.mean((pred - mp) ** 2)
    if n < 2 or var < 1e-12:
        return None
    w = float(np.mean((pred - mp) * (target - mt)) / var)
    return w, float(mt - w * mp)


def mono_geometry_loss(pred_depth: np.ndarray, pred_normal: np.ndarray,
                       cues: MonoCues, depth_weight: float = 1.0,
                       groups: np.ndarray | None = None):
    """Normal consistency + scale/shift-invariant depth regression.

    depth term: mean (w * D_hat + q - D_mono)^2 with (w, q) solved per group
    (per sampled image patch) by least squares; normal term:
    mean(|N_hat - N_mono|_1 + |1 - N_hat . N_mono|). Returns
    (loss, d/d pred_depth, d/d pred_normal, flags).
    """
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    pred_normal = np.asarray(pred_normal, dtype=np.float64)
    valid = np.asarray(cues.valid, dtype=bool)
    n_valid = int(valid.sum())
    d_grad = np.zeros_like(pred_depth)
    n_grad = np.zeros_like(pred_normal)
    flags = {"depth_skipped_groups": 0}
    if n_valid == 0:
        return 0.0, d_grad, n_grad, flags

    # normal term over valid pixels
    nh = pred_normal[valid]
    nm = np.asarray(cues.normal, dtype=np.float64)[valid]
    diff = nh - nm
    dot = (nh * nm).sum(-1)
    ang = np.abs(1.0 - dot)
    normal_term = float(np.mean(np.abs(diff).sum(-1) + ang))
    ng = np.sign(diff) - np.sign(1.0 - dot)[:, None] * nm
    n_grad[valid] = ng / n_valid

    # depth term, aligned per group
    if groups is None:
        groups = np.zeros(len(pred_depth), dtype=int)
    depth_term = 0.0
    n_terms = 0
    dmono = np.asarray(cues.depth, dtype=np.float64)
    per_group_grad = np.zeros_like(pred_depth)
    for g in np.unique(groups[valid]):
        sel = valid & (groups == g)
        sol = _solve_scale_shift(pred_depth[sel], dmono[sel])
        if sol is None:
            flags["depth_skipped_groups"] += 1
            continue
        w, q = sol
        resid = w * pred_depth[sel] + q - dmono[sel]
        depth_term += float(np.mean(resid ** 2))
        # envelope theorem: gradient at the optimal (w, q)
        per_group_grad[sel] = 2.0 * w * resid / sel.sum()
        n_terms += 1
    if n_terms > 0:
        depth_term /= n_terms
        per_group_grad /= n_terms
    loss = normal_term + depth_weight * depth_term
    d_grad = depth_weight * per_group_grad
    flags["normal_term"] = normal_term
    flags["depth_term"] = depth_term
    return float(loss), d_grad, n_grad, flags


def mask_bce(opacity: np.ndarray, sky_mask: np.ndarray | None) -> float:
    """BCE(O, 1 - M_sky); 0 when no sky masks were provided."""
    if sky_mask is None:
        return 0.0
    o = np.clip(np.asarray(opacity, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    target = 1.0 - np.asarray(sky_mask, dtype=np.float64)
    return float(np.mean(-(target * np.log(o) + (1 - target) * np.log(1 - o))))


def mask_bce_grad(opacity: np.ndarray, sky_mask: np.ndarray | None) -> np.ndarray:
    opacity = np.asarray(opacity, dtype=np.float64)
    if sky_mask is None:
        return np.zeros_like(opacity)
    o = np.clip(opacity, _CLAMP, 1.0 - _CLAMP)
    target = 1.0 - np.asarray(sky_mask, dtype=np.float64)
    inside = (opacity > _CLAMP) & (opacity < 1.0 - _CLAMP)
    return np.where(inside, (-target / o + (1 - target) / (1 - o)), 0.0) / o.size


def entropy_reg(opacity_cr: np.ndarray) -> float:
    """Binary entropy of the close-range opacity, pushing it to 0 or 1."""
    x = np.clip(np.asarray(opacity_cr, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    return float(np.mean(-(x * np.log(x) + (1 - x) * np.log(1 - x))))


def entropy_reg_grad(opacity_cr: np.ndarray) -> np.ndarray:
    oc = np.asarray(opacity_cr, dtype=np.float64)
    x = np.clip(oc, _CLAMP, 1.0 - _CLAMP)
    inside = (oc > _CLAMP) & (oc < 1.0 - _CLAMP)
    return np.where(inside, np.log1p(-x) - np.log(x), 0.0) / x.size


def eikonal_reg(grads: np.ndarray) -> float:
    """mean (|grad S| - 1)^2 over sampled points."""
    g = np.asarray(grads, dtype=np.float64)
    norms = np.linalg.norm(g, axis=-1)
    return float(np.mean((norms - 1.0) ** 2))


def eikonal_reg_grad(grads: np.ndarray) -> np.ndarray:
    g = np.asarray(grads, dtype=np.float64)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    safe = np.maximum(norms, 1e-12)
    return 2.0 * (norms - 1.0) * g / safe / len(g)


def sparsity_reg(sdf_values: np.ndarray, s_reg: float) -> float:
    """Mean normalized-logistic-density of SDF samples in unobserved space."""
    if s_reg <= 0:
        raise ValueError("s_reg must be positive")
    return float(np.mean(nld(np.asarray(sdf_values, dtype=np.float64), s_reg)))


def sparsity_reg_grad(sdf_values: np.ndarray, s_reg: float) -> np.ndarray:
    v = np.asarray(sdf_values, dtype=np.float64)
    return nld_derivative(v, s_reg) / v.size


def total_loss(photometric: float, geometry: float, mask: float, eikonal: float,
               sparsity: float, entropy: float, weights: LossWeights,
               n_rays: int = 0, n_samples: int = 0) -> LossReport:
    """Weighted sum per the training objective; errors on non-finite terms."""
    terms = {"photometric": photometric, "geometry": geometry, "mask": mask,
             "eikonal": eikonal, "sparsity": sparsity, "entropy": entropy}
    for name, v in terms.items():
        if not np.isfinite(v):
            raise ValueError(f"non-finite loss term {name!r}: {v}")
    total = (photometric + weights.geometry * geometry + weights.mask * mask
             + weights.eikonal * eikonal + weights.sparsity * sparsity
             + weights.entropy * entropy)
    return LossReport(photometric, geometry, mask, eikonal, sparsity, entropy,
                      float(total), n_rays, n_samples)
