"""Occupancy-grid maintenance and close-range ray marching.

The marcher runs in three phases per ray batch: occupancy-restricted
uniform coarse sampling, multi-stage hierarchical up-sampling that
progressively sharpens a provisional opacity, and compaction that drops
samples behind (nearly) opaque matter. Variable-length per-ray sample
lists travel as a RayPack: flat arrays plus per-ray (offset, count) spans.
Segmented scans are computed on a padded (rays x max-count) layout, which
reproduces the per-ray sequential loop bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._neus import neus_alpha, nld
from .space import Aabb, ray_aabb_interval

__all__ = [
    "OccupancyGrid",
    "RayPack",
    "MarchConfig",
    "occ_update",
    "occ_march",
    "occ_march_batch",
    "hierarchical_upsample",
    "hierarchical_upsample_batch",
    "compact_and_pack",
    "pack_to_padded",
    "padded_transmittance",
    "save_occupancy",
    "load_occupancy",
]


@dataclass
class OccupancyGrid:
    """Decayed-score voxel grid; a voxel is occupied iff value > threshold."""

    aabb: Aabb
    resolution: np.ndarray
    value: np.ndarray
    threshold: float = 0.01
    decay: float = 0.95
    update_period: int = 300

    @classmethod
    def create(cls, aabb: Aabb, longest_axis_voxels: int = 128,
               threshold: float = 0.01, decay: float = 0.95,
               update_period: int = 300) -> "OccupancyGrid":
        ext = aabb.extents
        res = np.maximum(np.round(longest_axis_voxels * ext / ext.max()), 1).astype(int)
        value = np.ones(tuple(res), dtype=np.float32)  # all voxels start occupied
        return cls(aabb, res, value, threshold, decay, update_period)

    @property
    def occupied(self) -> np.ndarray:
        return self.value > self.threshold

    @property
    def voxel_size(self) -> np.ndarray:
        return self.aabb.extents / self.resolution

    @property
    def voxel_diagonal(self) -> float:
        return float(np.linalg.norm(self.voxel_size))

    def voxel_of(self, pts: np.ndarray) -> np.ndarray:
        """Integer voxel coordinates of points, clipped to the grid."""
        rel = (np.asarray(pts) - self.aabb.min) / self.voxel_size
        return np.clip(rel.astype(np.int64), 0, self.resolution - 1)

    def occupied_at(self, pts: np.ndarray) -> np.ndarray:
        v = self.voxel_of(pts)
        return self.occupied[v[..., 0], v[..., 1], v[..., 2]]

    def voxel_centers(self) -> np.ndarray:
        axes = [self.aabb.min[a] + (np.arange(self.resolution[a]) + 0.5)
                * self.voxel_size[a] for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def occ_update(grid: OccupancyGrid, sdf_fn, rng: np.random.Generator | None = None,
               exhaustive: bool = False) -> None:
    """Bootstrap refresh: score each voxel from the current SDF and fold it
    into the decayed value, value <- max(decay * value, score).

    Scores use the normalized-logistic-density surrogate at
    s_reg = voxel diagonal / 4, so inaccurate early fields stay
    conservative. Default probes one random interior point per voxel;
    exhaustive mode (tests) probes 8 corners + center and keeps the max.
    """
    centers = grid.voxel_centers().reshape(-1, 3)
    s_reg = grid.voxel_diagonal / 4.0
    if exhaustive:
        offsets = np.concatenate([np.zeros((1, 3)),
                                  np.array(np.meshgrid([-.5, .5], [-.5, .5], [-.5, .5]))
                                  .reshape(3, -1).T])
        score = np.zeros(len(centers), dtype=np.float64)
        for off in offsets:
            pts = centers + off * grid.voxel_size
            score = np.maximum(score, nld(np.asarray(sdf_fn(pts), dtype=np.float64), s_reg))
    else:
        if rng is None:
            rng = np.random.default_rng()
        pts = centers + (rng.random(centers.shape) - 0.5) * grid.voxel_size
        score = nld(np.asarray(sdf_fn(pts), dtype=np.float64), s_reg)
    score = score.reshape(grid.value.shape).astype(grid.value.dtype)
    np.maximum(grid.decay * grid.value, score, out=grid.value)


def occ_march_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    grid: OccupancyGrid,
    step: float,
    t_min: np.ndarray | float = 0.0,
    t_max: np.ndarray | float = np.inf,
    perturb: bool = False,
    rng: np.random.Generator | None = None,
    max_samples: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform steps over the ray/AABB overlap, keeping occupied voxels only.

    Sample k of a ray sits at t = t_near + (k + u) * step with u = 0.5
    (or uniform in [0,1) under perturb). Returns flat depths plus per-ray
    (offset, count).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(origins)
    t0, t1 = ray_aabb_interval(grid.aabb, origins, dirs)
    t0 = np.maximum(t0, t_min)
    t1 = np.minimum(t1, t_max)
    span = np.maximum(t1 - t0, 0.0)
    n_steps = np.ceil(span / step).astype(int)
    k_max = int(n_steps.max()) if n else 0
    if k_max == 0:
        z = np.zeros(n, dtype=np.int64)
        return np.empty(0), z, z
    ks = np.arange(k_max)[None, :]
    if perturb:
        if rng is None:
            rng = np.random.default_rng()
        u = rng.random((n, k_max))
    else:
        u = 0.5
    t = t0[:, None] + (ks + u) * step
    valid = t < t1[:, None]
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    keep = valid & grid.occupied_at(pts)
    if max_samples is not None:
        # cap per-ray budget, keeping the nearest samples
        keep &= np.cumsum(keep, axis=1) <= max_samples
    counts = keep.sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return t[keep], offsets, counts.astype(np.int64)


def occ_march(origin, direction, grid: OccupancyGrid, step: float,
              **kwargs) -> np.ndarray:
    """Single-ray surface over occ_march_batch."""
    t, _, _ = occ_march_batch(np.asarray(origin)[None], np.asarray(direction)[None],
                              grid, step, **kwargs)
    return t


def _sample_cdf_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Rowwise searchsorted: index of the first cdf entry >= u."""
    return (u[:, :, None] > cdf[:, None, :]).sum(axis=-1)


def hierarchical_upsample_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    t_pad: np.ndarray,
    valid: np.ndarray,
    sdf_pad: np.ndarray,
    sdf_fn,
    stages: int = 4,
    per_stage: int = 8,
    base_s: float = 64.0,
    perturb: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Multi-stage importance refinement of padded coarse samples.

    Per stage k, a provisional opacity at scale base_s * 2^k turns the
    current samples into interval weights; the stage budget is drawn by
    inverse-transform sampling of their normalized CDF and merged (sorted,
    deduplicated). The SDF is re-queried at new depths between stages.
    Returns (t_pad, valid, sdf_pad) with stages * per_stage extra columns.
    """
    big = np.float64(np.inf)
    t_pad = np.where(valid, t_pad, big)
    sdf_pad = np.where(valid, sdf_pad, 1e10)
    if rng is None:
        rng = np.random.default_rng()
    for k in range(stages):
        s = base_s * (2.0 ** k)
        rows = valid.sum(axis=1) >= 2
        tv, sv = t_pad, sdf_pad
        alpha = neus_alpha(sv[:, :-1], sv[:, 1:], s)
        pair_ok = valid[:, :-1] & valid[:, 1:]
        alpha = np.where(pair_ok, alpha, 0.0)
        trans = np.cumprod(1.0 - alpha + 1e-12, axis=1)
        trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
        w = alpha * trans + 1e-5 * pair_ok  # flat-CDF fallback when all weights vanish
        total = w.sum(axis=1, keepdims=True)
        cdf = np.cumsum(w, axis=1) / np.maximum(total, 1e-30)
        if perturb:
            u = (np.arange(per_stage)[None, :] + rng.random((len(t_pad), per_stage))) \
                / per_stage
        else:
            u = np.broadcast_to((np.arange(per_stage)[None, :] + 0.5) / per_stage,
                                (len(t_pad), per_stage)).copy()
        idx = np.clip(_sample_cdf_rows(cdf, u), 0, cdf.shape[1] - 1)
        r = np.arange(len(t_pad))[:, None]
        cdf_hi = cdf[r, idx]
        cdf_lo = np.where(idx > 0, cdf[r, np.maximum(idx - 1, 0)], 0.0)
        frac = np.where(cdf_hi > cdf_lo, (u - cdf_lo) / np.maximum(cdf_hi - cdf_lo, 1e-30),
                        0.5)
        t_lo = tv[r, idx]
        t_hi = tv[r, np.minimum(idx + 1, tv.shape[1] - 1)]
        with np.errstate(invalid="ignore"):
            t_new = t_lo + frac * (t_hi - t_lo)
        new_valid = rows[:, None] & np.isfinite(t_new)
        t_new = np.where(new_valid, t_new, big)
        pts = origins[:, None, :] + t_new[..., None] * dirs[:, None, :]
        sdf_new = np.where(new_valid, np.asarray(sdf_fn(pts.reshape(-1, 3)))
                           .reshape(t_new.shape), 1e10)
        t_pad = np.concatenate([t_pad, t_new], axis=1)
        sdf_pad = np.concatenate([sdf_pad, sdf_new], axis=1)
        valid = np.concatenate([valid, new_valid], axis=1)
        order = np.argsort(t_pad, axis=1, kind="stable")
        t_pad = np.take_along_axis(t_pad, order, axis=1)
        sdf_pad = np.take_along_axis(sdf_pad, order, axis=1)
        valid = np.take_along_axis(valid, order, axis=1)
        # drop exact duplicates (padding is inf, so guard the diff)
        dup = np.zeros_like(valid)
        with np.errstate(invalid="ignore"):
            dup[:, 1:] = (np.diff(t_pad, axis=1) == 0) & valid[:, 1:] & valid[:, :-1]
        valid &= ~dup
        t_pad = np.where(valid, t_pad, big)
        sdf_pad = np.where(valid, sdf_pad, 1e10)
    return t_pad, valid, sdf_pad


def hierarchical_upsample(origin, direction, coarse_t: np.ndarray,
                          coarse_sdf: np.ndarray, sdf_fn, stages: int = 4,
                          per_stage: int = 8, base_s: float = 64.0,
                          perturb: bool = False,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """Single-ray surface: refined, strictly increasing depths."""
    coarse_t = np.asarray(coarse_t, dtype=np.float64)
    if coarse_t.size < 2:
        raise ValueError("need at least 2 coarse samples")
    t_pad, valid, _ = hierarchical_upsample_batch(
        np.asarray(origin, dtype=np.float64)[None],
        np.asarray(direction, dtype=np.float64)[None],
        coarse_t[None], np.ones((1, coarse_t.size), dtype=bool),
        np.asarray(coarse_sdf, dtype=np.float64)[None],
        sdf_fn, stages, per_stage, base_s, perturb, rng)
    return t_pad[0][valid[0]]


@dataclass(frozen=True)
class MarchConfig:
    """Knobs of the three-phase close-range marcher."""

    max_cr_samples: int = 48
    max_dv_samples: int = 64
    coarse_step: float | None = None  # None: AABB longest axis / 96
    upsample_stages: int = 4
    per_stage: int = 8
    base_s: float = 64.0
    weight_floor: float = 1e-4

    def resolve_step(self, aabb: Aabb) -> float:
        return self.coarse_step if self.coarse_step else float(aabb.extents.max()) / 96.0


@dataclass
class RayPack:
    """Flattened per-sample arrays with per-ray (offset, count) spans."""

    origins: np.ndarray      # (R, 3)
    dirs: np.ndarray         # (R, 3) unit
    frame_ids: np.ndarray    # (R,)
    pixel_ids: np.ndarray    # (R,)
    t: np.ndarray            # (S,) depth, meters
    delta: np.ndarray        # (S,) interval; meters (cr) or warped (dv)
    tag: np.ndarray          # (S,) uint8: 0 close-range, 1 distant-view
    offset: np.ndarray       # (R,)
    count: np.ndarray        # (R,)

    def __post_init__(self):
        if self.offset.shape != self.count.shape:
            raise ValueError("span arrays disagree")
        if int(self.count.sum()) != len(self.t):
            raise ValueError("spans must partition the flat arrays")

    @property
    def n_rays(self) -> int:
        return len(self.origins)

    @property
    def n_samples(self) -> int:
        return len(self.t)

    def ray_index(self) -> np.ndarray:
        """Ray id of every flat sample."""
        return np.repeat(np.arange(self.n_rays), self.count)

    def positions(self) -> np.ndarray:
        rid = self.ray_index()
        return self.origins[rid] + self.t[:, None] * self.dirs[rid]


def pack_to_padded(flat: np.ndarray, offset: np.ndarray, count: np.ndarray,
                   fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """(S, ...) flat -> (R, T, ...) padded plus validity mask."""
    n = len(offset)
    t_max = int(count.max()) if n else 0
    ks = np.arange(t_max)[None, :]
    valid = ks < count[:, None]
    idx = np.minimum(offset[:, None] + ks, max(len(flat) - 1, 0))
    mask = valid.reshape(valid.shape + (1,) * (flat.ndim - 1))
    padded = np.where(mask, flat[idx], fill)
    return padded, valid


def padded_to_flat(padded: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return padded[valid]


def padded_transmittance(alpha: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Exclusive per-ray transmittance T_i = prod_{j<i} (1 - alpha_j).

    Padding rows multiply by exactly 1.0, so the result is bit-identical
    to a per-ray sequential loop.
    """
    one_minus = np.where(valid, 1.0 - alpha, 1.0)
    trans = np.cumprod(one_minus, axis=1)
    return np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)


def compact_and_pack(
    origins: np.ndarray,
    dirs: np.ndarray,
    frame_ids: np.ndarray,
    pixel_ids: np.ndarray,
    cr_t: np.ndarray, cr_valid: np.ndarray, cr_alpha: np.ndarray,
    dv_t: np.ndarray, dv_valid: np.ndarray, dv_alpha: np.ndarray,
    dv_delta: np.ndarray,
    weight_floor: float = 0.0,
    max_cr: int = 48,
    max_dv: int = 64,
) -> tuple[RayPack, np.ndarray, np.ndarray]:
    """Merge padded cr then dv samples per ray and drop meaningless ones.

    A sample is dropped when the running transmittance ahead of it falls
    below weight_floor (it can no longer contribute), or past the per-model
    caps. cr depths precede dv shell depths by construction. Returns the
    pack plus boolean keep-masks aligned with the padded inputs so callers
    can gather per-sample payloads.
    """
    origins = np.atleast_2d(origins)
    r = len(origins)
    cr_keep = cr_valid.copy()
    dv_keep = dv_valid.copy()
    if max_cr is not None:
        cr_keep &= np.cumsum(cr_keep, axis=1) <= max_cr
    if max_dv is not None:
        dv_keep &= np.cumsum(dv_keep, axis=1) <= max_dv
    if weight_floor > 0.0:
        alpha_all = np.concatenate([np.where(cr_keep, cr_alpha, 0.0),
                                    np.where(dv_keep, dv_alpha, 0.0)], axis=1)
        valid_all = np.concatenate([cr_keep, dv_keep], axis=1)
        trans = padded_transmittance(alpha_all, valid_all)
        live = trans >= weight_floor
        cr_keep &= live[:, :cr_keep.shape[1]]
        dv_keep &= live[:, cr_keep.shape[1]:]
    cr_counts = cr_keep.sum(axis=1)
    dv_counts = dv_keep.sum(axis=1)
    counts = (cr_counts + dv_counts).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    total = int(counts.sum())
    t = np.empty(total)
    delta = np.empty(total)
    tag = np.empty(total, dtype=np.uint8)
    # interleave per ray: cr block then dv block
    cr_dst = _block_destinations(offsets, np.zeros(r, dtype=np.int64), cr_keep)
    dv_dst = _block_destinations(offsets, cr_counts.astype(np.int64), dv_keep)
    t[cr_dst] = cr_t[cr_keep]
    tag[cr_dst] = 0
    t[dv_dst] = dv_t[dv_keep]
    tag[dv_dst] = 1
    delta[dv_dst] = dv_delta[dv_keep]
    # cr interval: forward difference within the kept cr block
    delta[cr_dst] = _forward_diff_by_ray(t, cr_dst, offsets, cr_counts.astype(np.int64))
    pack = RayPack(np.asarray(origins, dtype=np.float64),
                   np.atleast_2d(np.asarray(dirs, dtype=np.float64)),
                   np.asarray(frame_ids), np.asarray(pixel_ids),
                   t, delta, tag, offsets, counts)
    return pack, cr_keep, dv_keep


def _block_destinations(offsets: np.ndarray, base: np.ndarray,
                        keep: np.ndarray) -> np.ndarray:
    """Flat destination index for each kept padded sample."""
    rank = np.cumsum(keep, axis=1) - 1
    dst = offsets[:, None] + base[:, None] + rank
    return dst[keep]


def _forward_diff_by_ray(t: np.ndarray, pos: np.ndarray, offsets: np.ndarray,
                         cr_counts: np.ndarray) -> np.ndarray:
    """delta_i = t_{i+1} - t_i inside each ray's cr block; last gets its
    predecessor's delta (or 0 for singleton blocks). pos holds the flat
    destinations of the cr samples in row-major ray order."""
    if len(pos) == 0:
        return np.empty(0)
    block_last = np.repeat(offsets + cr_counts - 1, cr_counts)
    is_last = pos == block_last
    nxt = np.minimum(pos + 1, len(t) - 1)
    prv = np.maximum(pos - 1, 0)
    singleton = np.repeat(cr_counts, cr_counts) == 1
    fwd = t[nxt] - t[pos]
    bwd = t[pos] - t[prv]
    return np.where(is_last, np.where(singleton, 0.0, bwd), fwd)


def save_occupancy(path, grid: OccupancyGrid) -> None:
    """JSON header line + bit-packed voxel flags."""
    header = {"resolution": grid.resolution.tolist(), "aabb": grid.aabb.to_json(),
              "threshold": grid.threshold, "decay": grid.decay,
              "update_period": grid.update_period}
    bits = np.packbits(grid.occupied.reshape(-1).astype(np.uint8))
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(bits.tobytes())


def load_occupancy(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        bits = np.frombuffer(f.read(), dtype=np.uint8)
    res = np.asarray(header["resolution"], dtype=int)
    n = int(np.prod(res))
    occ = np.unpackbits(bits)[:n].reshape(tuple(res)).astype(bool)
    grid = OccupancyGrid(Aabb.from_json(header["aabb"]), res,
                         occ.astype(np.float32), header["threshold"],
                         header["decay"], header["update_period"])
    # loaded values are binary; occupied voxels get value 1 > threshold
    return grid
