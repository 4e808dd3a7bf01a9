"""The optimization loop: batch construction with error-map importance
sampling, pose refinement, schedules (level anneal, sigmoid-sharpness
floor, occupancy refresh), gradient assembly across all losses, optimizer
steps, and checkpointing.

Everything learnable (fields, embeddings, sharpness, pose deltas) lives in
one ParamStore, so a step is: march rays, query fields, composite, reduce
losses, pull cotangents back through the render and field stacks, then one
Adam update. With the determinism flag and a fixed seed, a run is a pure
function of (dataset bytes, config); resume restores the optimizer moments
and generator state bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .fields import AnnealMask, FieldSet, SMapping, pretrain_geometry
from .losses import (
    LossWeights,
    MonoCues,
    entropy_reg,
    entropy_reg_grad,
    eikonal_reg,
    eikonal_reg_grad,
    lidar_log_l1,
    lidar_log_l1_grad,
    mask_bce,
    mask_bce_grad,
    mono_geometry_loss,
    photometric_l1,
    photometric_l1_grad,
    sparsity_reg,
    sparsity_reg_grad,
    total_loss,
)
from .renderer import march_and_render, render_backward
from .sampling import OccupancyGrid, occ_update, save_occupancy
from .space import (
    RigidPose,
    delimit_close_range_aabb,
    estimate_street_frame,
    shell_radii,
)
from .diffcore.params import AdamState, ParamStore, adam_step
from .synthdata import DatasetOnDisk, load_dataset

_SEGMENT_LR_SCALES = {
    "cr/geo_hash": 1.0, "dv/hash": 1.0,
    "cr/geo_mlp": 0.1, "cr/color_mlp": 0.1, "dv/mlp": 0.1, "sky/mlp": 0.1,
    "s": 0.1, "embed": 0.1,
    "pose": 0.01,
}


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < 1e-12:
        return np.eye(3) + k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta ** 2
    return np.eye(3) + a * k + b * (k @ k)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_jacobians(w: np.ndarray) -> list:
    """dR/dw_i (3 matrices) of the exponential map at w."""
    w = np.asarray(w, dtype=np.float64)
    r = rotvec_to_matrix(w)
    theta2 = float(w @ w)
    out = []
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        if theta2 < 1e-16:
            out.append(_skew(e))
        else:
            v = w[i] * w + np.cross(w, (np.eye(3) - r) @ e)
            out.append(_skew(v) @ r / theta2)
    return out


def apply_pose_delta(pose: RigidPose, rotvec: np.ndarray,
                     trans: np.ndarray) -> RigidPose:
    """Left-multiplied correction of a camera-to-world pose."""
    r = rotvec_to_matrix(rotvec)
    return RigidPose(r @ pose.rotation, r @ pose.translation + np.asarray(trans))


def rotate_with_jacobian(w: np.ndarray, vecs: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray]:
    """(exp(w) @ v, J) with J[n, :, i] = d(exp(w) v_n)/d w_i."""
    r = rotvec_to_matrix(w)
    jac_mats = rotation_jacobians(w)
    vecs = np.atleast_2d(vecs)
    out = vecs @ r.T
    jac = np.stack([vecs @ jm.T for jm in jac_mats], axis=-1)
    return out, jac


class ErrorMaps:
    """Per-image error grids at 1/8 resolution driving pixel importance."""

    def __init__(self, n_frames: int, n_cams: int, height: int, width: int,
                 decay: float = 0.95):
        self.cell = 8
        self.gh = (height + self.cell - 1) // self.cell
        self.gw = (width + self.cell - 1) // self.cell
        self.height = height
        self.width = width
        self.decay = decay
        self.values = np.ones((n_frames, n_cams, self.gh, self.gw), dtype=np.float64)

    def update(self, frames, cams, pys, pxs, errors) -> None:
        cy = pys // self.cell
        cx = pxs // self.cell
        flat = np.ravel_multi_index((frames, cams, cy, cx), self.values.shape)
        order = np.argsort(flat, kind="stable")
        flat_sorted = flat[order]
        uniq, start = np.unique(flat_sorted, return_index=True)
        sums = np.add.reduceat(errors[order], start)
        counts = np.diff(np.concatenate([start, [len(flat)]]))
        v = self.values.reshape(-1)
        v[uniq] = self.decay * v[uniq] + sums / counts

    def sample_pixels(self, n: int, uniform_frac: float,
                      rng: np.random.Generator,
                      frame_mask: np.ndarray | None = None):
        """(frame, cam, py, px): (1 - uniform_frac) of picks proportional to
        the error cells (uniform within a cell), the rest uniform."""
        shape = self.values.shape
        weights = self.values.copy()
        if frame_mask is not None:
            weights[~frame_mask] = 0.0
        w = weights.reshape(-1)
        total = w.sum()
        n_imp = int(round(n * (1.0 - uniform_frac)))
        n_uni = n - n_imp
        picks = []
        if n_imp > 0 and total > 0:
            idx = rng.choice(len(w), size=n_imp, p=w / total)
            picks.append(idx)
        else:
            n_uni = n
        if n_uni > 0:
            if frame_mask is not None:
                allowed = np.nonzero(frame_mask.reshape(shape[0], -1).any(axis=1))[0]
            else:
                allowed = np.arange(shape[0])
            fidx = rng.choice(allowed, size=n_uni)
            rest = rng.integers(0, shape[1] * shape[2] * shape[3], size=n_uni)
            picks.append(fidx * (shape[1] * shape[2] * shape[3]) + rest)
        idx = np.concatenate(picks)
        f, c, cy, cx = np.unravel_index(idx, shape)
        py = np.minimum(cy * self.cell + rng.integers(0, self.cell, size=n),
                        self.height - 1)
        px = np.minimum(cx * self.cell + rng.integers(0, self.cell, size=n),
                        self.width - 1)
        return f, c, py, px


def schedule_state(cfg: Config, fields: FieldSet, iteration: int) -> dict:
    """Learning rate, level mask, sharpness floor, occupancy-refresh flag."""
    t = cfg.trainer
    if iteration < t.lr_warmup:
        lr = t.lr * (iteration + 1) / t.lr_warmup
    else:
        progress = (iteration - t.lr_warmup) / max(t.iters - t.lr_warmup, 1)
        lr = t.lr * (t.lr_min_frac + (1 - t.lr_min_frac)
                     * 0.5 * (1.0 + np.cos(np.pi * min(progress, 1.0))))
    mask = fields.anneal.mask(iteration)
    s_floor = fields.s_map.floor(iteration)
    do_occ = iteration > 0 and iteration % fields_occ_period(cfg) == 0
    return {"lr": float(lr), "level_mask": mask, "s_floor": s_floor,
            "do_occ_update": do_occ}


def fields_occ_period(cfg: Config) -> int:
    return max(cfg.sampling.occ_update_period, 1)


@dataclass
class TrainerState:
    cfg: Config
    dataset: DatasetOnDisk
    fields: FieldSet
    grid: OccupancyGrid
    maps: ErrorMaps
    adam: AdamState
    rng: np.random.Generator
    shells: object
    poses_street: list          # [frame][cam] RigidPose in street coords
    beams_street: list | None   # per frame (origins, dirs, ranges)
    train_frames: np.ndarray
    holdout_frames: np.ndarray
    world_to_street: RigidPose
    s_reg: float
    iteration: int = 0


def setup(dataset: DatasetOnDisk, cfg: Config) -> TrainerState:
    """Build all training state: street frame, AABB, fields, pretraining,
    occupancy grid, error maps, optimizer."""
    rng = np.random.default_rng(cfg.trainer.seed)
    traj = dataset.trajectory()
    frame = estimate_street_frame(traj)
    aabb = delimit_close_range_aabb(frame, dataset.camera_pose_list(),
                                    extend_m=cfg.space.extend_m)
    w2s = frame.world_to_street
    poses_street = [[w2s.compose(p) for p in fp] for fp in dataset.camera_poses]
    track = w2s.apply(traj.positions())
    f = cfg.fields
    anneal = AnnealMask(cfg.trainer.anneal_start,
                        max(int(cfg.trainer.anneal_full_frac * cfg.trainer.iters), 1),
                        f.cr_levels)
    has_lidar = dataset.lidar is not None
    s_map = SMapping(
        floor_start=int(cfg.trainer.s_floor_start_frac * cfg.trainer.iters),
        floor_end=cfg.trainer.iters,
        end_floor=cfg.trainer.s_floor_end,
        enabled=not has_lidar)
    fields = FieldSet.create(
        aabb, n_frames=dataset.n_frames, seed=cfg.trainer.seed,
        dtype=np.float32,
        cr_levels=f.cr_levels, cr_features=f.cr_features,
        cr_base_res_longest=f.cr_base_res_longest, cr_scale=f.cr_scale,
        cr_table_log2=f.cr_table_log2, geo_hidden=tuple(f.geo_hidden),
        feat_dim=f.feat_dim, color_hidden=tuple(f.color_hidden),
        cr_n_freq=f.cr_n_freq, dv_levels=f.dv_levels, dv_features=f.dv_features,
        dv_base_res_longest=f.dv_base_res_longest, dv_base_res_w=f.dv_base_res_w,
        dv_scale=f.dv_scale, dv_table_log2=f.dv_table_log2,
        dv_hidden=tuple(f.dv_hidden), dv_n_freq=f.dv_n_freq,
        sky_hidden=tuple(f.sky_hidden), sky_n_freq=f.sky_n_freq,
        embed_dim=f.embed_dim, s_init=f.s_init, anneal=anneal, s_map=s_map)
    fields.store.allocate("pose/rot", (dataset.n_frames, 3))
    fields.store.allocate("pose/trans", (dataset.n_frames, 3))
    if cfg.pretrain.mode != "none" and cfg.pretrain.iters > 0:
        pretrain_geometry(fields, track, mode=cfg.pretrain.mode,
                          ego_height=dataset.ego_height,
                          capsule_radius=cfg.pretrain.capsule_radius,
                          iters=cfg.pretrain.iters,
                          samples_per_step=cfg.pretrain.samples_per_step,
                          lr=cfg.pretrain.lr, seed=cfg.trainer.seed)
    grid = OccupancyGrid.create(aabb, cfg.sampling.occ_longest_voxels,
                                cfg.sampling.occ_threshold,
                                cfg.sampling.occ_decay,
                                cfg.sampling.occ_update_period)
    h, w = dataset.cameras[0].height, dataset.cameras[0].width
    maps = ErrorMaps(dataset.n_frames, dataset.n_cams, h, w,
                     cfg.trainer.error_map_decay)
    adam = AdamState(fields.store, lr=cfg.trainer.lr,
                     lr_scales=_SEGMENT_LR_SCALES)
    shells = shell_radii(cfg.space.n_dv_shells, cfg.space.r_max)
    beams = None
    if has_lidar:
        beams = []
        for o, d, r in dataset.lidar:
            beams.append((w2s.apply(o), d @ w2s.rotation.T, r))
    frames = np.arange(dataset.n_frames)
    hold = (frames % cfg.trainer.holdout_every) == cfg.trainer.holdout_offset
    s_reg = cfg.losses.s_reg_frac * aabb.diagonal
    return TrainerState(cfg, dataset, fields, grid, maps, adam, rng, shells,
                        poses_street, beams, frames[~hold], frames[hold],
                        w2s, s_reg)


def _refined_pose(state: TrainerState, f: int, c: int) -> RigidPose:
    base = state.poses_street[f][c]
    if not state.cfg.trainer.pose_refine:
        return base
    store = state.fields.store
    return apply_pose_delta(base, store.view("pose/rot")[f].astype(np.float64),
                            store.view("pose/trans")[f].astype(np.float64))


def _build_camera_rays(state: TrainerState, frames, cams, pys, pxs):
    """World(street)-frame rays through sampled pixel centers, grouped by
    (frame, cam) so the pose chain is applied once per group."""
    n = len(frames)
    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    base_dirs = np.empty((n, 3))   # pre-delta directions (pose backward)
    groups = []
    key = frames * 64 + cams
    for k in np.unique(key):
        sel = np.nonzero(key == k)[0]
        f, c = int(frames[sel[0]]), int(cams[sel[0]])
        cam = state.dataset.cameras[c]
        d_cam = cam.pixel_dirs(pxs[sel].astype(np.float64),
                               pys[sel].astype(np.float64))
        base = state.poses_street[f][c]
        d_base = d_cam @ base.rotation.T
        pose = _refined_pose(state, f, c)
        if state.cfg.trainer.pose_refine:
            w = state.fields.store.view("pose/rot")[f].astype(np.float64)
            r = rotvec_to_matrix(w)
            dirs[sel] = d_base @ r.T
        else:
            dirs[sel] = d_base
        origins[sel] = pose.translation
        base_dirs[sel] = d_base
        groups.append((f, c, sel))
    return origins, dirs, base_dirs, groups


def _backward_through_fields(state: TrainerState, pack, out, handles, cots,
                             embed_accum: dict):
    """Pull render cotangents into parameter gradients; returns per-sample
    x cotangents for the pose chain (value path only)."""
    fields = state.fields
    store = state.fields.store
    cr_rows = handles["cr_rows"]
    dv_rows = handles["dv_rows"]
    rid_all = handles["rid_all"]
    geo = handles["geo"]
    dt = store.dtype
    grad_bar = cots.grad_bar[cr_rows]
    sdf_bar = cots.sdf_bar[cr_rows]
    feat_bar = None
    if handles["rad_cache"] is not None and cr_rows.any():
        fb, nb, vb, eb = fields.cr.radiance_backward(
            store, handles["rad_cache"], cots.color_bar[cr_rows].astype(dt))
        feat_bar = fb
        # color head consumed the unit normal; push back to the raw gradient
        n_unit = handles["n_unit"]
        gnorm = np.maximum(np.linalg.norm(geo.grad, axis=1, keepdims=True), 1e-9)
        grad_bar = grad_bar + (nb - n_unit * (n_unit * nb).sum(1, keepdims=True)) \
            / gnorm
        rid_cr = rid_all[cr_rows]
        _scatter_embed(embed_accum, handles["frames"][rid_cr], eb)
    xbar_cr = fields.cr.sdf_backward(store, geo, sdf_bar.astype(dt),
                                     grad_bar.astype(dt),
                                     None if feat_bar is None else feat_bar)
    if handles["dv_cache"] is not None:
        dv_keep = handles["dv_keep"]
        dv_sel = handles["dv_valid_flat"]
        sigma_bar_pad = np.zeros(dv_keep.shape)
        rgb_bar_pad = np.zeros(dv_keep.shape + (3,))
        sigma_bar_pad[dv_keep] = cots.sigma_bar[dv_rows]
        rgb_bar_pad[dv_keep] = cots.color_bar[dv_rows]
        vb_dv, eb_dv = fields.dv.backward(
            store, handles["dv_cache"],
            sigma_bar_pad.reshape(-1)[dv_sel].astype(dt),
            rgb_bar_pad.reshape(-1, 3)[dv_sel].astype(dt))
        rid_dv = np.repeat(np.arange(pack.n_rays), dv_keep.shape[1])[dv_sel]
        _scatter_embed(embed_accum, handles["frames"][rid_dv], eb_dv)
    if handles["sky_cache"] is not None and cots.sky_bar is not None:
        _, eb_sky = fields.sky.backward(store, handles["sky_cache"],
                                        cots.sky_bar.astype(dt))
        _scatter_embed(embed_accum, handles["frames"], eb_sky)
    fields.s_map.backward(store, state.iteration, cots.s_bar)
    return xbar_cr


def _scatter_embed(accum: dict, frames: np.ndarray, embed_bar: np.ndarray) -> None:
    accum.setdefault("frames", []).append(np.asarray(frames))
    accum.setdefault("bars", []).append(np.asarray(embed_bar, dtype=np.float64))


def _flush_embed(state: TrainerState, accum: dict) -> None:
    if not accum:
        return
    frames = np.concatenate(accum["frames"])
    bars = np.concatenate(accum["bars"], axis=0)
    state.fields.bank.backward(state.fields.store, frames, bars)


def train_step(state: TrainerState):
    """One optimization step; returns the LossReport."""
    cfg = state.cfg
    fields = state.fields
    store = fields.store
    it = state.iteration
    sched = schedule_state(cfg, fields, it)
    if sched["do_occ_update"]:
        occ_update(state.grid, fields.sdf_value_fn(sched["level_mask"]), state.rng)
    ds = state.dataset
    sky_on = ds.masks is not None
    weights = LossWeights(
        geometry=cfg.losses.geometry_lidar if ds.lidar is not None
        else cfg.losses.geometry_mono,
        mask=cfg.losses.mask if sky_on else 0.0,
        eikonal=cfg.losses.eikonal, sparsity=cfg.losses.sparsity,
        entropy=cfg.losses.entropy, mono_depth=cfg.losses.mono_depth)

    frame_mask = np.zeros_like(state.maps.values, dtype=bool)
    frame_mask[state.train_frames] = True
    f, c, py, px = state.maps.sample_pixels(cfg.trainer.rays_per_batch,
                                            cfg.trainer.uniform_pixel_frac,
                                            state.rng, frame_mask)
    origins, dirs, base_dirs, groups = _build_camera_rays(state, f, c, py, px)
    pack, out, handles = march_and_render(
        state.fields, state.grid, state.shells, cfg.sampling,
        cfg.space.dv_tail_delta, origins, dirs, f, sky_on=sky_on,
        perturb=True, rng=state.rng, level_mask=sched["level_mask"],
        iteration=it)
    pack.pixel_ids[...] = py * state.dataset.cameras[0].width + px
    target = ds.images[f, c, py, px].astype(np.float64)
    loss_photo = photometric_l1(out.rgb_all, target)
    rgb_bar = photometric_l1_grad(out.rgb_all, target)

    loss_mask_v = 0.0
    op_bar = None
    if sky_on:
        sky_target = ds.masks[f, c, py, px]
        loss_mask_v = mask_bce(out.opacity, sky_target)
        op_bar = mask_bce_grad(out.opacity, sky_target) * weights.mask
    loss_entropy = entropy_reg(out.opacity_cr)
    ocr_bar = entropy_reg_grad(out.opacity_cr) * weights.entropy

    # geometry supervision
    loss_geo = 0.0
    depth_bar = None
    normal_bar = None
    beam_pack = beam_out = beam_handles = beam_depth_bar = None
    if ds.lidar is not None:
        bo, bd, br, bf = _sample_beams(state)
        if len(bo):
            # march only to just past the measured return: everything up
            # to the surface still carves free space, behind it is occluded
            beam_pack, beam_out, beam_handles = march_and_render(
                state.fields, state.grid, state.shells, cfg.sampling,
                cfg.space.dv_tail_delta, bo, bd, bf, sky_on=False,
                perturb=True, rng=state.rng, level_mask=sched["level_mask"],
                iteration=it, want_color=False, natural_tail=True,
                t_max=br + 3.0)
            loss_geo = lidar_log_l1(beam_out.depth, br)
            beam_depth_bar = lidar_log_l1_grad(beam_out.depth, br) \
                * weights.geometry
    elif ds.mono_depth is not None:
        cues = MonoCues(ds.mono_depth[f, c, py, px].astype(np.float64),
                        _mono_normals_street(state, f, c, py, px),
                        np.isfinite(ds.mono_depth[f, c, py, px]))
        loss_geo, dgrad, ngrad, _ = mono_geometry_loss(
            out.depth, out.normal, cues, depth_weight=weights.mono_depth,
            groups=(f * 64 + c))
        depth_bar = dgrad * weights.geometry
        normal_bar = ngrad * weights.geometry

    # regularizers on uniform AABB samples (+ ray-sample gradients)
    n_uni = cfg.losses.uniform_samples
    aabb = fields.cr.aabb
    q = state.rng.uniform(aabb.min, aabb.max, size=(n_uni, 3))
    uni = fields.cr.sdf_query(store, q, level_mask=sched["level_mask"],
                              want_grad=True, want_cache=True)
    all_grads = np.concatenate([handles["geo"].grad, uni.grad], axis=0)
    loss_eik = eikonal_reg(all_grads)
    eik_bar = eikonal_reg_grad(all_grads) * weights.eikonal
    loss_sparse = sparsity_reg(uni.sdf, state.s_reg)
    sparse_bar = sparsity_reg_grad(uni.sdf, state.s_reg) * weights.sparsity

    report = total_loss(loss_photo, loss_geo, loss_mask_v, loss_eik, loss_sparse,
                        loss_entropy, weights, n_rays=pack.n_rays,
                        n_samples=pack.n_samples)
    report.extras["s_eff"] = handles["s_eff"]
    report.extras["lr"] = sched["lr"]
    if cfg.trainer.pose_refine:
        report.extras["pose_rot_norm"] = float(
            np.linalg.norm(store.view("pose/rot"), axis=1).mean())
        report.extras["pose_trans_norm"] = float(
            np.linalg.norm(store.view("pose/trans"), axis=1).mean())

    # backward
    embed_accum: dict = {}
    cots = render_backward(pack, out, handles["s_eff"], rgb_all_bar=rgb_bar,
                           depth_bar=depth_bar, opacity_bar=op_bar,
                           opacity_cr_bar=ocr_bar, normal_bar=normal_bar)
    n_ray_samples = int(handles["cr_rows"].sum())
    cots.grad_bar[handles["cr_rows"]] += eik_bar[:n_ray_samples]
    xbar_cr = _backward_through_fields(state, pack, out, handles, cots,
                                       embed_accum)
    if beam_pack is not None:
        bcots = render_backward(beam_pack, beam_out, beam_handles["s_eff"],
                                depth_bar=beam_depth_bar)
        _backward_through_fields(state, beam_pack, beam_out, beam_handles,
                                 bcots, embed_accum)
    fields.cr.sdf_backward(store, uni, sparse_bar.astype(store.dtype),
                           eik_bar[n_ray_samples:].astype(store.dtype))
    _flush_embed(state, embed_accum)

    # pose deltas: photometric-only geometric path
    if cfg.trainer.pose_refine and it >= cfg.trainer.pose_freeze_frac * cfg.trainer.iters:
        _pose_backward(state, pack, out, handles, rgb_bar, base_dirs, groups)
    else:
        store.grad_view("pose/rot")[...] = 0.0
        store.grad_view("pose/trans")[...] = 0.0

    adam_step(state.adam, store, lr=sched["lr"])
    err = np.abs(out.rgb_all - target).mean(axis=1)
    state.maps.update(f, c, py, px, err)
    state.iteration += 1
    return report


def _mono_normals_street(state: TrainerState, f, c, py, px) -> np.ndarray:
    """Camera-space mono normal cues rotated into the street frame, where
    the rendered normals live."""
    n_cam = state.dataset.mono_normal[f, c, py, px].astype(np.float64)
    out = np.zeros_like(n_cam)
    key = f * 64 + c
    for k in np.unique(key):
        sel = key == k
        fi, ci = int(f[np.nonzero(sel)[0][0]]), int(c[np.nonzero(sel)[0][0]])
        pose = state.poses_street[fi][ci]
        out[sel] = n_cam[sel] @ pose.rotation.T
    return out


def _sample_beams(state: TrainerState):
    """Random lidar beams with returns from random training frames."""
    n = state.cfg.trainer.beams_per_batch
    fr = state.rng.choice(state.train_frames, size=4)
    os, dss, rs, fs = [], [], [], []
    for f in np.unique(fr):
        o, d, r = state.beams_street[f]
        idx = np.nonzero(r > 0)[0]
        take = min(len(idx), n // 4)
        if take == 0:
            continue
        pick = state.rng.choice(idx, size=take, replace=False)
        os.append(o[pick])
        dss.append(d[pick])
        rs.append(r[pick])
        fs.append(np.full(take, f, dtype=np.int64))
    if not os:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64)
    return (np.concatenate(os), np.concatenate(dss), np.concatenate(rs),
            np.concatenate(fs))


def _pose_backward(state: TrainerState, pack, out, handles, rgb_bar,
                   base_dirs, groups) -> None:
    """Photometric-only pose-delta gradients through the geometric path:
    d loss/d x_i = sdf_bar_i * grad_i, chained to each frame's correction."""
    cots = render_backward(pack, out, handles["s_eff"], rgb_all_bar=rgb_bar)
    cr_rows = handles["cr_rows"]
    rid = handles["rid_all"]
    xbar = cots.sdf_bar[cr_rows, None] * handles["geo"].grad
    rid_cr = rid[cr_rows]
    t_cr = pack.t[cr_rows]
    n_rays = pack.n_rays
    obar = np.zeros((n_rays, 3))
    dbar = np.zeros((n_rays, 3))
    for a in range(3):
        obar[:, a] = np.bincount(rid_cr, weights=xbar[:, a], minlength=n_rays)
        dbar[:, a] = np.bincount(rid_cr, weights=xbar[:, a] * t_cr,
                                 minlength=n_rays)
    store = state.fields.store
    g_rot = store.grad_view("pose/rot")
    g_tr = store.grad_view("pose/trans")
    for fi, ci, sel in groups:
        w = store.view("pose/rot")[fi].astype(np.float64)
        base = state.poses_street[fi][ci]
        _, jac_d = rotate_with_jacobian(w, base_dirs[sel])
        _, jac_o = rotate_with_jacobian(w, base.translation[None])
        g_rot[fi] += np.einsum("na,nai->i", dbar[sel], jac_d) \
            + np.einsum("na,ai->i", obar[sel], jac_o[0])
        g_tr[fi] += obar[sel].sum(axis=0)


def train(dataset_dir, cfg: Config, out_dir, resume: str | None = None) -> Path:
    """Full training run; returns the checkpoint directory path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset_dir if isinstance(dataset_dir, DatasetOnDisk) \
        else load_dataset(dataset_dir)
    state = setup(dataset, cfg)
    log_path = out / "train_log.jsonl"
    if resume:
        _load_resume(state, Path(resume))
    t0 = time.time()
    with open(log_path, "a") as log:
        while state.iteration < cfg.trainer.iters:
            report = train_step(state)
            if state.iteration % cfg.trainer.log_every == 0 \
                    or state.iteration == cfg.trainer.iters:
                entry = {"iter": state.iteration, "wall_s": time.time() - t0}
                entry.update(report.to_json())
                log.write(json.dumps(entry) + "\n")
                log.flush()
    return save_checkpoint(state, out)


def save_checkpoint(state: TrainerState, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w2s = state.world_to_street
    specs = state.fields.specs_json()
    specs["world_to_street"] = {"rotation": w2s.rotation.tolist(),
                                "translation": w2s.translation.tolist()}
    specs["config"] = state.cfg.to_json()
    specs["iteration"] = state.iteration
    state.fields.store.save(out / "params.bin", specs=specs)
    save_occupancy(out / "occupancy.bin", state.grid)
    np.savez(out / "resume.npz",
             error_maps=state.maps.values,
             occ_value=state.grid.value,
             **state.adam.state_arrays())
    st = {"iteration": state.iteration,
          "rng_state": state.rng.bit_generator.state}
    (out / "train_state.json").write_text(json.dumps(st))
    return out


def _load_resume(state: TrainerState, ckpt: Path) -> None:
    loaded = FieldSet.load(ckpt / "params.bin", dtype=state.fields.store.dtype)
    state.fields.store.values[...] = loaded.store.values
    blob = np.load(ckpt / "resume.npz")
    state.adam.load_state_arrays({k: blob[k] for k in ("m", "v", "step_count")})
    state.maps.values[...] = blob["error_maps"]
    state.grid.value[...] = blob["occ_value"]
    st = json.loads((ckpt / "train_state.json").read_text())
    state.iteration = int(st["iteration"])
    state.rng.bit_generator.state = st["rng_state"]
