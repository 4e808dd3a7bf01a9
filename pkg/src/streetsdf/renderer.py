"""Joint volume rendering of close-range + distant-view + sky, plus sphere
tracing and lidar simulation.

Per merged near-to-far sample list, opacity comes from two rules:
close-range samples map consecutive SDF pairs through the scaled-sigmoid
ratio (``neus_alpha``), distant-view samples use exponential transmittance
in warped coordinates, alpha = 1 - exp(-sigma * delta_w). Compositing over
the merged list gives opacity, depth and color

    O = sum T_i a_i     D = sum T_i a_i t_i     C = sum T_i a_i c_i

with T_i the accumulated transmittance, and the sky radiance fills the
final, infinitely long interval with alpha 1 - O.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._neus import neus_alpha as _neus_alpha_impl
from ._neus import neus_alpha_backward, sigmoid
from .sampling import RayPack, pack_to_padded, padded_transmittance

__all__ = [
    "RenderOutput",
    "RenderCotangents",
    "neus_alpha",
    "render_rays",
    "render_backward",
    "sphere_trace",
    "sphere_trace_batch",
]

_NORM_EPS = 1e-9


def neus_alpha(sdf_i, sdf_next, s: float):
    """Opacity from two consecutive SDF samples at sigmoid scale s."""
    return _neus_alpha_impl(sdf_i, sdf_next, s)


@dataclass
class RenderOutput:
    rgb_all: np.ndarray      # (R, 3) with sky compositing when enabled
    rgb_crdv: np.ndarray     # (R, 3) close-range + distant-view only
    depth: np.ndarray        # (R,) meters
    opacity: np.ndarray      # (R,) cr+dv weight sum
    opacity_cr: np.ndarray   # (R,) weight sum restricted to cr samples
    normal: np.ndarray       # (R, 3) weight-averaged unit gradients, renormalized
    weights: np.ndarray      # (S,) flat per-sample T_i * alpha_i
    cache: tuple | None = None


@dataclass
class RenderCotangents:
    """Per-sample and per-parameter cotangents produced by render_backward."""

    sdf_bar: np.ndarray      # (S,)
    grad_bar: np.ndarray     # (S, 3)
    color_bar: np.ndarray    # (S, 3)
    sigma_bar: np.ndarray    # (S,)
    s_bar: float
    sky_bar: np.ndarray | None  # (R, 3)
    weight_bar_flat: np.ndarray  # (S,) d loss / d alpha (for pose chain reuse)


def render_rays(
    pack: RayPack,
    sdf: np.ndarray,
    grad: np.ndarray,
    color: np.ndarray,
    sigma: np.ndarray,
    s: float,
    sky_rgb: np.ndarray | None = None,
    want_cache: bool = False,
) -> RenderOutput:
    """Composite a packed sample set.

    sdf/grad feed the close-range rows, sigma the distant-view rows (with
    pack.delta as the warped interval), color feeds every row. sky_rgb
    (R, 3) enables sky compositing; rays with empty spans then render the
    sky color alone (zeros otherwise).
    """
    off, cnt = pack.offset, pack.count
    t_pad, valid = pack_to_padded(pack.t.astype(np.float64), off, cnt)
    sdf_pad, _ = pack_to_padded(np.asarray(sdf, dtype=np.float64), off, cnt, fill=1e10)
    tag_pad, _ = pack_to_padded(pack.tag.astype(np.int64), off, cnt, fill=1)
    delta_pad, _ = pack_to_padded(np.asarray(pack.delta, dtype=np.float64), off, cnt)
    sigma_pad, _ = pack_to_padded(np.asarray(sigma, dtype=np.float64), off, cnt)
    color_pad, _ = pack_to_padded(np.asarray(color, dtype=np.float64), off, cnt)
    grad_pad, _ = pack_to_padded(np.asarray(grad, dtype=np.float64), off, cnt)

    cr = valid & (tag_pad == 0)
    dv = valid & (tag_pad == 1)
    pair = cr & np.concatenate([cr[:, 1:], np.zeros_like(cr[:, :1])], axis=1)

    alpha = np.zeros_like(t_pad)
    sdf_next = np.concatenate([sdf_pad[:, 1:], np.full_like(sdf_pad[:, :1], 1e10)], axis=1)
    a_cr = _neus_alpha_impl(sdf_pad, sdf_next, s)
    alpha[pair] = a_cr[pair]
    a_dv = 1.0 - np.exp(-np.maximum(sigma_pad, 0.0) * delta_pad)
    alpha[dv] = a_dv[dv]

    trans = padded_transmittance(alpha, valid)
    w = np.where(valid, trans * alpha, 0.0)

    opacity = w.sum(axis=1)
    depth = (w * t_pad).sum(axis=1)
    rgb_crdv = np.einsum("rt,rtc->rc", w, color_pad)
    w_cr = np.where(cr, w, 0.0)
    opacity_cr = w_cr.sum(axis=1)

    gnorm = np.linalg.norm(grad_pad, axis=-1)
    n_unit = grad_pad / np.maximum(gnorm, _NORM_EPS)[..., None]
    n_acc = np.einsum("rt,rtc->rc", w_cr, n_unit)
    n_len = np.linalg.norm(n_acc, axis=-1)
    normal = n_acc / np.maximum(n_len, _NORM_EPS)[..., None]

    if sky_rgb is not None:
        rgb_all = rgb_crdv + (1.0 - opacity[:, None]) * np.asarray(sky_rgb, dtype=np.float64)
    else:
        rgb_all = rgb_crdv
    cache = None
    if want_cache:
        cache = (t_pad, valid, cr, dv, pair, alpha, trans, w, w_cr, sdf_pad, sdf_next,
                 sigma_pad, delta_pad, color_pad, grad_pad, gnorm, n_unit, n_acc, n_len,
                 opacity, normal, sky_rgb)
    return RenderOutput(rgb_all, rgb_crdv, depth, opacity, opacity_cr, normal,
                        w[valid], cache)


def render_backward(
    pack: RayPack,
    out: RenderOutput,
    s: float,
    rgb_all_bar: np.ndarray | None = None,
    depth_bar: np.ndarray | None = None,
    opacity_bar: np.ndarray | None = None,
    opacity_cr_bar: np.ndarray | None = None,
    normal_bar: np.ndarray | None = None,
) -> RenderCotangents:
    """Pull output cotangents back to per-sample inputs. Requires the
    forward to have been run with want_cache=True."""
    (t_pad, valid, cr, dv, pair, alpha, trans, w, w_cr, sdf_pad, sdf_next,
     sigma_pad, delta_pad, color_pad, grad_pad, gnorm, n_unit, n_acc, n_len,
     opacity, normal, sky_rgb) = out.cache
    r, t_max = t_pad.shape

    def z(shape):
        return np.zeros(shape, dtype=np.float64)

    c_all_bar = z((r, 3)) if rgb_all_bar is None else np.asarray(rgb_all_bar, dtype=np.float64)
    d_bar = z(r) if depth_bar is None else np.asarray(depth_bar, dtype=np.float64)
    o_bar = z(r) if opacity_bar is None else np.asarray(opacity_bar, dtype=np.float64).copy()
    ocr_bar = z(r) if opacity_cr_bar is None else np.asarray(opacity_cr_bar, dtype=np.float64)
    n_bar = z((r, 3)) if normal_bar is None else np.asarray(normal_bar, dtype=np.float64)

    sky_bar = None
    c_crdv_bar = c_all_bar
    if sky_rgb is not None:
        sky_bar = (1.0 - opacity[:, None]) * c_all_bar
        o_bar = o_bar - (c_all_bar * sky_rgb).sum(axis=-1)

    # normalize backward: normal = n_acc / max(|n_acc|, eps)
    denom = np.maximum(n_len, _NORM_EPS)[:, None]
    n_acc_bar = (n_bar - normal * (normal * n_bar).sum(-1, keepdims=True)) / denom

    color_bar_pad = w[..., None] * c_crdv_bar[:, None, :]
    w_bar = (color_pad * c_crdv_bar[:, None, :]).sum(-1) \
        + t_pad * d_bar[:, None] + o_bar[:, None] \
        + np.where(cr, ocr_bar[:, None] + (n_unit * n_acc_bar[:, None, :]).sum(-1), 0.0)
    w_bar = np.where(valid, w_bar, 0.0)

    # unit-normal backward into the raw spatial gradient (cr rows only)
    n_unit_bar = w_cr[..., None] * n_acc_bar[:, None, :]
    gdenom = np.maximum(gnorm, _NORM_EPS)[..., None]
    grad_bar_pad = (n_unit_bar - n_unit * (n_unit * n_unit_bar).sum(-1, keepdims=True)) \
        / gdenom
    grad_bar_pad = np.where(cr[..., None], grad_bar_pad, 0.0)

    # w_i = T_i alpha_i; T depends on earlier alphas
    alpha_bar = trans * w_bar
    wv = w * w_bar
    suffix = np.cumsum(wv[:, ::-1], axis=1)[:, ::-1] - wv
    one_minus = 1.0 - alpha
    safe = one_minus > 1e-12
    alpha_bar = alpha_bar - np.where(safe, suffix / np.where(safe, one_minus, 1.0), 0.0)
    alpha_bar = np.where(valid, alpha_bar, 0.0)

    # close-range pairs -> sdf cotangents and s
    si_bar, sn_bar, s_bar = neus_alpha_backward(
        sdf_pad, sdf_next, s, np.where(pair, alpha_bar, 0.0))
    sdf_bar_pad = np.where(pair, si_bar, 0.0)
    sdf_bar_pad[:, 1:] += np.where(pair[:, :-1], sn_bar[:, :-1], 0.0)

    # distant-view: alpha = 1 - exp(-sigma * delta)
    sigma_bar_pad = np.where(dv & (sigma_pad > 0), alpha_bar * delta_pad * (1.0 - alpha), 0.0)

    def unpad(padded):
        return padded[valid]

    return RenderCotangents(
        sdf_bar=unpad(sdf_bar_pad),
        grad_bar=grad_bar_pad[valid],
        color_bar=color_bar_pad[valid],
        sigma_bar=unpad(sigma_bar_pad),
        s_bar=float(s_bar),
        sky_bar=sky_bar,
        weight_bar_flat=unpad(w_bar),
    )


@dataclass
class SphereTraceResult:
    hit: np.ndarray        # (N,) bool
    t: np.ndarray          # (N,) depth at hit (unspecified on miss)
    x: np.ndarray          # (N, 3)
    normal: np.ndarray     # (N, 3) unit, from the SDF gradient
    converged: np.ndarray  # (N,) False where max_iters ran out


def sphere_trace_batch(
    sdf_fn,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_min: np.ndarray | float = 0.0,
    t_max: np.ndarray | float = np.inf,
    max_iters: int = 256,
    eps: float = 1e-4,
    step_scale: float = 0.8,
    grad_fn=None,
) -> SphereTraceResult:
    """Vectorized sphere tracing: advance t by step_scale * sdf until |sdf|
    falls under eps (hit, refined by 8 bisection steps once the sign flips)
    or t leaves [t_min, t_max] (miss).

    grad_fn supplies analytic normals; otherwise central differences of
    sdf_fn are used.
    """
    if eps <= 0 or not (0 < step_scale <= 1):
        raise ValueError("need eps > 0 and step_scale in (0, 1]")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(origins)
    t = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
    t_hi = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
    active = t < t_hi
    hit = np.zeros(n, dtype=bool)
    converged = np.ones(n, dtype=bool)
    t_prev = t.copy()
    s_prev = np.full(n, np.inf)
    crossed_lo = np.zeros(n, dtype=np.float64)
    crossed_hi = np.zeros(n, dtype=np.float64)
    crossed = np.zeros(n, dtype=bool)
    for _ in range(max_iters):
        if not active.any():
            break
        x = origins[active] + t[active, None] * dirs[active]
        sv = np.asarray(sdf_fn(x), dtype=np.float64)
        idx = np.flatnonzero(active)
        direct = np.abs(sv) < eps
        hit[idx[direct]] = True
        sign_flip = (sv < 0) & (s_prev[idx] > 0)
        flip_ids = idx[sign_flip & ~direct]
        crossed[flip_ids] = True
        crossed_lo[flip_ids] = t_prev[flip_ids]
        crossed_hi[flip_ids] = t[flip_ids]
        done = direct | (sign_flip & ~direct)
        t_prev[idx] = t[idx]
        s_prev[idx] = sv
        t[idx[~done]] += step_scale * np.maximum(sv[~done], eps)
        out = t[idx] > t_hi[idx]
        active[idx[done | out]] = False
    converged[active] = False
    # bisection refinement where a sign change bracketed the surface
    if crossed.any():
        ids = np.flatnonzero(crossed)
        lo, hi = crossed_lo[ids].copy(), crossed_hi[ids].copy()
        for _ in range(8):
            mid = 0.5 * (lo + hi)
            x = origins[ids] + mid[:, None] * dirs[ids]
            sv = np.asarray(sdf_fn(x), dtype=np.float64)
            neg = sv < 0
            hi[neg] = mid[neg]
            lo[~neg] = mid[~neg]
        t[ids] = 0.5 * (lo + hi)
        hit[ids] = True
    x = origins + t[:, None] * dirs
    if grad_fn is not None:
        g = np.asarray(grad_fn(x), dtype=np.float64)
    else:
        g = _fd_gradient(sdf_fn, x, h=max(eps * 0.5, 1e-6))
    normal = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), _NORM_EPS)
    return SphereTraceResult(hit & converged, t, x, normal, converged)


def _fd_gradient(sdf_fn, x: np.ndarray, h: float) -> np.ndarray:
    g = np.empty_like(x)
    for a in range(3):
        d = np.zeros(3)
        d[a] = h
        g[:, a] = (np.asarray(sdf_fn(x + d)) - np.asarray(sdf_fn(x - d))) / (2 * h)
    return g


def sphere_trace(sdf_fn, origin, direction, t_min: float = 0.0,
                 t_max: float = np.inf, max_iters: int = 256, eps: float = 1e-4,
                 step_scale: float = 0.8, grad_fn=None):
    """Single-ray surface: dict-like result with hit/t/x/normal/converged."""
    res = sphere_trace_batch(sdf_fn, np.asarray(origin)[None],
                             np.asarray(direction)[None], t_min, t_max,
                             max_iters, eps, step_scale, grad_fn)
    return SphereTraceResult(res.hit[0], res.t[0], res.x[0], res.normal[0],
                             res.converged[0])


def march_and_render(fields, grid, shells, sampling_cfg, dv_tail_delta,
                     origins, dirs, frames, sky_on: bool,
                     perturb: bool = False, rng=None, level_mask=None,
                     iteration: int = 0, want_color: bool = True,
                     natural_tail: bool = False, s_override: float | None = None,
                     t_max=np.inf):
    """Full forward pipeline over a ray batch: occupancy-restricted coarse
    march, hierarchical up-sampling, distant shells, field queries,
    compaction, and joint compositing.

    Returns (pack, RenderOutput, handles); handles carries the field caches
    the training backward needs. Deterministic with perturb off. Without a
    sky model the final warped step is made effectively infinite so the far
    field absorbs the sky, unless natural_tail is set (depth-supervised
    beams keep the true interval).
    """
    from .sampling import (
        compact_and_pack,
        hierarchical_upsample_batch,
        occ_march_batch,
        pack_to_padded,
    )
    from .space import cuboid_coords_and_norm, distant_samples_batch

    store = fields.store
    aabb = fields.cr.aabb
    s_eff = s_override if s_override is not None \
        else fields.s_map.effective(store, iteration)
    sdf_fn = fields.sdf_value_fn(level_mask=level_mask)
    step = sampling_cfg.coarse_step \
        or aabb.extents.max() / sampling_cfg.coarse_divisor
    t_flat, off, cnt = occ_march_batch(
        origins, dirs, grid, step, t_max=t_max, perturb=perturb, rng=rng,
        max_samples=sampling_cfg.max_coarse)
    t_pad, valid = pack_to_padded(t_flat, off, cnt)
    rid = np.repeat(np.arange(len(origins)), cnt)
    sdf_flat = np.asarray(sdf_fn(origins[rid] + t_flat[:, None] * dirs[rid])) \
        if len(t_flat) else np.empty(0)
    sdf_pad, _ = pack_to_padded(sdf_flat, off, cnt, fill=1e10)
    if t_pad.shape[1] >= 2:
        t_pad, valid, sdf_pad = hierarchical_upsample_batch(
            origins, dirs, t_pad, valid, sdf_pad, sdf_fn,
            stages=sampling_cfg.upsample_stages,
            per_stage=sampling_cfg.per_stage,
            base_s=sampling_cfg.base_s, perturb=perturb, rng=rng)
    # provisional close-range alphas for compaction
    pair = valid[:, :-1] & valid[:, 1:] if t_pad.shape[1] >= 2 else \
        np.zeros((len(origins), 0), dtype=bool)
    a_cr = np.zeros_like(t_pad)
    if t_pad.shape[1] >= 2:
        a_cr[:, :-1] = np.where(
            pair, _neus_alpha_impl(sdf_pad[:, :-1], sdf_pad[:, 1:], s_eff), 0.0)
    # distant shells
    dv_t = distant_samples_batch(origins, dirs, aabb, shells,
                                 perturb=perturb, rng=rng)
    dv_valid = np.isfinite(dv_t)
    dv_t = np.where(dv_valid, dv_t, 1e12)
    dv_pts = origins[:, None, :] + dv_t[..., None] * dirs[:, None, :]
    uw = np.zeros(dv_pts.shape[:-1] + (4,))
    flat_pts = dv_pts.reshape(-1, 3)
    ok = dv_valid.reshape(-1)
    if ok.any():
        # lenient warp: slab-exit roundoff may leave rho a hair under 1
        xhat, rho = cuboid_coords_and_norm(aabb, flat_pts[ok])
        rho = np.maximum(rho, 1.0)
        uw.reshape(-1, 4)[ok] = np.concatenate(
            [xhat / rho[:, None], (1.0 / rho)[:, None]], axis=1)
    w_coord = uw[..., 3]
    dv_delta = np.zeros_like(w_coord)
    dv_delta[:, :-1] = np.maximum(w_coord[:, :-1] - w_coord[:, 1:], 0.0)
    if sky_on or natural_tail:
        dv_delta[:, -1] = w_coord[:, -1]
    else:
        dv_delta[:, -1] = dv_tail_delta
    n_rays = len(origins)
    embed_ray = fields.bank.lookup(store, frames)
    dv_sigma_pad = np.zeros_like(dv_t)
    dv_rgb_pad = np.zeros(dv_t.shape + (3,))
    dv_cache = None
    dv_sel = dv_valid.reshape(-1)
    if dv_sel.any():
        rid_dv = np.repeat(np.arange(n_rays), dv_t.shape[1])[dv_sel]
        sigma, rgb, dv_cache = fields.dv.query(
            store, uw.reshape(-1, 4)[dv_sel], dirs[rid_dv], embed_ray[rid_dv],
            want_cache=True)
        dv_sigma_pad.reshape(-1)[dv_sel] = sigma
        dv_rgb_pad.reshape(-1, 3)[dv_sel] = rgb
    a_dv = 1.0 - np.exp(-dv_sigma_pad * dv_delta)
    a_dv = np.where(dv_valid, a_dv, 0.0)

    pack, cr_keep, dv_keep = compact_and_pack(
        origins, dirs, frames, np.zeros(n_rays, dtype=np.int64),
        t_pad, valid, a_cr, dv_t, dv_valid, a_dv, dv_delta,
        weight_floor=sampling_cfg.weight_floor,
        max_cr=sampling_cfg.max_cr_samples, max_dv=sampling_cfg.max_dv_samples)

    # re-query geometry with gradients on the surviving cr samples
    rid_all = pack.ray_index()
    cr_rows = pack.tag == 0
    dv_rows = pack.tag == 1
    x_cr = pack.origins[rid_all[cr_rows]] \
        + pack.t[cr_rows, None] * pack.dirs[rid_all[cr_rows]]
    geo = fields.cr.sdf_query(store, x_cr, level_mask=level_mask,
                              want_grad=True, want_cache=True)
    sdf = np.zeros(pack.n_samples)
    grad = np.zeros((pack.n_samples, 3))
    sdf[cr_rows] = geo.sdf
    grad[cr_rows] = geo.grad
    color = np.zeros((pack.n_samples, 3))
    rad_cache = None
    n_unit = None
    if want_color and cr_rows.any():
        gnorm = np.linalg.norm(geo.grad, axis=1, keepdims=True)
        n_unit = geo.grad / np.maximum(gnorm, 1e-9)
        v_cr = pack.dirs[rid_all[cr_rows]]
        emb_cr = embed_ray[rid_all[cr_rows]]
        rgb_cr, rad_cache = fields.cr.radiance(store, geo.feat, n_unit, v_cr,
                                               emb_cr, want_cache=True)
        color[cr_rows] = rgb_cr
    sigma = np.zeros(pack.n_samples)
    sigma[dv_rows] = dv_sigma_pad[dv_keep]
    color[dv_rows] = dv_rgb_pad[dv_keep]
    sky_rgb = sky_cache = None
    if sky_on:
        sky_rgb, sky_cache = fields.sky.query(store, dirs, embed_ray,
                                              want_cache=True)
    out = render_rays(pack, sdf, grad, color, sigma, s_eff, sky_rgb=sky_rgb,
                      want_cache=True)
    handles = {
        "geo": geo, "rad_cache": rad_cache, "dv_cache": dv_cache,
        "dv_keep": dv_keep, "dv_valid_flat": dv_sel, "sky_cache": sky_cache,
        "cr_rows": cr_rows, "dv_rows": dv_rows, "rid_all": rid_all,
        "embed_ray": embed_ray, "n_unit": n_unit, "s_eff": s_eff,
        "frames": frames, "dirs": dirs,
    }
    return pack, out, handles


def render_image(fields, camera, pose, grid, shells, sampling_cfg,
                 dv_tail_delta: float, sky_on: bool, frame_id: int = 0,
                 chunk: int = 8192, level_mask=None,
                 s_override: float | None = None):
    """Render full image buffers (RGB, depth, camera-space normal, opacity)
    from a trained field set. Deterministic: no perturbation.

    pose is camera-to-world in the field's (street) frame.
    """
    h, w = camera.height, camera.width
    vs, us = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d_cam = camera.pixel_dirs(us.ravel().astype(np.float64),
                              vs.ravel().astype(np.float64))
    d_world = d_cam @ pose.rotation.T
    o = np.tile(pose.translation, (h * w, 1))
    rgb = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    normal = np.zeros((h * w, 3))
    opacity = np.zeros(h * w)
    opacity_cr = np.zeros(h * w)
    for i in range(0, h * w, chunk):
        sl = slice(i, min(i + chunk, h * w))
        frames = np.full(sl.stop - sl.start, frame_id, dtype=np.int64)
        _, out, _ = march_and_render(
            fields, grid, shells, sampling_cfg, dv_tail_delta,
            o[sl], d_world[sl], frames, sky_on=sky_on, perturb=False,
            level_mask=level_mask, iteration=10 ** 9, s_override=s_override)
        rgb[sl] = out.rgb_all
        depth[sl] = out.depth
        normal[sl] = out.normal @ pose.rotation  # street -> camera coords
        opacity[sl] = out.opacity
        opacity_cr[sl] = out.opacity_cr
    return {"rgb": rgb.reshape(h, w, 3), "depth": depth.reshape(h, w),
            "normal": normal.reshape(h, w, 3), "opacity": opacity.reshape(h, w),
            "opacity_cr": opacity_cr.reshape(h, w)}


LIDAR_VOLUME_S = 64000.0


def simulate_lidar(fields, origins, dirs, grid, shells, sampling_cfg,
                   mode: str = "volume", trace_eps: float = 1e-3,
                   step_scale: float = 0.8, hit_opacity: float = 0.5):
    """Simulated range returns along the given beams (street frame).

    volume mode renders the joint close+distant depth with the sigmoid
    sharpness pinned to a large value (64000), which collapses the weight
    profile onto the surface; beams whose close-range opacity stays under
    hit_opacity are flagged as no-return (range <= 0). trace mode sphere
    traces the SDF directly, guaranteeing a definite intersection depth.
    Returns (ranges, points, hit_mask); misses carry range 0.
    """
    from .space import ray_aabb_interval

    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = len(origins)
    if mode == "volume":
        frames = np.zeros(n, dtype=np.int64)
        _, out, _ = march_and_render(
            fields, grid, shells, sampling_cfg, 0.0, origins, dirs, frames,
            sky_on=False, natural_tail=True, perturb=False,
            iteration=10 ** 9, s_override=LIDAR_VOLUME_S, want_color=False)
        hit = out.opacity_cr >= hit_opacity
        ranges = np.where(hit, out.depth, 0.0)
    elif mode == "trace":
        t0, t1 = ray_aabb_interval(fields.cr.aabb, origins, dirs)
        res = sphere_trace_batch(fields.sdf_value_fn(), origins, dirs,
                                 t_min=np.maximum(t0, 0.0), t_max=t1,
                                 eps=trace_eps, step_scale=step_scale)
        hit = res.hit
        ranges = np.where(hit, res.t, 0.0)
    else:
        raise ValueError(f"unknown lidar mode {mode!r}")
    points = origins + ranges[:, None] * dirs
    return ranges, points, hit
