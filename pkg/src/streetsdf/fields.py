"""Scene models: close-range SDF + radiance, distant-view density +
radiance over warped coordinates, sky radiance, per-frame appearance
embeddings, the coarse-to-fine level mask, and SDF initialization
pretraining.

The close-range geometry stack is hash-encoding -> MLP with the raw
query point appended to the encoding, so the field keeps a smooth global
component even when fine levels are masked. Its spatial gradient is
computed analytically through the interpolation and the MLP, and the
backward pass propagates cotangents on that gradient exactly (second-order
in the parameters), which the eikonal term and the shading normals need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    HashGridSpec,
    MlpSpec,
    hash_allocate,
    hash_backward,
    hash_forward,
    hash_second_backward,
    mlp_allocate,
    mlp_backward,
    mlp_forward,
    mlp_value_and_input_grad,
    mlp_vig_backward,
    mlp_weights,
)
from .diffcore.hashgrid import hash_backproject_gradient, hash_project_gradient
from .diffcore.mlp import _sigmoid
from .diffcore.encoding import dir_encode_backward, dir_encode_cached
from .diffcore.params import AdamState, ParamStore, adam_step
from .space import Aabb

_EPS = 1e-9


@dataclass(frozen=True)
class AnnealMask:
    """Binary per-level multipliers unlocking hash levels coarse to fine."""

    start: int
    full: int
    n_levels: int

    def mask(self, iteration: int) -> np.ndarray:
        if iteration >= self.full or self.n_levels == 1:
            n_on = self.n_levels
        elif iteration < self.start:
            n_on = 1
        else:
            span = max(self.full - self.start, 1)
            n_on = 1 + int((iteration - self.start) * (self.n_levels - 1) / span)
        out = np.zeros(self.n_levels, dtype=bool)
        out[:max(n_on, 1)] = True
        return out


@dataclass(frozen=True)
class SMapping:
    """Learnable sigmoid sharpness with a scheduled lower bound.

    s is stored as log s (always positive); the effective value is
    max(learned, floor(iteration)) where the floor ramps linearly from 0
    to end_floor over [floor_start, floor_end]. The floor is only engaged
    when enabled (reconstruction without lidar supervision).
    """

    floor_start: int = 0
    floor_end: int = 1
    end_floor: float = 0.0
    enabled: bool = False

    def floor(self, iteration: int) -> float:
        if not self.enabled or iteration < self.floor_start:
            return 0.0
        span = max(self.floor_end - self.floor_start, 1)
        frac = min((iteration - self.floor_start) / span, 1.0)
        return frac * self.end_floor

    def effective(self, store: ParamStore, iteration: int) -> float:
        learned = float(np.exp(store.view("s/log_s")[0]))
        return max(learned, self.floor(iteration))

    def backward(self, store: ParamStore, iteration: int, s_bar: float) -> None:
        learned = float(np.exp(store.view("s/log_s")[0]))
        if learned >= self.floor(iteration):
            store.grad_view("s/log_s")[0] += s_bar * learned


class AppearanceBank:
    """One zero-initialized embedding vector per capture frame, shared by
    the color, distant-view, and sky heads."""

    def __init__(self, n_frames: int, dim: int):
        self.n_frames = int(n_frames)
        self.dim = int(dim)

    def allocate(self, store: ParamStore) -> None:
        store.allocate("embed/app", (self.n_frames, self.dim))

    def lookup(self, store: ParamStore, frame_ids: np.ndarray) -> np.ndarray:
        return store.view("embed/app")[frame_ids]

    def backward(self, store: ParamStore, frame_ids: np.ndarray,
                 embed_bar: np.ndarray) -> None:
        g = store.grad_view("embed/app")
        for d in range(self.dim):
            g[:, d] += np.bincount(frame_ids, weights=embed_bar[:, d],
                                   minlength=self.n_frames).astype(g.dtype)


@dataclass
class GeoResult:
    sdf: np.ndarray          # (N,)
    grad: np.ndarray         # (N, 3) d sdf / d x, world meters
    feat: np.ndarray         # (N, F)
    clamped: np.ndarray      # (N,) True where x was outside the AABB
    cache: tuple | None


class CloseRangeField:
    """SDF + geometry feature + view-dependent radiance inside the AABB."""

    def __init__(self, aabb: Aabb, geo_hash: HashGridSpec, geo_mlp: MlpSpec,
                 color_mlp: MlpSpec, feat_dim: int, n_freq: int, embed_dim: int):
        if geo_mlp.n_in != geo_hash.out_dim + 3:
            raise ValueError("geometry MLP input must be hash features + 3")
        if geo_mlp.n_out != 1 + feat_dim:
            raise ValueError("geometry MLP output must be sdf + feature")
        if color_mlp.n_in != feat_dim + 3 + 3 + 6 * n_freq + embed_dim:
            raise ValueError("color MLP input width mismatch")
        self.aabb = aabb
        self.geo_hash = geo_hash
        self.geo_mlp = geo_mlp
        self.color_mlp = color_mlp
        self.feat_dim = feat_dim
        self.n_freq = n_freq
        self.embed_dim = embed_dim

    def allocate(self, store: ParamStore, rng: np.random.Generator) -> None:
        hash_allocate(store, "cr/geo_hash", self.geo_hash, rng)
        mlp_allocate(store, "cr/geo_mlp", self.geo_mlp, rng)
        mlp_allocate(store, "cr/color_mlp", self.color_mlp, rng)

    def _normalize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(x)
        clamped = ~self.aabb.contains(x)
        x01 = (np.clip(x, self.aabb.min, self.aabb.max) - self.aabb.min) \
            / self.aabb.extents
        return x01, clamped

    def sdf_query(self, store: ParamStore, x: np.ndarray,
                  level_mask: np.ndarray | None = None,
                  want_grad: bool = True, want_cache: bool = False) -> GeoResult:
        """SDF value, analytic spatial gradient, and geometry feature.

        Points outside the AABB are clamped to it and flagged. Masked hash
        levels contribute zero features and receive zero gradient.
        """
        light = not want_grad and not want_cache
        x01, clamped = self._normalize(x)
        x01 = x01.astype(store.dtype)
        table = store.view("cr/geo_hash")
        hfeat, hcache = hash_forward(self.geo_hash, table, x01,
                                     level_mask=level_mask,
                                     want_dweights=want_grad, light=light)
        enc = np.concatenate([hfeat, x01], axis=1)
        weights = mlp_weights(store, "cr/geo_mlp", self.geo_mlp)
        ext = self.aabb.extents.astype(store.dtype)
        if not want_grad:
            y, mcache = mlp_forward(self.geo_mlp, weights, enc)
            cache = (hcache, mcache) if want_cache else None
            return GeoResult(y[:, 0], None, y[:, 1:], clamped, cache)
        y, u0, mcache = mlp_value_and_input_grad(self.geo_mlp, weights, enc)
        h_out = self.geo_hash.out_dim
        g01 = hash_project_gradient(self.geo_hash, hcache, u0) + u0[:, h_out:]
        grad = g01 / ext
        cache = (hcache, mcache, u0, x01) if want_cache else None
        return GeoResult(y[:, 0], grad, y[:, 1:], clamped, cache)

    def sdf_backward(self, store: ParamStore, result: GeoResult,
                     sdf_bar: np.ndarray, grad_bar: np.ndarray | None = None,
                     feat_bar: np.ndarray | None = None) -> np.ndarray:
        """Accumulate parameter gradients; returns d loss / d x (world).

        Exact in the parameters, including the second-order path through
        the spatial gradient. The returned x cotangent carries the value
        and feature paths only (the gradient-through-Hessian term is
        dropped; the hash Jacobian is piecewise constant in x anyway).
        """
        hcache, mcache, u0, x01 = result.cache
        n = len(result.sdf)
        h_out = self.geo_hash.out_dim
        ext = self.aabb.extents.astype(store.dtype)
        dt = store.dtype
        if grad_bar is None:
            grad_bar = np.zeros((n, 3), dtype=dt)
        g01_bar = (np.asarray(grad_bar) / ext).astype(dt)
        u0_bar_hash, r = hash_backproject_gradient(self.geo_hash, hcache, g01_bar)
        u0_bar = np.concatenate([u0_bar_hash, g01_bar], axis=1)
        ybar = np.zeros((n, self.geo_mlp.n_out), dtype=dt)
        ybar[:, 0] = sdf_bar
        if feat_bar is not None:
            ybar[:, 1:] = feat_bar
        weights = mlp_weights(store, "cr/geo_mlp", self.geo_mlp)
        enc_bar = mlp_vig_backward(self.geo_mlp, weights, mcache, ybar, u0_bar,
                                   store, "cr/geo_mlp")
        table = store.view("cr/geo_hash")
        tgrad = store.grad_view("cr/geo_hash")
        x01_bar = hash_backward(self.geo_hash, hcache, table,
                                enc_bar[:, :h_out], tgrad, want_xbar=True)
        hash_second_backward(self.geo_hash, hcache, u0[:, :h_out], g01_bar, tgrad,
                             r=r)
        x01_bar = x01_bar + enc_bar[:, h_out:]
        return x01_bar / ext

    def sdf_value_backward(self, store: ParamStore, result: GeoResult,
                           sdf_bar: np.ndarray,
                           feat_bar: np.ndarray | None = None) -> None:
        """First-order-only backward for value-path fits (pretraining)."""
        hcache, mcache = result.cache
        n = len(result.sdf)
        ybar = np.zeros((n, self.geo_mlp.n_out), dtype=store.dtype)
        ybar[:, 0] = sdf_bar
        if feat_bar is not None:
            ybar[:, 1:] = feat_bar
        weights = mlp_weights(store, "cr/geo_mlp", self.geo_mlp)
        enc_bar = mlp_backward(self.geo_mlp, weights, mcache, ybar, store,
                               "cr/geo_mlp")
        hash_backward(self.geo_hash, hcache, store.view("cr/geo_hash"),
                      enc_bar[:, :self.geo_hash.out_dim],
                      store.grad_view("cr/geo_hash"))

    def radiance(self, store: ParamStore, feat: np.ndarray, normal: np.ndarray,
                 view: np.ndarray, embed: np.ndarray,
                 want_cache: bool = False):
        """RGB in [0,1] from (geometry feature, unit normal, view dir, embedding)."""
        view = np.asarray(view, dtype=store.dtype)
        enc, denc = dir_encode_cached(view, self.n_freq)
        x = np.concatenate([feat, normal, view, enc, embed], axis=1).astype(store.dtype)
        weights = mlp_weights(store, "cr/color_mlp", self.color_mlp)
        rgb, mcache = mlp_forward(self.color_mlp, weights, x)
        cache = (mcache, denc) if want_cache else None
        return rgb, cache

    def radiance_backward(self, store: ParamStore, cache, rgb_bar: np.ndarray):
        """Returns (feat_bar, normal_bar, view_bar, embed_bar)."""
        mcache, denc = cache
        weights = mlp_weights(store, "cr/color_mlp", self.color_mlp)
        xbar = mlp_backward(self.color_mlp, weights, mcache, rgb_bar, store,
                            "cr/color_mlp")
        f = self.feat_dim
        e = 6 * self.n_freq
        feat_bar = xbar[:, :f]
        normal_bar = xbar[:, f:f + 3]
        view_bar = xbar[:, f + 3:f + 6] \
            + dir_encode_backward(denc, xbar[:, f + 6:f + 6 + e])
        embed_bar = xbar[:, f + 6 + e:]
        return feat_bar, normal_bar, view_bar, embed_bar


class DistantField:
    """Density + radiance over the warped far-field coordinates (u, w)."""

    def __init__(self, dv_hash: HashGridSpec, mlp: MlpSpec, n_freq: int,
                 embed_dim: int):
        if dv_hash.dim != 4:
            raise ValueError("distant-view hash grid must be 4D")
        if mlp.n_in != dv_hash.out_dim + 4 + 3 + 6 * n_freq + embed_dim:
            raise ValueError("distant-view MLP input width mismatch")
        if mlp.n_out != 4:
            raise ValueError("distant-view MLP must emit (density, rgb)")
        self.dv_hash = dv_hash
        self.mlp = mlp
        self.n_freq = n_freq
        self.embed_dim = embed_dim

    def allocate(self, store: ParamStore, rng: np.random.Generator) -> None:
        hash_allocate(store, "dv/hash", self.dv_hash, rng)
        mlp_allocate(store, "dv/mlp", self.mlp, rng)

    def query(self, store: ParamStore, uw: np.ndarray, view: np.ndarray,
              embed: np.ndarray, want_cache: bool = False):
        """(sigma, rgb): sigma >= 0 via softplus, rgb in [0,1] via sigmoid.

        uw comes from the inverse cuboid warp: u on the unit cuboid
        surface, w = 1/rho in (0, 1].
        """
        uw = np.atleast_2d(np.asarray(uw, dtype=store.dtype))
        x4 = np.empty_like(uw)
        x4[:, :3] = (uw[:, :3] + 1.0) * 0.5
        x4[:, 3] = uw[:, 3]
        x4 = np.clip(x4, 0.0, 1.0)
        table = store.view("dv/hash")
        hfeat, hcache = hash_forward(self.dv_hash, table, x4, want_dweights=False)
        view = np.asarray(view, dtype=store.dtype)
        enc, denc = dir_encode_cached(view, self.n_freq)
        x = np.concatenate([hfeat, x4, view, enc, embed], axis=1)
        weights = mlp_weights(store, "dv/mlp", self.mlp)
        raw, mcache = mlp_forward(self.mlp, weights, x)
        sigma = np.logaddexp(0.0, raw[:, 0])
        rgb = _sigmoid(raw[:, 1:])
        cache = (hcache, mcache, denc, raw) if want_cache else None
        return sigma, rgb, cache

    def backward(self, store: ParamStore, cache, sigma_bar: np.ndarray,
                 rgb_bar: np.ndarray):
        """Returns (view_bar, embed_bar); position path is not differentiated."""
        hcache, mcache, denc, raw = cache
        raw_bar = np.empty_like(raw)
        raw_bar[:, 0] = sigma_bar * _sigmoid(raw[:, 0])
        srgb = _sigmoid(raw[:, 1:])
        raw_bar[:, 1:] = rgb_bar * srgb * (1.0 - srgb)
        weights = mlp_weights(store, "dv/mlp", self.mlp)
        xbar = mlp_backward(self.mlp, weights, mcache, raw_bar, store, "dv/mlp")
        h = self.dv_hash.out_dim
        hash_backward(self.dv_hash, hcache, store.view("dv/hash"),
                      xbar[:, :h], store.grad_view("dv/hash"))
        e = 6 * self.n_freq
        view_bar = xbar[:, h + 4:h + 7] \
            + dir_encode_backward(denc, xbar[:, h + 7:h + 7 + e])
        embed_bar = xbar[:, h + 7 + e:]
        return view_bar, embed_bar


class SkyField:
    """Directional radiance for the infinitely far interval."""

    def __init__(self, mlp: MlpSpec, n_freq: int, embed_dim: int):
        if mlp.n_in != 3 + 6 * n_freq + embed_dim:
            raise ValueError("sky MLP input width mismatch")
        self.mlp = mlp
        self.n_freq = n_freq
        self.embed_dim = embed_dim

    def allocate(self, store: ParamStore, rng: np.random.Generator) -> None:
        mlp_allocate(store, "sky/mlp", self.mlp, rng)

    def query(self, store: ParamStore, view: np.ndarray, embed: np.ndarray,
              want_cache: bool = False):
        view = np.asarray(view, dtype=store.dtype)
        enc, denc = dir_encode_cached(view, self.n_freq)
        x = np.concatenate([view, enc, embed], axis=1)
        weights = mlp_weights(store, "sky/mlp", self.mlp)
        rgb, mcache = mlp_forward(self.mlp, weights, x)
        cache = (mcache, denc) if want_cache else None
        return rgb, cache

    def backward(self, store: ParamStore, cache, rgb_bar: np.ndarray):
        mcache, denc = cache
        weights = mlp_weights(store, "sky/mlp", self.mlp)
        xbar = mlp_backward(self.mlp, weights, mcache, rgb_bar, store, "sky/mlp")
        e = 6 * self.n_freq
        view_bar = xbar[:, :3] + dir_encode_backward(denc, xbar[:, 3:3 + e])
        embed_bar = xbar[:, 3 + e:]
        return view_bar, embed_bar


class FieldSet:
    """All learnable scene state bound to one ParamStore."""

    def __init__(self, store: ParamStore, cr: CloseRangeField, dv: DistantField,
                 sky: SkyField, bank: AppearanceBank, s_map: SMapping,
                 anneal: AnnealMask):
        self.store = store
        self.cr = cr
        self.dv = dv
        self.sky = sky
        self.bank = bank
        self.s_map = s_map
        self.anneal = anneal

    @classmethod
    def create(cls, aabb: Aabb, n_frames: int, seed: int = 0,
               dtype=np.float32,
               cr_levels: int = 8, cr_features: int = 2,
               cr_base_res_longest: int = 16, cr_scale: float = 1.45,
               cr_table_log2: int = 19,
               geo_hidden: tuple = (64, 64), feat_dim: int = 15,
               color_hidden: tuple = (64, 64), cr_n_freq: int = 2,
               dv_levels: int = 6, dv_features: int = 2,
               dv_base_res_longest: int = 8, dv_base_res_w: int = 16,
               dv_scale: float = 1.4, dv_table_log2: int = 17,
               dv_hidden: tuple = (64,), dv_n_freq: int = 2,
               sky_hidden: tuple = (48,), sky_n_freq: int = 3,
               embed_dim: int = 4, s_init: float = 20.0,
               anneal: AnnealMask | None = None,
               s_map: SMapping | None = None) -> "FieldSet":
        rng = np.random.default_rng(seed)
        store = ParamStore(dtype)
        ext = aabb.extents
        cr_base = np.maximum(np.round(cr_base_res_longest * ext / ext.max()), 1)
        geo_hash = HashGridSpec(cr_levels, cr_features, tuple(int(v) for v in cr_base),
                                cr_scale, cr_table_log2)
        geo_mlp = MlpSpec((geo_hash.out_dim + 3, *geo_hidden, 1 + feat_dim),
                          activation="softplus", beta=100.0)
        color_mlp = MlpSpec((feat_dim + 3 + 3 + 6 * cr_n_freq + embed_dim,
                             *color_hidden, 3),
                            activation="relu", out_activation="sigmoid")
        cr = CloseRangeField(aabb, geo_hash, geo_mlp, color_mlp, feat_dim,
                             cr_n_freq, embed_dim)
        dv_base3 = np.maximum(np.round(dv_base_res_longest * ext / ext.max()), 1)
        dv_hash = HashGridSpec(dv_levels, dv_features,
                               (*(int(v) for v in dv_base3), int(dv_base_res_w)),
                               dv_scale, dv_table_log2)
        dv_mlp = MlpSpec((dv_hash.out_dim + 4 + 3 + 6 * dv_n_freq + embed_dim,
                          *dv_hidden, 4), activation="relu")
        dv = DistantField(dv_hash, dv_mlp, dv_n_freq, embed_dim)
        sky_mlp = MlpSpec((3 + 6 * sky_n_freq + embed_dim, *sky_hidden, 3),
                          activation="relu", out_activation="sigmoid")
        sky = SkyField(sky_mlp, sky_n_freq, embed_dim)
        bank = AppearanceBank(n_frames, embed_dim)
        fields = cls(store, cr, dv, sky, bank,
                     s_map or SMapping(),
                     anneal or AnnealMask(0, 1, cr_levels))
        cr.allocate(store, rng)
        dv.allocate(store, rng)
        sky.allocate(store, rng)
        bank.allocate(store)
        store.allocate("s/log_s", (1,), np.log([s_init]))
        return fields

    def specs_json(self) -> dict:
        return {
            "aabb": self.cr.aabb.to_json(),
            "n_frames": self.bank.n_frames,
            "embed_dim": self.bank.dim,
            "geo_hash": self.cr.geo_hash.to_json(),
            "geo_mlp": self.cr.geo_mlp.to_json(),
            "color_mlp": self.cr.color_mlp.to_json(),
            "cr_n_freq": self.cr.n_freq,
            "feat_dim": self.cr.feat_dim,
            "dv_hash": self.dv.dv_hash.to_json(),
            "dv_mlp": self.dv.mlp.to_json(),
            "dv_n_freq": self.dv.n_freq,
            "sky_mlp": self.sky.mlp.to_json(),
            "sky_n_freq": self.sky.n_freq,
            "s_map": {"floor_start": self.s_map.floor_start,
                      "floor_end": self.s_map.floor_end,
                      "end_floor": self.s_map.end_floor,
                      "enabled": self.s_map.enabled},
            "anneal": {"start": self.anneal.start, "full": self.anneal.full,
                       "n_levels": self.anneal.n_levels},
        }

    @classmethod
    def from_specs(cls, store: ParamStore, specs: dict) -> "FieldSet":
        aabb = Aabb.from_json(specs["aabb"])
        cr = CloseRangeField(aabb, HashGridSpec.from_json(specs["geo_hash"]),
                             MlpSpec.from_json(specs["geo_mlp"]),
                             MlpSpec.from_json(specs["color_mlp"]),
                             specs["feat_dim"], specs["cr_n_freq"],
                             specs["embed_dim"])
        dv = DistantField(HashGridSpec.from_json(specs["dv_hash"]),
                          MlpSpec.from_json(specs["dv_mlp"]),
                          specs["dv_n_freq"], specs["embed_dim"])
        sky = SkyField(MlpSpec.from_json(specs["sky_mlp"]), specs["sky_n_freq"],
                       specs["embed_dim"])
        bank = AppearanceBank(specs["n_frames"], specs["embed_dim"])
        sm = specs["s_map"]
        am = specs["anneal"]
        return cls(store, cr, dv, sky, bank,
                   SMapping(sm["floor_start"], sm["floor_end"], sm["end_floor"],
                            sm["enabled"]),
                   AnnealMask(am["start"], am["full"], am["n_levels"]))

    def save(self, path) -> None:
        self.store.save(path, specs=self.specs_json())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "FieldSet":
        store, specs = ParamStore.load(path, dtype)
        return cls.from_specs(store, specs)

    def sdf_value_fn(self, level_mask: np.ndarray | None = None):
        """Value-only SDF callable on world points (marching, tracing)."""
        def fn(x):
            return self.cr.sdf_query(self.store, x, level_mask=level_mask,
                                     want_grad=False).sdf
        return fn

    def sdf_grad_fn(self, level_mask: np.ndarray | None = None):
        def fn(x):
            return self.cr.sdf_query(self.store, x, level_mask=level_mask).grad
        return fn


def _polyline_segments(track: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = track[:-1]
    b = track[1:]
    return a, b


def _nearest_on_polyline(track: np.ndarray, q: np.ndarray,
                         horizontal: bool) -> tuple[np.ndarray, np.ndarray]:
    """Nearest polyline point per query; distance in 2D (horizontal) or 3D.

    Returns (distance, z at the nearest point)."""
    a, b = _polyline_segments(np.asarray(track, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64)
    dims = slice(0, 2) if horizontal else slice(0, 3)
    ab = b[:, dims] - a[:, dims]
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    aq = q[:, None, dims] - a[None, :, dims]
    tt = np.clip((aq * ab[None]).sum(-1) / denom[None], 0.0, 1.0)
    proj = a[None, :, dims] + tt[..., None] * ab[None]
    d2 = ((q[:, None, dims] - proj) ** 2).sum(-1)
    seg = np.argmin(d2, axis=1)
    rows = np.arange(len(q))
    dist = np.sqrt(d2[rows, seg])
    z = a[seg, 2] + tt[rows, seg] * (b[seg, 2] - a[seg, 2])
    return dist, z


def pseudo_sdf_road_surface(track: np.ndarray, ego_height: float,
                            q: np.ndarray) -> np.ndarray:
    """s*(p) = p_z - z_road(p_x, p_y): the ego height field horizontally
    extended by nearest-track height, lowered by ego_height."""
    _, z_track = _nearest_on_polyline(track, q, horizontal=True)
    return np.asarray(q, dtype=np.float64)[:, 2] - (z_track - ego_height)


def pseudo_sdf_capsule(track: np.ndarray, radius: float,
                       q: np.ndarray) -> np.ndarray:
    """Inside-out capsule: s*(p) = radius - dist(p, track polyline)."""
    dist, _ = _nearest_on_polyline(track, q, horizontal=False)
    return radius - dist


def pretrain_geometry(
    fields: FieldSet,
    track: np.ndarray,
    mode: str = "road_surface",
    ego_height: float = 1.6,
    capsule_radius: float = 8.0,
    iters: int = 500,
    samples_per_step: int = 2 ** 14,
    lr: float = 5e-3,
    seed: int = 0,
) -> float:
    """Fit the close-range SDF to an initialization pseudo ground truth by
    L1 regression on uniform AABB samples. Returns the final mean |error|
    on a fresh sample set. iters = 0 is a no-op.

    track must be in the same (street) frame as the field's AABB. The fit
    runs under the iteration-0 level mask so the initial training state
    matches the pretrained surface.
    """
    if mode not in ("road_surface", "capsule"):
        raise ValueError(f"unknown pretrain mode {mode!r}")
    store = fields.store
    aabb = fields.cr.aabb
    rng = np.random.default_rng(seed)
    mask = fields.anneal.mask(0)

    def target(q):
        if mode == "road_surface":
            return pseudo_sdf_road_surface(track, ego_height, q)
        return pseudo_sdf_capsule(track, capsule_radius, q)

    if iters > 0:
        opt = AdamState(store, lr=lr, lr_scales={
            "cr/geo_hash": 1.0, "cr/geo_mlp": 1.0,
            "cr/color_mlp": 0.0, "dv": 0.0, "sky": 0.0, "embed": 0.0, "s": 0.0})
        for _ in range(iters):
            q = rng.uniform(aabb.min, aabb.max, size=(samples_per_step, 3))
            res = fields.cr.sdf_query(store, q, level_mask=mask, want_grad=False,
                                      want_cache=True)
            err = res.sdf - target(q)
            sdf_bar = (np.sign(err) / len(q)).astype(store.dtype)
            fields.cr.sdf_value_backward(store, res, sdf_bar)
            adam_step(opt, store)
    q = rng.uniform(aabb.min, aabb.max, size=(samples_per_step, 3))
    res = fields.cr.sdf_query(store, q, level_mask=mask, want_grad=False)
    return float(np.mean(np.abs(res.sdf - target(q))))
