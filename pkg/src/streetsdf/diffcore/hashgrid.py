"""Multiresolution hashed feature grids over 3D or 4D unit cubes.

Each level holds a virtual lattice of feature vectors at integer vertices.
Levels whose vertex count fits the table are stored densely (row-major),
which makes them collision-free; finer levels are spatially hashed with
fixed odd multiplicands combined by XOR, so encodings are bit-reproducible
across runs and platforms. Lookups are multilinear over the 2^d cell
corners; the derivative with respect to the query point is the exact
interpolation derivative (piecewise constant per cell).

All per-sample work is batched across levels and corners: one table
gather, one weighted reduction, and single-bincount scatters on the
backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .params import ParamStore

try:
    from . import _hashkernels as _K
    HAS_KERNELS = True
except ImportError:  # numba unavailable: numpy reference paths take over
    _K = None
    HAS_KERNELS = False

_PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.uint64)


def _kernel_args(spec: HashGridSpec, live: np.ndarray):
    res = np.stack([spec.level_res(int(l)) for l in live])
    dense = np.array([spec.level_is_dense(int(l)) for l in live])
    strides = np.ones((len(live), spec.dim), dtype=np.int64)
    for a in range(spec.dim - 2, -1, -1):
        strides[:, a] = strides[:, a + 1] * (res[:, a + 1] + 1)
    offsets = spec.level_offsets()[live]
    mask_bits = np.uint64((1 << spec.table_size_log2) - 1)
    return res, strides, dense, offsets, _PRIMES[:spec.dim].copy(), mask_bits


@dataclass(frozen=True)
class HashGridSpec:
    levels: int
    features_per_level: int
    base_res: tuple
    per_level_scale: float
    table_size_log2: int

    def __post_init__(self):
        base = tuple(int(r) for r in self.base_res)
        if len(base) not in (3, 4):
            raise ValueError("base_res must have 3 or 4 axes")
        if any(r < 1 for r in base):
            raise ValueError("base resolutions must be >= 1")
        if self.per_level_scale <= 1.0:
            raise ValueError("per_level_scale must exceed 1")
        object.__setattr__(self, "base_res", base)

    @property
    def dim(self) -> int:
        return len(self.base_res)

    @property
    def out_dim(self) -> int:
        return self.levels * self.features_per_level

    def level_res(self, level: int) -> np.ndarray:
        """Cell counts per axis at a level: floor(base * scale^level)."""
        s = self.per_level_scale ** level
        return np.maximum(np.floor(np.asarray(self.base_res) * s), 1).astype(np.int64)

    def all_res(self) -> np.ndarray:
        return np.stack([self.level_res(l) for l in range(self.levels)])

    def level_table_size(self, level: int) -> int:
        n_vertices = int(np.prod(self.level_res(level) + 1))
        return min(1 << self.table_size_log2, n_vertices)

    def level_is_dense(self, level: int) -> bool:
        return int(np.prod(self.level_res(level) + 1)) <= (1 << self.table_size_log2)

    def level_offsets(self) -> np.ndarray:
        sizes = [self.level_table_size(l) for l in range(self.levels)]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def table_rows(self) -> int:
        return int(self.level_offsets()[-1])

    def to_json(self) -> dict:
        return {"levels": self.levels, "features_per_level": self.features_per_level,
                "base_res": list(self.base_res), "per_level_scale": self.per_level_scale,
                "table_size_log2": self.table_size_log2}

    @classmethod
    def from_json(cls, d: dict) -> "HashGridSpec":
        return cls(d["levels"], d["features_per_level"], tuple(d["base_res"]),
                   d["per_level_scale"], d["table_size_log2"])


def hash_allocate(store: ParamStore, name: str, spec: HashGridSpec,
                  rng: np.random.Generator, scale: float = 1e-4) -> None:
    init = rng.uniform(-scale, scale, size=(spec.table_rows, spec.features_per_level))
    store.allocate(name, (spec.table_rows, spec.features_per_level), init)


def _corner_offsets(dim: int) -> np.ndarray:
    return np.array(list(product((0, 1), repeat=dim)), dtype=np.int64)


class HashEncodeCache:
    """Per-call state shared by the backward passes."""

    __slots__ = ("idx", "weights", "dweights", "clamped", "n", "level_mask",
                 "live_levels", "tv")

    def __init__(self, idx, weights, dweights, clamped, n, level_mask, live_levels,
                 tv=None):
        self.idx = idx              # (N, L_live, C) global table rows
        self.weights = weights      # (N, L_live, C)
        self.dweights = dweights    # (N, L_live, C, d) or None
        self.clamped = clamped      # (N,) bool
        self.n = n
        self.level_mask = level_mask
        self.live_levels = live_levels  # indices of unmasked levels
        self.tv = tv                # (N, L_live, C, F) gathered corner features


def _corner_indices(spec: HashGridSpec, cell: np.ndarray, corners: np.ndarray,
                    live_levels: np.ndarray) -> np.ndarray:
    """Global table rows for the 2^d corners of each cell (N, L_live, C).

    Dense (row-major) addressing where a level fits the table, spatial hash
    elsewhere. Separable per-axis arithmetic keeps every intermediate at
    (N, L) so no (N, L, C, d) tensor is ever built.
    """
    n, nl, d = cell.shape
    c = len(corners)
    offsets = spec.level_offsets()
    res = np.stack([spec.level_res(int(l)) for l in live_levels])
    dense = np.array([spec.level_is_dense(int(l)) for l in live_levels])
    strides = np.ones((nl, d), dtype=np.int64)
    for a in range(d - 2, -1, -1):
        strides[:, a] = strides[:, a + 1] * (res[:, a + 1] + 1)
    # dense: base index of the low corner plus a per-(level, corner) offset
    base = (cell * strides[None, :, :]).sum(-1)                # (N, L)
    corner_off = corners @ strides.T                           # (C, L)
    dense_idx = base[:, :, None] + corner_off.T[None, :, :]
    # hash: XOR of per-axis terms; the +1 corner shift adds one prime
    terms0 = [cell[:, :, a].astype(np.uint64) * _PRIMES[a] for a in range(d)]
    hash_idx = np.empty((n, nl, c), dtype=np.uint64)
    for ci, bits in enumerate(corners):
        h = terms0[0] + (np.uint64(_PRIMES[0]) if bits[0] else np.uint64(0))
        for a in range(1, d):
            t = terms0[a]
            if bits[a]:
                t = t + _PRIMES[a]
            h = h ^ t
        hash_idx[:, :, ci] = h
    hash_idx &= np.uint64((1 << spec.table_size_log2) - 1)
    idx = np.where(dense[None, :, None], dense_idx, hash_idx.astype(np.int64))
    return idx + offsets[live_levels][None, :, None]


def hash_forward(spec: HashGridSpec, table: np.ndarray, x: np.ndarray,
                 level_mask: np.ndarray | None = None,
                 want_dweights: bool = True,
                 light: bool = False) -> tuple[np.ndarray, HashEncodeCache]:
    """Encode points x in [0,1]^d. Out-of-range inputs are clamped and flagged.

    level_mask (levels,) zeroes whole levels (features, gradients, and table
    updates); masked levels are skipped entirely.
    """
    x = np.atleast_2d(x)
    n, d = x.shape
    if d != spec.dim:
        raise ValueError(f"expected {spec.dim}-D points, got {d}-D")
    dt = table.dtype
    clamped = np.any((x < 0.0) | (x > 1.0), axis=-1)
    xc = np.clip(x, 0.0, 1.0).astype(dt)
    if level_mask is None:
        live = np.arange(spec.levels)
    else:
        live = np.nonzero(np.asarray(level_mask, dtype=bool))[0]
    fpl = spec.features_per_level
    feat = np.zeros((n, spec.levels * fpl), dtype=dt)
    if len(live) == 0:
        return feat, HashEncodeCache(None, None, None, clamped, n, level_mask, live)
    if HAS_KERNELS:
        resk, strides, dense, offsets_l, primes, mask_bits = _kernel_args(spec, live)
        cols = _live_cols(spec, live)
        if not want_dweights and light:
            lv = np.zeros((n, len(live) * fpl), dtype=dt)
            _K.encode_value(xc, resk.astype(dt), strides, dense,
                            offsets_l, primes, mask_bits, table, lv)
            feat[:, cols] = lv
            return feat, HashEncodeCache(None, None, None, clamped, n,
                                         level_mask, live)
        c2 = 1 << d
        lv = np.zeros((n, len(live) * fpl), dtype=dt)
        gidx = np.empty((n, len(live), c2), dtype=np.int64)
        w = np.empty((n, len(live), c2), dtype=dt)
        dw = np.empty((n, len(live), c2, d), dtype=dt)
        tv = np.empty((n, len(live), c2, fpl), dtype=dt)
        _K.encode_grad(xc, resk.astype(dt), strides, dense, offsets_l, primes,
                       mask_bits, table, lv, gidx, w, dw, tv)
        feat[:, cols] = lv
        return feat, HashEncodeCache(gidx, w, dw, clamped, n, level_mask, live, tv)
    res = np.stack([spec.level_res(int(l)) for l in live])        # (L, d)
    p = xc[:, None, :] * res[None, :, :].astype(dt)               # (N, L, d)
    cell = np.minimum(p.astype(np.int64), res[None] - 1)
    f = p - cell.astype(dt)                                       # (N, L, d)
    corners = _corner_offsets(d)
    gidx = _corner_indices(spec, cell, corners, live)             # (N, L, C)

    # corner weights by incremental doubling; each concat makes the newest
    # axis the highest bit, so axes run last-to-first to match the corner
    # table (axis 0 = most significant bit)
    w = np.ones((n, len(live), 1), dtype=dt)
    dw = None
    if want_dweights:
        dparts = [np.zeros((n, len(live), 1), dtype=dt) for _ in range(d)]
    for a in reversed(range(d)):
        fa = f[:, :, a:a + 1]
        one = 1.0 - fa
        scale = res[None, :, a:a + 1].astype(dt)
        if want_dweights:
            new_parts = []
            for b in range(d):
                if b == a:
                    new_parts.append(np.concatenate([-w * scale, w * scale], axis=2))
                else:
                    new_parts.append(np.concatenate([dparts[b] * one,
                                                     dparts[b] * fa], axis=2))
            dparts = new_parts
        w = np.concatenate([w * one, w * fa], axis=2)
    if want_dweights:
        dw = np.stack(dparts, axis=-1)                            # (N, L, C, d)

    tv = table[gidx]                                              # (N, L, C, F)
    lv_feat = (w[..., None] * tv).sum(axis=2)                     # (N, L, F)
    cols = (live[:, None] * fpl + np.arange(fpl)[None, :]).ravel()
    feat[:, cols] = lv_feat.reshape(n, -1)
    return feat, HashEncodeCache(gidx, w, dw, clamped, n, level_mask, live,
                                 tv if want_dweights else None)


def _live_cols(spec: HashGridSpec, live: np.ndarray) -> np.ndarray:
    fpl = spec.features_per_level
    return (live[:, None] * fpl + np.arange(fpl)[None, :]).ravel()


def hash_input_jacobian(spec: HashGridSpec, table: np.ndarray,
                        cache: HashEncodeCache) -> np.ndarray:
    """d feat / d x, shape (N, out_dim, d). Piecewise constant per cell."""
    jac = np.zeros((cache.n, spec.out_dim, spec.dim), dtype=table.dtype)
    if cache.idx is None:
        return jac
    tv = cache.tv if cache.tv is not None else table[cache.idx]
    lv = np.einsum("nlcf,nlca->nlfa", tv, cache.dweights)
    cols = _live_cols(spec, cache.live_levels)
    jac[:, cols, :] = lv.reshape(cache.n, -1, spec.dim)
    return jac


def _scatter_table(table_grad: np.ndarray, idx: np.ndarray,
                   vals: np.ndarray) -> None:
    """table_grad[idx, f] += vals[..., f] via one bincount per feature."""
    flat_idx = idx.ravel()
    nf = table_grad.shape[1]
    flat_vals = vals.reshape(-1, nf)
    rows = table_grad.shape[0]
    for fcol in range(nf):
        acc = np.bincount(flat_idx, weights=flat_vals[:, fcol], minlength=rows)
        table_grad[:, fcol] += acc.astype(table_grad.dtype)


def hash_backward(spec: HashGridSpec, cache: HashEncodeCache, table: np.ndarray,
                  featbar: np.ndarray, table_grad: np.ndarray,
                  want_xbar: bool = False) -> np.ndarray | None:
    """Scatter d loss / d table from featbar; optionally return d loss / d x."""
    if cache.idx is None or cache.n == 0:
        return np.zeros((cache.n, spec.dim), dtype=table.dtype) if want_xbar else None
    cols = _live_cols(spec, cache.live_levels)
    fb = featbar[:, cols].reshape(cache.n, len(cache.live_levels), -1)  # (N, L, F)
    if HAS_KERNELS:
        _K.scatter_weighted(cache.idx, cache.weights,
                            np.ascontiguousarray(fb, dtype=table_grad.dtype),
                            table_grad)
    else:
        _scatter_table(table_grad, cache.idx,
                       cache.weights[..., None] * fb[:, :, None, :])
    if want_xbar:
        tv = cache.tv if cache.tv is not None else table[cache.idx]
        s2 = (tv * fb[:, :, None, :]).sum(-1)
        return (s2[..., None] * cache.dweights).sum(axis=(1, 2))
    return None


def hash_second_backward(spec: HashGridSpec, cache: HashEncodeCache,
                         u_enc: np.ndarray, gbar: np.ndarray,
                         table_grad: np.ndarray, r: np.ndarray | None = None
                         ) -> None:
    """Table gradient from the spatial-gradient path.

    The encoder's input-Jacobian J is linear in the table, and downstream
    code consumes g = J^T u. Given the cotangent gbar = d loss / d g and the
    sweep vector u (N, out_dim), the exact table contribution is
    table_grad[idx_c, f] += u[l,f] * (dweights_c . gbar).
    """
    if cache.idx is None or cache.n == 0:
        return
    cols = _live_cols(spec, cache.live_levels)
    u = u_enc[:, cols].reshape(cache.n, len(cache.live_levels), -1)  # (N, L, F)
    if r is None:
        r = (cache.dweights
             * gbar[:, None, None, :].astype(cache.dweights.dtype)).sum(-1)
    if HAS_KERNELS:
        _K.scatter_second(cache.idx, np.ascontiguousarray(r, dtype=table_grad.dtype),
                          np.ascontiguousarray(u, dtype=table_grad.dtype),
                          table_grad)
    else:
        _scatter_table(table_grad, cache.idx, r[..., None] * u[:, :, None, :])


def hash_project_gradient(spec: HashGridSpec, cache: HashEncodeCache,
                          u_enc: np.ndarray) -> np.ndarray:
    """g = J^T u without materializing J = d feat / d x (N, d)."""
    if cache.idx is None or cache.n == 0:
        return np.zeros((cache.n, spec.dim), dtype=u_enc.dtype)
    cols = _live_cols(spec, cache.live_levels)
    u = u_enc[:, cols].reshape(cache.n, len(cache.live_levels), -1)
    if HAS_KERNELS:
        g = np.zeros((cache.n, spec.dim), dtype=cache.tv.dtype)
        _K.project_gradient(cache.tv, cache.dweights,
                            np.ascontiguousarray(u, dtype=cache.tv.dtype), g)
        return g
    s = (cache.tv * u[:, :, None, :]).sum(-1)                     # (N, L, C)
    return (s[..., None] * cache.dweights).sum(axis=(1, 2))


def hash_backproject_gradient(spec: HashGridSpec, cache: HashEncodeCache,
                              gbar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(J gbar scattered into encoding columns, the corner dot products r).

    r (N, L, C) = dweights . gbar is shared with hash_second_backward.
    """
    out = np.zeros((cache.n, spec.out_dim), dtype=gbar.dtype)
    if cache.idx is None or cache.n == 0:
        return out, None
    cols = _live_cols(spec, cache.live_levels)
    if HAS_KERNELS:
        nl = len(cache.live_levels)
        ub = np.zeros((cache.n, nl, cache.tv.shape[3]), dtype=cache.tv.dtype)
        r = np.empty((cache.n, nl, cache.tv.shape[2]), dtype=cache.tv.dtype)
        _K.backproject_gradient(cache.tv, cache.dweights,
                                np.ascontiguousarray(gbar, dtype=cache.tv.dtype),
                                ub, r)
        out[:, cols] = ub.reshape(cache.n, -1)
        return out, r
    r = (cache.dweights * gbar[:, None, None, :].astype(cache.dweights.dtype)).sum(-1)
    ub = (cache.tv * r[..., None]).sum(axis=2)                    # (N, L, F)
    out[:, cols] = ub.reshape(cache.n, -1)
    return out, r


def hash_encode(spec: HashGridSpec, store: ParamStore, name: str, x: np.ndarray,
                want_grads: bool = False):
    """Single-point surface over a stored table.

    Returns (feat, clamped) or (feat, clamped, d_feat_d_x) with want_grads;
    table gradients flow through hash_backward in batched code.
    """
    table = store.view(name)
    feat, cache = hash_forward(spec, table, np.asarray(x).reshape(1, -1),
                               want_dweights=want_grads)
    if not want_grads:
        return feat[0], bool(cache.clamped[0])
    jac = hash_input_jacobian(spec, table, cache)
    return feat[0], bool(cache.clamped[0]), jac[0]
