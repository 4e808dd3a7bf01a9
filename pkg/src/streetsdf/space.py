"""Scene-space bookkeeping for street captures.

A street capture has a dominant heading. We build a street-aligned frame
(rotation about the vertical axis only), delimit the close-range volume as
the AABB of all extended camera frustums in that frame, and schedule a set
of scaled cuboid shells for the far field. Points are measured against the
AABB with an anisotropic Chebyshev norm

    rho(x) = max_i |x_i - c_i| / h_i

(c = AABB center, h = half extents), so rho == 1 is exactly the AABB
surface and rho == r is the surface scaled by r. The far field lives in
the warped coordinates (u, w) = (xhat / rho, 1 / rho).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "RigidPose",
    "Trajectory",
    "PinholeCamera",
    "Aabb",
    "StreetFrame",
    "ShellSchedule",
    "estimate_street_frame",
    "delimit_close_range_aabb",
    "cuboid_coords_and_norm",
    "inverse_cuboid_warp",
    "cuboid_unwarp",
    "shell_radii",
    "distant_samples",
]

_ORTHO_TOL = 1e-6


class SpaceError(ValueError):
    """Raised on invalid geometric inputs (degenerate trajectory, bad AABB...)."""


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform: x_out = rotation @ x_in + translation. Meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise SpaceError(f"rotation not orthonormal with det +1 (err={err:.2e})")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self after other: (self * other)(x) = self(other(x))."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)


@dataclass(frozen=True)
class Trajectory:
    """Ordered ego-to-world poses with strictly increasing timestamps (s)."""

    poses: tuple
    timestamps: np.ndarray

    def __post_init__(self):
        poses = tuple(self.poses)
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(poses) < 2:
            raise SpaceError("trajectory needs at least 2 poses")
        if len(poses) != len(ts):
            raise SpaceError("pose/timestamp count mismatch")
        if not np.all(np.diff(ts) > 0):
            raise SpaceError("timestamps must be strictly increasing")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "timestamps", ts)

    def positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])

    def __len__(self) -> int:
        return len(self.poses)


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics. Convention: +z forward, +x right, +y down."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 200.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SpaceError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise SpaceError("need 0 < near < far")

    def corner_dirs(self) -> np.ndarray:
        """Camera-frame direction vectors through the 4 image corners, z=1."""
        us = np.array([0.0, self.width, 0.0, self.width])
        vs = np.array([0.0, 0.0, self.height, self.height])
        return np.stack([(us - self.cx) / self.fx, (vs - self.cy) / self.fy,
                         np.ones(4)], axis=-1)

    def frustum_vertices(self, far: float | None = None) -> np.ndarray:
        """8 camera-frame frustum vertices: 4 at z=near, 4 at z=far."""
        far = self.far if far is None else far
        d = self.corner_dirs()
        return np.concatenate([d * self.near, d * far], axis=0)

    def pixel_dirs(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        """Unit camera-frame rays through pixel centers (us=col, vs=row)."""
        d = np.stack([(us + 0.5 - self.cx) / self.fx,
                      (vs + 0.5 - self.cy) / self.fy,
                      np.ones_like(us, dtype=np.float64)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise SpaceError("AABB min must be < max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * (self.max - self.min)

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts)
        return np.all((pts >= self.min) & (pts <= self.max), axis=-1)

    def to_json(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Aabb":
        return cls(np.asarray(d["min"]), np.asarray(d["max"]))


@dataclass(frozen=True)
class StreetFrame:
    """World-to-street transform (yaw-only rotation) plus the close AABB."""

    world_to_street: RigidPose
    aabb: Aabb | None = None

    def __post_init__(self):
        r = self.world_to_street.rotation
        # vertical axis must map to itself exactly up to tolerance
        if abs(r[2, 2] - 1.0) > _ORTHO_TOL or np.abs(r[2, :2]).max() > _ORTHO_TOL \
                or np.abs(r[:2, 2]).max() > _ORTHO_TOL:
            raise SpaceError("street frame rotation must be about the vertical axis")

    def with_aabb(self, aabb: Aabb) -> "StreetFrame":
        return StreetFrame(self.world_to_street, aabb)


@dataclass(frozen=True)
class ShellSchedule:
    """Cuboid shell scales: radii[0] = 1, radii[n_dv] = r_max, increasing."""

    n_dv: int
    r_max: float
    radii: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        if len(r) != self.n_dv + 1:
            raise SpaceError("need n_dv + 1 radii")
        if r[0] != 1.0 or r[-1] != self.r_max or not np.all(np.diff(r) > 0):
            raise SpaceError("radii must increase from exactly 1 to exactly r_max")
        object.__setattr__(self, "radii", r)


def estimate_street_frame(traj: Trajectory) -> StreetFrame:
    """Street frame whose x axis is the mean horizontal heading of the ego.

    Per-step forward vectors are the normalized position deltas; their mean,
    projected to the horizontal plane, defines the street x axis. The street
    z axis is world up, y = z x x. Degenerate (near-zero mean) headings are
    rejected.
    """
    pos = traj.positions()
    steps = np.diff(pos, axis=0)
    norms = np.linalg.norm(steps, axis=-1)
    good = norms > 1e-12
    if not np.any(good):
        raise SpaceError("no dominant heading")
    fwd = steps[good] / norms[good, None]
    mean = fwd.mean(axis=0)
    mean[2] = 0.0
    n = np.linalg.norm(mean)
    if n < 1e-9:
        raise SpaceError("no dominant heading")
    x_axis = mean / n
    z_axis = np.array([0.0, 0.0, 1.0])
    y_axis = np.cross(z_axis, x_axis)
    # rows = street axes expressed in world coordinates
    r_ws = np.stack([x_axis, y_axis, z_axis])
    return StreetFrame(RigidPose(r_ws, np.zeros(3)))


def delimit_close_range_aabb(
    frame: StreetFrame,
    cams: Sequence[tuple[PinholeCamera, RigidPose]],
    extend_m: float = 40.0,
) -> Aabb:
    """AABB (street coords) of all frustum vertices with far plane at extend_m.

    `cams` holds (camera, camera-to-world pose) pairs, one entry per posed
    frame. Invariant to ordering and monotone in extend_m.
    """
    if extend_m <= 0:
        raise SpaceError("extend_m must be positive")
    if len(cams) == 0:
        raise SpaceError("empty camera set")
    verts = []
    for cam, pose in cams:
        v_cam = cam.frustum_vertices(far=extend_m)
        verts.append(pose.apply(v_cam))
    v_world = np.concatenate(verts, axis=0)
    v_street = frame.world_to_street.apply(v_world)
    return Aabb(v_street.min(axis=0), v_street.max(axis=0))


def cuboid_coords_and_norm(aabb: Aabb, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized coordinates xhat = (x - c) / h and norm rho = max|xhat_i|.

    rho <= 1 iff x is inside the AABB. Broadcasts over leading axes.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = (x - aabb.center) / aabb.half_extents
    rho = np.abs(xhat).max(axis=-1)
    return xhat, rho


def inverse_cuboid_warp(aabb: Aabb, x: np.ndarray) -> np.ndarray:
    """Warp an exterior point to (u, w): u = xhat/rho on the unit cuboid
    surface (max|u_i| = 1) and w = 1/rho in (0, 1].

    Continuous and injective on rho >= 1; errors for interior points.
    """
    xhat, rho = cuboid_coords_and_norm(aabb, x)
    if np.any(rho < 1.0 - 1e-12):
        raise SpaceError("point inside close-range")
    rho = np.maximum(rho, 1.0)
    u = xhat / rho[..., None]
    w = 1.0 / rho
    return np.concatenate([u, w[..., None]], axis=-1)


def cuboid_unwarp(aabb: Aabb, uw: np.ndarray) -> np.ndarray:
    """Inverse of inverse_cuboid_warp: (u, w) back to world meters."""
    uw = np.asarray(uw, dtype=np.float64)
    u, w = uw[..., :3], uw[..., 3]
    xhat = u / w[..., None]
    return xhat * aabb.half_extents + aabb.center


def shell_radii(n_dv: int, r_max: float) -> ShellSchedule:
    """Inverse-proportional shell scales from 1 to r_max.

    r_i = 1 / ((1 - i/n) * 1 + (i/n) * (1/r_max)), with the endpoints pinned
    to exactly 1 and r_max.
    """
    if n_dv < 1:
        raise SpaceError("n_dv must be >= 1")
    if r_max <= 1.0:
        raise SpaceError("r_max must be > 1")
    i = np.arange(n_dv + 1, dtype=np.float64)
    frac = i / n_dv
    radii = 1.0 / ((1.0 - frac) + frac / r_max)
    radii[0] = 1.0
    radii[-1] = r_max
    return ShellSchedule(n_dv, float(r_max), radii)


def shell_crossings(aabb: Aabb, origins: np.ndarray, dirs: np.ndarray,
                    radii: np.ndarray) -> np.ndarray:
    """Depths t where each ray exits the AABB scaled by each radius.

    Returns (..., n_radii). rho along a ray is a max of |affine| terms, so
    the exit of the scaled box is the slab-intersection exit
    t = min_axis max-root of |a_i + t b_i| = r. Rays are assumed to start
    at rho < r (cast from inside outward); entries are NaN where the
    crossing does not exist ahead of the origin.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    a = (origins - aabb.center) / aabb.half_extents
    b = dirs / aabb.half_extents
    r = np.asarray(radii, dtype=np.float64)
    # upper slab root per axis: (r * sign(b) - a) / b, +inf where b == 0
    sb = np.where(b >= 0, 1.0, -1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (r[..., None] * sb[..., None, :] - a[..., None, :]) / b[..., None, :]
    u = np.where(np.abs(b[..., None, :]) > 0, u, np.inf)
    t = u.min(axis=-1)
    t = np.where(np.isfinite(t) & (t >= 0), t, np.nan)
    return t


def distant_samples(
    origin: np.ndarray,
    direction: np.ndarray,
    aabb: Aabb,
    sched: ShellSchedule,
    perturb: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Depths (m) where the ray crosses each cuboid shell of the schedule.

    One depth per shell, strictly increasing. With perturb on, every depth
    but the last is jittered uniformly within [t_i, t_{i+1}).
    """
    t = shell_crossings(aabb, np.asarray(origin), np.asarray(direction), sched.radii)
    if np.any(np.isnan(t)):
        return np.empty(0, dtype=np.float64)
    if perturb:
        if rng is None:
            rng = np.random.default_rng()
        u = rng.random(len(t) - 1)
        t = t.copy()
        t[:-1] = t[:-1] + u * (t[1:] - t[:-1])
    return t


def distant_samples_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    aabb: Aabb,
    sched: ShellSchedule,
    perturb: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Vectorized distant_samples: (R, n_dv+1) depths, NaN rows for misses."""
    t = shell_crossings(aabb, origins, dirs, sched.radii)
    if perturb:
        if rng is None:
            rng = np.random.default_rng()
        u = rng.random(t[..., :-1].shape)
        with np.errstate(invalid="ignore"):
            t = np.concatenate([t[..., :-1] + u * np.diff(t, axis=-1), t[..., -1:]],
                               axis=-1)
    return t


def ray_aabb_interval(aabb: Aabb, origins: np.ndarray, dirs: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """(t_near, t_far) of ray/AABB overlap clipped to t >= 0; empty if t_far <= t_near."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (aabb.min - origins) / dirs
        t1 = (aabb.max - origins) / dirs
    lo = np.where(np.isfinite(t0), np.minimum(t0, t1), -np.inf)
    hi = np.where(np.isfinite(t1), np.maximum(t0, t1), np.inf)
    # axes parallel to the slab: inside -> (-inf, inf), outside -> empty
    par = np.abs(dirs) == 0
    if np.any(par):
        inside = (origins >= aabb.min) & (origins <= aabb.max)
        lo = np.where(par & inside, -np.inf, np.where(par & ~inside, np.inf, lo))
        hi = np.where(par & inside, np.inf, np.where(par & ~inside, -np.inf, hi))
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    return t_near, t_far
