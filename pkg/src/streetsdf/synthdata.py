"""Analytic street-scene ground truth: primitive scenes with exact SDFs,
procedurally textured Lambertian shading, posed-image/lidar/mask/cue
generation, and dataset (de)serialization.

Scenes carry close-range primitives (ground plane, boxes, cylinders)
plus distant backdrop primitives hundreds of meters out, a sun direction
and a directional sky. Every primitive SDF is exact, so the scene SDF is
1-Lipschitz and sphere tracing with step_scale <= 1 is sound. The dataset
directory layout (all multi-byte binary little-endian):

    meta.json                        frames, cameras, 4x4 row-major poses,
                                     ego poses, ego_height_m, flags
    images/{frame:04d}_{cam}.png     8-bit RGB
    masks/{frame:04d}_{cam}.png      8-bit, 255 = sky (optional)
    lidar/{frame:04d}.bin            records of 7 float32:
                                     ox oy oz dx dy dz range (<= 0 no return)
    mono/depth_... .pfm, mono/normal_... .pfm   monocular-style cues (optional)
    gt/                              oracle depth/normal maps (evaluation)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .io_formats import (
    read_lidar_bin,
    read_pfm,
    read_png,
    write_lidar_bin,
    write_pfm,
    write_png,
)
from .renderer import sphere_trace_batch
from .space import Aabb, PinholeCamera, RigidPose, Trajectory

_AMBIENT = 0.3


def _hash01(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1)."""
    h = (ix.astype(np.uint64) * np.uint64(73856093)
         ^ iy.astype(np.uint64) * np.uint64(19349663)
         ^ iz.astype(np.uint64) * np.uint64(83492791)
         ^ np.uint64(salt * 2654435761))
    h = (h ^ (h >> np.uint64(13))) * np.uint64(0x5BD1E995)
    h = h ^ (h >> np.uint64(15))
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0x1000000)


def value_noise(pts: np.ndarray, scale: float, salt: int = 0) -> np.ndarray:
    """Trilinearly interpolated lattice value noise in [0, 1)."""
    p = np.asarray(pts, dtype=np.float64) / scale
    c = np.floor(p).astype(np.int64)
    f = p - c
    out = np.zeros(len(p))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[:, 0] if dx else 1 - f[:, 0])
                     * (f[:, 1] if dy else 1 - f[:, 1])
                     * (f[:, 2] if dz else 1 - f[:, 2]))
                out += w * _hash01(c[:, 0] + dx, c[:, 1] + dy, c[:, 2] + dz, salt)
    return out


@dataclass(frozen=True)
class Primitive:
    """plane | box | cylinder with pose, size, and a value-noise albedo."""

    kind: str                 # "plane" | "box" | "cylinder"
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (1.0, 1.0, 1.0)   # box only
    radius: float = 1.0                     # cylinder only
    half_height: float = 1.0                # cylinder only
    yaw: float = 0.0                        # box only, radians about +z
    base_color: tuple = (0.5, 0.5, 0.5)
    noise_amp: float = 0.15
    noise_scale: float = 2.0
    salt: int = 0

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64) - np.asarray(self.center)
        if self.kind == "plane":
            return p[:, 2]
        if self.kind == "box":
            cy, sy = np.cos(self.yaw), np.sin(self.yaw)
            q = np.empty_like(p)
            q[:, 0] = cy * p[:, 0] + sy * p[:, 1]
            q[:, 1] = -sy * p[:, 0] + cy * p[:, 1]
            q[:, 2] = p[:, 2]
            d = np.abs(q) - np.asarray(self.half_extents)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
            inside = np.minimum(d.max(axis=1), 0.0)
            return outside + inside
        if self.kind == "cylinder":
            dr = np.hypot(p[:, 0], p[:, 1]) - self.radius
            dz = np.abs(p[:, 2]) - self.half_height
            d = np.stack([dr, dz], axis=1)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
            inside = np.minimum(d.max(axis=1), 0.0)
            return outside + inside
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def albedo(self, pts: np.ndarray) -> np.ndarray:
        n = value_noise(pts, self.noise_scale, self.salt)
        base = np.asarray(self.base_color)
        return np.clip(base[None, :] * (1.0 + self.noise_amp * (2.0 * n - 1.0))[:, None],
                       0.0, 1.0)


@dataclass(frozen=True)
class SceneSpec:
    """Analytic scene: close primitives, far backdrop, lighting, capture rig."""

    name: str
    close: tuple                  # Primitive, inside the close-range AABB
    backdrop: tuple               # Primitive, placed 200-800 m out
    sun_dir: tuple                # unit, pointing from scene toward the sun
    sky_horizon: tuple = (0.75, 0.82, 0.92)
    sky_zenith: tuple = (0.25, 0.45, 0.85)
    trajectory: Trajectory | None = None
    cameras: tuple = ()           # (PinholeCamera, ego-to-camera RigidPose)
    ego_height: float = 1.6
    max_trace_range: float = 1500.0

    @property
    def primitives(self) -> tuple:
        return self.close + self.backdrop

    def sdf(self, pts: np.ndarray, include_backdrop: bool = True) -> np.ndarray:
        prims = self.primitives if include_backdrop else self.close
        vals = np.stack([p.sdf(pts) for p in prims], axis=0)
        return vals.min(axis=0)

    def nearest_primitive(self, pts: np.ndarray) -> np.ndarray:
        vals = np.stack([p.sdf(pts) for p in self.primitives], axis=0)
        return vals.argmin(axis=0)

    def sky_color(self, dirs: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(dirs)
        up = np.clip(d[:, 2], 0.0, 1.0) ** 0.7
        col = (1 - up)[:, None] * np.asarray(self.sky_horizon) \
            + up[:, None] * np.asarray(self.sky_zenith)
        glow = np.clip(d @ np.asarray(self.sun_dir), 0.0, 1.0) ** 50.0
        return np.clip(col + 0.4 * glow[:, None], 0.0, 1.0)

    def shade(self, pts: np.ndarray, normals: np.ndarray,
              prim_idx: np.ndarray) -> np.ndarray:
        """Lambertian with sun plus constant ambient over procedural albedo."""
        albedo = np.zeros((len(pts), 3))
        for i, prim in enumerate(self.primitives):
            m = prim_idx == i
            if m.any():
                albedo[m] = prim.albedo(pts[m])
        lam = np.clip(normals @ np.asarray(self.sun_dir), 0.0, 1.0)
        return np.clip(albedo * (_AMBIENT + (1.0 - _AMBIENT) * lam)[:, None], 0.0, 1.0)

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """(hit, t, normal, backdrop_only) via sphere tracing the scene SDF."""
        res = sphere_trace_batch(self.sdf, origins, dirs, t_min=0.0,
                                 t_max=self.max_trace_range, max_iters=512,
                                 eps=1e-3, step_scale=1.0)
        prim = self.nearest_primitive(res.x)
        backdrop_only = res.hit & (prim >= len(self.close))
        return res.hit, res.t, res.normal, prim, backdrop_only


def _frontal_rig(n_cams: int, width: int, height: int, hfov_deg: float = 70.0
                 ) -> tuple:
    """1-3 frontal pinhole cameras mounted on the ego (x forward, z up)."""
    fx = width / (2.0 * np.tan(np.radians(hfov_deg) / 2.0))
    cam = PinholeCamera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                        width=width, height=height, near=0.2, far=300.0)
    yaws = {1: [0.0], 2: [0.3, -0.3], 3: [0.0, 0.6, -0.6]}[n_cams]
    rig = []
    for yaw in yaws:
        cy, sy = np.cos(yaw), np.sin(yaw)
        # camera +z -> ego forward (+x rotated by yaw), +x -> right, +y -> down
        fwd = np.array([cy, sy, 0.0])
        right = np.array([sy, -cy, 0.0])
        down = np.array([0.0, 0.0, -1.0])
        r = np.stack([right, down, fwd], axis=1)
        rig.append((cam, RigidPose(r, np.zeros(3))))
    return tuple(rig)


def _straight_trajectory(length: float, n_frames: int, z: float) -> Trajectory:
    xs = np.linspace(0.0, length, n_frames)
    poses = tuple(RigidPose(np.eye(3), np.array([x, 0.0, z])) for x in xs)
    return Trajectory(poses, np.arange(n_frames, dtype=np.float64))


def _curved_trajectory(length: float, n_frames: int, z: float,
                       radius: float = 150.0) -> Trajectory:
    arc = length / radius
    angles = np.linspace(0.0, arc, n_frames)
    poses = []
    for a in angles:
        pos = np.array([radius * np.sin(a), radius * (1.0 - np.cos(a)), z])
        c, s = np.cos(a), np.sin(a)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        poses.append(RigidPose(r, pos))
    return Trajectory(tuple(poses), np.arange(n_frames, dtype=np.float64))


def build_preset_scene(name: str, seed: int = 0, n_cams: int = 3,
                       width: int = 160, height: int = 120) -> SceneSpec:
    """Deterministic preset scenes keyed by (name, seed)."""
    rng = np.random.default_rng(seed)
    sun = np.array([0.35, 0.25, 0.9]) + rng.uniform(-0.05, 0.05, 3)
    sun /= np.linalg.norm(sun)
    ground = Primitive("plane", center=(0, 0, 0), base_color=(0.42, 0.42, 0.45),
                       noise_amp=0.2, noise_scale=1.5, salt=1)
    if name == "unit-tests":
        box = Primitive("box", center=(8.0, 2.0, 1.0), half_extents=(1.0, 1.0, 1.0),
                        base_color=(0.7, 0.3, 0.2), salt=2)
        traj = _straight_trajectory(4.0, 4, z=1.6)
        backdrop = (Primitive("box", center=(260.0, 0.0, 20.0),
                              half_extents=(5.0, 120.0, 60.0),
                              base_color=(0.5, 0.55, 0.6), salt=99),)
        return SceneSpec(name, (ground, box), backdrop, tuple(sun),
                         trajectory=traj,
                         cameras=_frontal_rig(1, 64, 48), ego_height=1.6)
    if name in ("straight-street", "curved-street"):
        length = 100.0
        n_frames = 50
        traj = _straight_trajectory(length, n_frames, z=1.6) \
            if name == "straight-street" \
            else _curved_trajectory(length, n_frames, z=1.6)
        close = [ground]
        n_boxes = int(rng.integers(8, 21))
        for i in range(n_boxes):
            side = 1.0 if i % 2 == 0 else -1.0
            x = rng.uniform(-5.0, length + 15.0)
            y = side * rng.uniform(7.0, 13.0)
            h = rng.uniform(3.0, 11.0)
            hx = rng.uniform(2.0, 7.0)
            hy = rng.uniform(1.5, 4.0)
            col = tuple(rng.uniform(0.25, 0.85, 3))
            close.append(Primitive("box", center=(x, y, h), half_extents=(hx, hy, h),
                                   yaw=rng.uniform(-0.15, 0.15), base_color=col,
                                   noise_amp=0.18, noise_scale=rng.uniform(1.0, 3.0),
                                   salt=10 + i))
        # a couple of parked-car-scale boxes on the roadside
        for i in range(2):
            x = rng.uniform(10.0, length - 10.0)
            y = (-1.0) ** i * rng.uniform(3.0, 4.5)
            close.append(Primitive("box", center=(x, y, 0.8),
                                   half_extents=(2.2, 1.0, 0.8),
                                   yaw=rng.uniform(-0.1, 0.1),
                                   base_color=tuple(rng.uniform(0.2, 0.8, 3)),
                                   noise_amp=0.1, noise_scale=0.8, salt=50 + i))
        # one roadside cylinder (pillar)
        close.append(Primitive("cylinder", center=(length * 0.4, 5.5, 2.0),
                               radius=0.4, half_height=2.0,
                               base_color=(0.6, 0.6, 0.58), salt=70))
        backdrop = (
            Primitive("box", center=(length + 280.0, 0.0, 30.0),
                      half_extents=(10.0, 200.0, 80.0),
                      base_color=(0.45, 0.5, 0.62), noise_amp=0.25,
                      noise_scale=15.0, salt=90),
            Primitive("box", center=(length * 0.5, 320.0, 25.0),
                      half_extents=(250.0, 10.0, 70.0),
                      base_color=(0.5, 0.48, 0.55), noise_amp=0.25,
                      noise_scale=18.0, salt=91),
            Primitive("box", center=(length * 0.5, -350.0, 20.0),
                      half_extents=(250.0, 10.0, 60.0),
                      base_color=(0.52, 0.5, 0.5), noise_amp=0.25,
                      noise_scale=20.0, salt=92),
        )
        return SceneSpec(name, tuple(close), backdrop, tuple(sun),
                         trajectory=traj,
                         cameras=_frontal_rig(n_cams, width, height),
                         ego_height=1.6)
    raise ValueError(f"unknown preset {name!r}")


def scene_sdf(scene: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """Exact signed distance to the nearest scene primitive."""
    return scene.sdf(np.atleast_2d(pts))


def camera_rays(cam: PinholeCamera, pose: RigidPose
                ) -> tuple[np.ndarray, np.ndarray]:
    """World origins/dirs for every pixel (row-major)."""
    vs, us = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    d_cam = cam.pixel_dirs(us.ravel().astype(np.float64),
                           vs.ravel().astype(np.float64))
    d_world = d_cam @ pose.rotation.T
    o = np.tile(pose.translation, (len(d_world), 1))
    return o, d_world


def render_gt_frame(scene: SceneSpec, cam: PinholeCamera, pose: RigidPose,
                    exposure_gain: float = 1.0):
    """Sphere-traced oracle render.

    Returns (rgb HxWx3 float, depth HxW float with NaN at sky,
    normal_cam HxWx3 float, sky_mask HxW bool). Depth is Euclidean range
    along the pixel ray; normals are in camera coordinates.
    """
    o, d = camera_rays(cam, pose)
    hit, t, normal, prim, _ = scene.trace(o, d)
    rgb = scene.sky_color(d)
    pts = o + t[:, None] * d
    if hit.any():
        rgb[hit] = scene.shade(pts[hit], normal[hit], prim[hit])
    rgb = np.clip(rgb * exposure_gain, 0.0, 1.0)
    depth = np.where(hit, t, np.nan)
    n_cam = normal @ pose.rotation  # world -> camera
    n_cam[~hit] = 0.0
    h, w = cam.height, cam.width
    return (rgb.reshape(h, w, 3), depth.reshape(h, w),
            n_cam.reshape(h, w, 3), (~hit).reshape(h, w))


def lidar_beams_for_pose(pose: RigidPose, n_elevations: int = 64,
                         azimuth_step_deg: float = 1.5,
                         azimuth_limit_deg: float = 60.0
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Frontal sweep: azimuths in +-azimuth_limit, elevations -15..+5 deg."""
    az = np.radians(np.arange(-azimuth_limit_deg, azimuth_limit_deg + 1e-9,
                              azimuth_step_deg))
    el = np.radians(np.linspace(-15.0, 5.0, n_elevations))
    azg, elg = np.meshgrid(az, el, indexing="ij")
    d_ego = np.stack([np.cos(elg) * np.cos(azg), np.cos(elg) * np.sin(azg),
                      np.sin(elg)], axis=-1).reshape(-1, 3)
    d_world = d_ego @ pose.rotation.T
    o = np.tile(pose.translation, (len(d_world), 1))
    return o, d_world


@dataclass
class MonoCueOptions:
    scale: float = 0.8
    shift: float = 0.3
    noise: float = 0.0
    normal_noise_deg: float = 0.0
    max_range: float = 120.0  # beyond this, cues are marked invalid


@dataclass
class DatasetOptions:
    lidar: bool = False
    masks: bool = True
    mono: MonoCueOptions | None = None
    gt_maps: bool = True
    exposure_jitter: bool = False
    lidar_max_range: float = 120.0
    lidar_azimuth_step_deg: float = 1.5
    lidar_elevations: int = 64
    seed: int = 0


@dataclass
class DatasetOnDisk:
    """Loaded view of a dataset directory (see module docstring)."""

    root: Path
    cameras: list
    camera_poses: list        # [frame][cam] RigidPose (camera-to-world)
    ego_poses: list           # [frame] RigidPose
    ego_height: float
    flags: dict
    images: np.ndarray        # (frames, cams, H, W, 3) float32 in [0,1]
    masks: np.ndarray | None  # (frames, cams, H, W) bool, True = sky
    lidar: list | None        # per frame (origins, dirs, ranges)
    mono_depth: np.ndarray | None
    mono_normal: np.ndarray | None
    gt_depth: np.ndarray | None
    gt_normal: np.ndarray | None

    @property
    def n_frames(self) -> int:
        return len(self.ego_poses)

    @property
    def n_cams(self) -> int:
        return len(self.cameras)

    def trajectory(self) -> Trajectory:
        return Trajectory(tuple(self.ego_poses),
                          np.arange(self.n_frames, dtype=np.float64))

    def camera_pose_list(self) -> list:
        """Flat [(camera, pose)] pairs over all frames for AABB delimitation."""
        out = []
        for f in range(self.n_frames):
            for c, cam in enumerate(self.cameras):
                out.append((cam, self.camera_poses[f][c]))
        return out


def generate_dataset(scene: SceneSpec, out_dir, options: DatasetOptions
                     ) -> DatasetOnDisk:
    """Write a full dataset directory for a preset scene and reload it."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(options.seed)
    traj = scene.trajectory
    n_frames = len(traj)
    cams = [c for c, _ in scene.cameras]
    meta_cams = [{"id": i, "width": c.width, "height": c.height, "fx": c.fx,
                  "fy": c.fy, "cx": c.cx, "cy": c.cy}
                 for i, c in enumerate(cams)]
    cam_poses = []
    gains = rng.uniform(0.9, 1.1, size=n_frames) if options.exposure_jitter \
        else np.ones(n_frames)
    if options.masks:
        (out / "masks").mkdir(exist_ok=True)
    if options.lidar:
        (out / "lidar").mkdir(exist_ok=True)
    if options.mono:
        (out / "mono").mkdir(exist_ok=True)
    if options.gt_maps:
        (out / "gt").mkdir(exist_ok=True)
    for f, ego in enumerate(traj.poses):
        frame_poses = []
        for ci, (cam, mount) in enumerate(scene.cameras):
            pose = ego.compose(mount)
            frame_poses.append(pose.matrix().tolist())
            rgb, depth, n_cam, sky = render_gt_frame(scene, cam, pose, gains[f])
            write_png(out / "images" / f"{f:04d}_{ci}.png", rgb)
            if options.masks:
                write_png(out / "masks" / f"{f:04d}_{ci}.png",
                          (sky * 255).astype(np.uint8))
            if options.gt_maps:
                write_pfm(out / "gt" / f"depth_{f:04d}_{ci}.pfm", depth)
                write_pfm(out / "gt" / f"normal_{f:04d}_{ci}.pfm", n_cam)
            if options.mono:
                m = options.mono
                md = np.where(depth <= m.max_range, m.scale * depth + m.shift,
                              np.nan)
                if m.noise > 0:
                    md = md + rng.normal(0.0, m.noise, size=md.shape)
                mn = n_cam.copy()
                if m.normal_noise_deg > 0:
                    ang = np.radians(m.normal_noise_deg)
                    mn = mn + rng.normal(0.0, ang, size=mn.shape)
                    norms = np.linalg.norm(mn, axis=-1, keepdims=True)
                    mn = np.where(norms > 1e-9, mn / np.maximum(norms, 1e-9), 0.0)
                    mn[np.isnan(depth)] = 0.0
                write_pfm(out / "mono" / f"depth_{f:04d}_{ci}.pfm",
                          md.astype(np.float32))
                write_pfm(out / "mono" / f"normal_{f:04d}_{ci}.pfm",
                          mn.astype(np.float32))
        cam_poses.append(frame_poses)
        if options.lidar:
            o, d = lidar_beams_for_pose(ego, options.lidar_elevations,
                                        options.lidar_azimuth_step_deg)
            hit, t, _, _, _ = scene.trace(o, d)
            ranges = np.where(hit & (t <= options.lidar_max_range), t, 0.0)
            write_lidar_bin(out / "lidar" / f"{f:04d}.bin", o, d, ranges)
    meta = {
        "frames": n_frames,
        "cameras": meta_cams,
        "camera_poses": cam_poses,
        "ego_poses": [p.matrix().tolist() for p in traj.poses],
        "ego_height_m": scene.ego_height,
        "flags": {"lidar": options.lidar, "masks": options.masks,
                  "mono": options.mono is not None, "gt": options.gt_maps},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    return load_dataset(out)


def load_dataset(root) -> DatasetOnDisk:
    """Load and validate a dataset directory."""
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    n_frames = meta["frames"]
    cameras = [PinholeCamera(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                             width=c["width"], height=c["height"])
               for c in meta["cameras"]]
    n_cams = len(cameras)
    cam_poses = [[RigidPose.from_matrix(np.asarray(m)) for m in frame]
                 for frame in meta["camera_poses"]]
    if len(cam_poses) != n_frames or any(len(f) != n_cams for f in cam_poses):
        raise ValueError("pose count does not match frames x cameras")
    ego_poses = [RigidPose.from_matrix(np.asarray(m)) for m in meta["ego_poses"]]
    flags = meta["flags"]
    h, w = cameras[0].height, cameras[0].width
    images = np.zeros((n_frames, n_cams, h, w, 3), dtype=np.float32)
    masks = np.zeros((n_frames, n_cams, h, w), dtype=bool) if flags["masks"] else None
    mono_d = np.zeros((n_frames, n_cams, h, w), dtype=np.float32) \
        if flags["mono"] else None
    mono_n = np.zeros((n_frames, n_cams, h, w, 3), dtype=np.float32) \
        if flags["mono"] else None
    gt_d = np.zeros((n_frames, n_cams, h, w), dtype=np.float32) \
        if flags.get("gt") else None
    gt_n = np.zeros((n_frames, n_cams, h, w, 3), dtype=np.float32) \
        if flags.get("gt") else None
    for f in range(n_frames):
        for c in range(n_cams):
            img = read_png(root / "images" / f"{f:04d}_{c}.png")
            images[f, c] = img.astype(np.float32) / 255.0
            if masks is not None:
                masks[f, c] = read_png(root / "masks" / f"{f:04d}_{c}.png") >= 128
            if mono_d is not None:
                mono_d[f, c] = read_pfm(root / "mono" / f"depth_{f:04d}_{c}.pfm")
                mono_n[f, c] = read_pfm(root / "mono" / f"normal_{f:04d}_{c}.pfm")
            if gt_d is not None:
                gt_d[f, c] = read_pfm(root / "gt" / f"depth_{f:04d}_{c}.pfm")
                gt_n[f, c] = read_pfm(root / "gt" / f"normal_{f:04d}_{c}.pfm")
    lidar = None
    if flags["lidar"]:
        lidar = [read_lidar_bin(root / "lidar" / f"{f:04d}.bin")
                 for f in range(n_frames)]
    return DatasetOnDisk(root, cameras, cam_poses, ego_poses,
                         meta["ego_height_m"], flags, images, masks, lidar,
                         mono_d, mono_n, gt_d, gt_n)
