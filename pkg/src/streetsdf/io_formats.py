"""On-disk formats: PFM float maps, 8-bit PNG, PLY geometry, lidar records.

PFM scale-sign encodes endianness (negative = little-endian); the reader
accepts both, dataset files are written little-endian, rendered outputs
big-endian-scale. PFM rows are stored bottom-up per convention. Lidar beam
files are packed records of 7 little-endian float32:
ox oy oz dx dy dz range, with range <= 0 meaning no return.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image


def write_png(path, img: np.ndarray) -> None:
    """8-bit image; float input in [0,1] is quantized, uint8 passes through."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path))


def write_pfm(path, data: np.ndarray, little_endian: bool = True) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
        rows = data[::-1]
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
        rows = data[::-1]
    else:
        raise ValueError("PFM supports HxW or HxWx3 float maps")
    scale = -1.0 if little_endian else 1.0
    dt = "<f4" if little_endian else ">f4"
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(f"{scale}\n".encode())
        f.write(rows.astype(dt).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(tok) for tok in f.readline().split())
        scale = float(f.readline())
        dt = "<f4" if scale < 0 else ">f4"
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype=dt).astype(np.float32)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return data.reshape(shape)[::-1].copy()


def write_ply_points(path, points: np.ndarray, ranges: np.ndarray | None = None) -> None:
    """ASCII PLY point cloud with x,y,z and optional per-point range."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if ranges is not None:
        lines.append("property float range")
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        if ranges is None:
            for p in points:
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
        else:
            for p, r in zip(points, np.asarray(ranges).reshape(-1)):
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {r:.6f}\n")


def read_ply_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        props = []
        n = 0
        while True:
            line = f.readline().strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        data = np.loadtxt(f, max_rows=n).reshape(n, len(props))
    pts = data[:, :3]
    rng = data[:, 3] if "range" in props else None
    return pts, rng


def write_ply_mesh(path, vertices: np.ndarray, normals: np.ndarray,
                   faces: np.ndarray) -> None:
    """Binary little-endian PLY mesh with per-vertex normals."""
    vertices = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    normals = np.asarray(normals, dtype="<f4").reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    header = "\n".join([
        "ply", "format binary_little_endian 1.0",
        f"element vertex {len(vertices)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices", "end_header", ""])
    vert_block = np.concatenate([vertices, normals], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(vert_block.tobytes())
        for tri in faces:
            f.write(struct.pack("<B3i", 3, int(tri[0]), int(tri[1]), int(tri[2])))


def read_ply_mesh(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        n_vert = n_face = 0
        while True:
            line = f.readline().strip()
            if line.startswith(b"element vertex"):
                n_vert = int(line.split()[-1])
            elif line.startswith(b"element face"):
                n_face = int(line.split()[-1])
            elif line == b"end_header":
                break
        vert = np.frombuffer(f.read(n_vert * 24), dtype="<f4").reshape(n_vert, 6)
        faces = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            cnt = f.read(1)[0]
            faces[i] = struct.unpack(f"<{cnt}i", f.read(4 * cnt))
    return vert[:, :3].astype(np.float64), vert[:, 3:].astype(np.float64), faces


def write_lidar_bin(path, origins: np.ndarray, dirs: np.ndarray,
                    ranges: np.ndarray) -> None:
    rec = np.concatenate([
        np.asarray(origins, dtype=np.float64).reshape(-1, 3),
        np.asarray(dirs, dtype=np.float64).reshape(-1, 3),
        np.asarray(ranges, dtype=np.float64).reshape(-1, 1),
    ], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def read_lidar_bin(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 7).astype(np.float64)
    return raw[:, 0:3], raw[:, 3:6], raw[:, 6]
