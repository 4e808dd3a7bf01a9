"""Flat parameter storage with named segments, Adam, and checkpoint blobs.

All learnable state lives in one flat vector so the optimizer, the
finite-difference harness, and the checkpoint writer see a single
consistent view. Segment views are numpy views into that vector, so field
code mutates storage in place.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"SSDF"
_VERSION = 1


class GradientError(RuntimeError):
    """Raised when a gradient segment turns non-finite."""


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    size: int
    shape: tuple


class ParamStore:
    """Flat value/gradient storage carved into named segments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.values = np.zeros(0, dtype=self.dtype)
        self.grads = np.zeros(0, dtype=self.dtype)
        self.segments: dict[str, Segment] = {}

    def __len__(self) -> int:
        return self.values.size

    def allocate(self, name: str, shape, init: np.ndarray | None = None) -> np.ndarray:
        """Append a named segment; returns the (reshaped) value view.

        Growing the store reallocates the flat buffer, so views obtained
        before a later allocate are stale. Fetch views after all segments
        exist (accessor helpers like mlp_weights always do).
        """
        if name in self.segments:
            raise KeyError(f"segment {name!r} already allocated")
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        size = int(np.prod(shape)) if shape else 1
        offset = self.values.size
        self.values = np.concatenate([self.values, np.zeros(size, dtype=self.dtype)])
        self.grads = np.concatenate([self.grads, np.zeros(size, dtype=self.dtype)])
        self.segments[name] = Segment(name, offset, size, shape)
        if init is not None:
            view = self.view(name)
            view[...] = np.asarray(init, dtype=self.dtype).reshape(shape)
        return self.view(name)

    def view(self, name: str) -> np.ndarray:
        s = self.segments[name]
        return self.values[s.offset:s.offset + s.size].reshape(s.shape)

    def grad_view(self, name: str) -> np.ndarray:
        s = self.segments[name]
        return self.grads[s.offset:s.offset + s.size].reshape(s.shape)

    def zero_grads(self) -> None:
        self.grads[...] = 0

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store at another precision (used by 64-bit grad tests)."""
        out = ParamStore(dtype)
        out.values = self.values.astype(dtype)
        out.grads = np.zeros_like(out.values)
        out.segments = dict(self.segments)
        return out

    # --- checkpoint blob -------------------------------------------------
    # Layout: magic, version u32 LE, header-length u32 LE, UTF-8 JSON header
    # {dtype, segments, specs}, then raw little-endian float32 values in
    # segment order.

    def save(self, path, specs: dict | None = None) -> None:
        header = {
            "dtype": "float32",
            "segments": [
                {"name": s.name, "offset": s.offset, "size": s.size, "shape": list(s.shape)}
                for s in self.segments.values()
            ],
            "specs": specs or {},
        }
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<II", _VERSION, len(blob)))
            f.write(blob)
            f.write(self.values.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> tuple["ParamStore", dict]:
        with open(path, "rb") as f:
            if f.read(4) != _MAGIC:
                raise ValueError(f"{path}: not a parameter blob")
            version, hlen = struct.unpack("<II", f.read(8))
            if version != _VERSION:
                raise ValueError(f"{path}: unsupported blob version {version}")
            header = json.loads(f.read(hlen).decode("utf-8"))
            raw = np.frombuffer(f.read(), dtype="<f4")
        store = cls(dtype)
        store.values = raw.astype(store.dtype)
        store.grads = np.zeros_like(store.values)
        total = 0
        for seg in header["segments"]:
            store.segments[seg["name"]] = Segment(
                seg["name"], int(seg["offset"]), int(seg["size"]), tuple(seg["shape"]))
            total += int(seg["size"])
        if total != store.values.size:
            raise ValueError(f"{path}: segment sizes disagree with payload")
        return store, header.get("specs", {})


class AdamState:
    """Bias-corrected adaptive-moment optimizer over a ParamStore.

    lr_scales maps segment-name prefixes to learning-rate multipliers so
    e.g. hash tables and MLPs can step at different rates. A multiplier of
    zero freezes a segment.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-15,
                 lr_scales: dict[str, float] | None = None):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = np.zeros(len(store), dtype=store.dtype)
        self.v = np.zeros(len(store), dtype=store.dtype)
        self.lr_scale = np.ones(len(store), dtype=store.dtype)
        if lr_scales:
            for seg in store.segments.values():
                for prefix, scale in lr_scales.items():
                    if seg.name == prefix or seg.name.startswith(prefix + "/"):
                        self.lr_scale[seg.offset:seg.offset + seg.size] = scale

    def state_arrays(self) -> dict:
        return {"m": self.m, "v": self.v,
                "step_count": np.array([self.step_count], dtype=np.int64)}

    def load_state_arrays(self, d: dict) -> None:
        self.m[...] = d["m"]
        self.v[...] = d["v"]
        self.step_count = int(np.asarray(d["step_count"]).reshape(-1)[0])


def adam_step(state: AdamState, store: ParamStore, lr: float | None = None) -> None:
    """One optimizer step from the accumulated gradients; zeroes them after.

    Non-finite gradients abort with the offending segment named.
    """
    g = store.grads
    if not np.all(np.isfinite(g)):
        for seg in store.segments.values():
            if not np.all(np.isfinite(g[seg.offset:seg.offset + seg.size])):
                raise GradientError(f"non-finite gradient in segment {seg.name!r}")
        raise GradientError("non-finite gradient")
    lr = state.lr if lr is None else float(lr)
    state.step_count += 1
    t = state.step_count
    m, v = state.m, state.v
    m += (1.0 - state.beta1) * (g - m)
    v += (1.0 - state.beta2) * (g * g - v)
    c1 = 1.0 / (1.0 - state.beta1 ** t)
    c2 = 1.0 / (1.0 - state.beta2 ** t)
    denom = np.sqrt(v * c2)
    denom += state.eps
    step = m * (lr * c1)
    step *= state.lr_scale
    step /= denom
    store.values -= step
    store.zero_grads()
