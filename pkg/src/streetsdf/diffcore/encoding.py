"""Sin/cos frequency encoding for direction vectors."""

from __future__ import annotations

import numpy as np


def dir_encode(v: np.ndarray, n_freq: int) -> tuple[np.ndarray, np.ndarray]:
    """Encode unit vectors as [sin(2^k pi v), cos(2^k pi v)] for k < n_freq.

    Output width is 3 * 2 * n_freq. Non-unit inputs are normalized and
    flagged. Deterministic.
    """
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    norms = np.linalg.norm(v, axis=-1)
    flagged = np.abs(norms - 1.0) > 1e-6
    v = v / np.maximum(norms, 1e-12)[..., None]
    return _encode(v, n_freq), flagged


def _encode(v: np.ndarray, n_freq: int) -> np.ndarray:
    n = v.shape[0]
    out = np.empty((n, 6 * n_freq), dtype=v.dtype)
    for k in range(n_freq):
        s = (2.0 ** k) * np.pi
        out[:, 6 * k:6 * k + 3] = np.sin(s * v)
        out[:, 6 * k + 3:6 * k + 6] = np.cos(s * v)
    return out


def dir_encode_cached(v: np.ndarray, n_freq: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched encode of already-unit vectors; also returns d enc / d v.

    The Jacobian is diagonal per frequency block: returns (enc, denc) with
    denc shape (N, 6*n_freq, 3) sparse-as-dense (diagonal blocks only).
    """
    v = np.atleast_2d(v)
    enc = _encode(v, n_freq)
    n = v.shape[0]
    denc = np.zeros((n, 6 * n_freq, 3), dtype=v.dtype)
    rng3 = np.arange(3)
    for k in range(n_freq):
        s = (2.0 ** k) * np.pi
        denc[:, 6 * k + rng3, rng3] = s * enc[:, 6 * k + 3:6 * k + 6]
        denc[:, 6 * k + 3 + rng3, rng3] = -s * enc[:, 6 * k:6 * k + 3]
    return enc, denc


def dir_encode_backward(denc: np.ndarray, encbar: np.ndarray) -> np.ndarray:
    """Pull an encoding cotangent back to the direction vector."""
    return np.einsum("nea,ne->na", denc, encbar)
