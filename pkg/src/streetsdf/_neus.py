"""Shared scalar math for SDF-to-opacity mapping and density surrogates."""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: stable at both tails, one ufunc pass
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def neus_alpha(sdf_i: np.ndarray, sdf_next: np.ndarray, s: float) -> np.ndarray:
    """Opacity of the interval between two consecutive SDF samples.

    alpha = max((Phi_s(S_i) - Phi_s(S_next)) / Phi_s(S_i), 0) with
    Phi_s(x) = sigmoid(s * x). Unbiased surface-localized weights; the
    denominator is floored at 1e-12 against underflow.
    """
    if s <= 0:
        raise ValueError("s must be positive")
    phi_i = sigmoid(np.asarray(sdf_i) * s)
    phi_n = sigmoid(np.asarray(sdf_next) * s)
    return np.maximum((phi_i - phi_n) / np.maximum(phi_i, _EPS), 0.0)


def neus_alpha_backward(sdf_i, sdf_next, s, alphabar):
    """Cotangents (d/dS_i, d/dS_next, d/ds summed) of neus_alpha."""
    sdf_i = np.asarray(sdf_i)
    sdf_next = np.asarray(sdf_next)
    phi_i = sigmoid(sdf_i * s)
    phi_n = sigmoid(sdf_next * s)
    live = (phi_i - phi_n) > 0  # clamped region has zero gradient
    denom = np.maximum(phi_i, _EPS)
    dphi_i = phi_i * (1.0 - phi_i)
    dphi_n = phi_n * (1.0 - phi_n)
    da_dphii = np.where(live, phi_n / denom ** 2, 0.0)
    da_dphin = np.where(live, -1.0 / denom, 0.0)
    si_bar = alphabar * da_dphii * dphi_i * s
    sn_bar = alphabar * da_dphin * dphi_n * s
    s_bar = float(np.sum(alphabar * (da_dphii * dphi_i * sdf_i
                                     + da_dphin * dphi_n * sdf_next)))
    return si_bar, sn_bar, s_bar


def nld(x: np.ndarray, s_reg: float) -> np.ndarray:
    """Normalized logistic density, peak 1 at x = 0: 1 / cosh^2(x / (2 s_reg))."""
    return 1.0 / np.cosh(np.asarray(x) / (2.0 * s_reg)) ** 2


def nld_derivative(x: np.ndarray, s_reg: float) -> np.ndarray:
    x = np.asarray(x)
    a = 2.0 * s_reg
    return -np.tanh(x / a) / np.cosh(x / a) ** 2 / s_reg
