"""Shared numerical helpers: smooth cutoffs, Simpson quadrature, small conveniences."""

from __future__ import annotations

import numpy as np


def quintic_step(u):
    """C^2 monotone step: 0 for u<=0, 1 for u>=1, 6u^5-15u^4+10u^3 between."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (10.0 + u * (-15.0 + 6.0 * u))


def quintic_step_d1(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 30.0 * u * u * (1.0 - u) ** 2, 0.0)


def quintic_step_d2(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u), 0.0)


def cutoff_chi(w):
    """Beam cutoff: 1 on |w|<=1/4, 0 on |w|>=1/2, quintic in between."""
    return quintic_step(2.0 - 4.0 * np.abs(w))


def cutoff_chi_d1(w):
    return quintic_step_d1(2.0 - 4.0 * np.abs(w)) * (-4.0) * np.sign(w)


def cutoff_chi_d2(w):
    return quintic_step_d2(2.0 - 4.0 * np.abs(w)) * 16.0


def bump(u):
    """C^2 bump on [0,1]: rises on [0,1/4], plateau, falls on [3/4,1]."""
    return quintic_step(4.0 * u) * quintic_step(4.0 * (1.0 - u))


def bump_d1(u):
    return (4.0 * quintic_step_d1(4.0 * u) * quintic_step(4.0 * (1.0 - u))
            - 4.0 * quintic_step(4.0 * u) * quintic_step_d1(4.0 * (1.0 - u)))


def simpson_weights(n, h):
    """Composite Simpson weights for n nodes (n odd) with spacing h."""
    if n < 3 or n % 2 == 0:
        raise ValueError("Simpson rule needs an odd number of nodes >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


def cumulative_simpson_uniform(y, h):
    """Cumulative integral of samples y on a uniform grid, O(h^4).

    Even-index nodes accumulate full Simpson panels; odd nodes add the
    three-point Newton-Cotes half panel 5y_i + 8y_{i-1} - y_{i-2}.
    """
    y = np.asarray(y)
    n = y.shape[0]
    out = np.zeros_like(y, dtype=np.result_type(y.dtype, float))
    if n == 1:
        return out
    if n == 2:
        out[1] = 0.5 * h * (y[0] + y[1])
        return out
    for i in range(2, n, 2):
        out[i] = out[i - 2] + (h / 3.0) * (y[i - 2] + 4.0 * y[i - 1] + y[i])
    for i in range(1, n, 2):
        if i >= 2:
            out[i] = out[i - 2] + (h / 12.0) * (-y[i - 2] + 8.0 * y[i - 1] + 5.0 * y[i])
        else:
            out[1] = (h / 12.0) * (5.0 * y[0] + 8.0 * y[1] - y[2])
    return out


def relative_l2(a, b, weights=None):
    """|a - b|_2 / |b|_2 with optional quadrature weights."""
    a = np.asarray(a)
    b = np.asarray(b)
    if weights is None:
        weights = np.ones_like(np.real(b))
    num = np.sqrt(np.sum(weights * np.abs(a - b) ** 2))
    den = np.sqrt(np.sum(weights * np.abs(b) ** 2))
    return num / den if den > 0 else num


def unwrap_from(angles, anchor_index):
    """Unwrap a phase array outward from a given index."""
    out = np.array(angles, dtype=float, copy=True)
    right = np.unwrap(out[anchor_index:])
    left = np.unwrap(out[anchor_index::-1])
    out[anchor_index:] = right
    out[anchor_index::-1] = left
    return out
