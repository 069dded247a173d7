"""Spherical uv convention shared by the data generator and network initialization."""

import numpy as np


def gt_uv(p: np.ndarray) -> np.ndarray:
    """Spherical UV ``(theta/pi, phi/2pi + 0.5)``; v is 0.5 on the polar axis."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    r = np.linalg.norm(p, axis=1)
    if np.any(r == 0):
        raise ValueError("gt_uv is undefined at the origin")
    theta = np.arccos(np.clip(p[:, 2] / r, -1.0, 1.0))
    on_axis = np.hypot(p[:, 0], p[:, 1]) == 0
    phi = np.where(on_axis, 0.0, np.arctan2(p[:, 1], p[:, 0]))
    return np.stack([theta / np.pi, phi / (2 * np.pi) + 0.5], axis=1)


def uv_to_direction(uv: np.ndarray) -> np.ndarray:
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    theta = uv[:, 0] * np.pi
    phi = (uv[:, 1] - 0.5) * 2 * np.pi
    return np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1)
