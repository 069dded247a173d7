from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    """Pinhole camera.  ``R`` maps world to camera axes (right, down, forward)."""

    R: np.ndarray
    t: np.ndarray
    focal: float
    principal: tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise ValueError("camera needs positive extents and focal length")
        self.principal = (float(self.principal[0]), float(self.principal[1]))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, width=128, height=128,
                fov_deg: float = 45.0, focal: float | None = None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if np.linalg.norm(np.cross(forward, up)) < 1e-8:
            up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        if focal is None:
            focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(R, -R @ eye, float(focal), (width / 2, height / 2), width, height)

    @classmethod
    def orbit(cls, yaw_deg: float, pitch_deg: float = 0.0, distance: float = 3.0, **kw) -> "Camera":
        """Camera on a sphere around the origin; yaw 0 looks at the +x face."""
        y, p = np.radians(yaw_deg), np.radians(pitch_deg)
        eye = distance * np.array([np.cos(y) * np.cos(p), np.sin(y) * np.cos(p), np.sin(p)])
        return cls.look_at(eye, **kw)

    def pixel_directions(self) -> np.ndarray:
        """Unit world-space directions through every pixel center, row-major (H*W, 3)."""
        xs = np.arange(self.width) + 0.5
        ys = np.arange(self.height) + 0.5
        px, py = np.meshgrid(xs, ys)
        d_cam = np.stack([(px - self.principal[0]) / self.focal,
                          (py - self.principal[1]) / self.focal,
                          np.ones_like(px)], axis=-1).reshape(-1, 3)
        d = d_cam @ self.R
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Continuous pixel coordinates (x, y) of world points, shape (N, 2)."""
        pc = np.asarray(points, dtype=np.float64) @ self.R.T + self.t
        return np.stack([self.focal * pc[:, 0] / pc[:, 2] + self.principal[0],
                         self.focal * pc[:, 1] / pc[:, 2] + self.principal[1]], axis=1)

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist(), "focal": self.focal,
                "principal": list(self.principal), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["R"]), np.array(d["t"]), d["focal"], tuple(d["principal"]),
                   int(d["width"]), int(d["height"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Camera":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
