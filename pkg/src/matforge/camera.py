"""Cameras and the camera-set JSON format.

Conventions, used consistently by the rasterizer and the backprojector:
  - look-at basis: forward = normalize(target - position),
    right = normalize(forward x up), up' = right x forward; forward points
    into the scene, so (right, up', forward) is left-handed
  - depth is the distance along the forward axis (camera units), not NDC z
  - screen space is y-down with pixel centers at (i + 0.5, j + 0.5)
  - orthographic `extent` is the HALF-HEIGHT of the view window in world
    units; the half-width is extent * width / height
  - perspective `fov_y` is the full vertical field of view in degrees
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class CameraError(ValueError):
    pass


ORTHO = "ortho"
PERSP = "persp"

_MODE_ALIASES = {
    "ortho": ORTHO,
    "orthographic": ORTHO,
    "persp": PERSP,
    "perspective": PERSP,
}


@dataclass(frozen=True)
class Camera:
    mode: str
    position: np.ndarray
    target: np.ndarray
    up: np.ndarray
    width: int
    height: int
    extent: float = 1.0   # ortho only: half-height, world units
    fov_y: float = 45.0   # persp only: vertical FOV, degrees

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.mode)
        if mode is None:
            raise CameraError(f"unknown camera mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        for name in ("position", "target", "up"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            object.__setattr__(self, name, v)
        if self.width < 1 or self.height < 1:
            raise CameraError("resolution must be at least 1x1")
        view = self.target - self.position
        if np.linalg.norm(view) < 1e-12:
            raise CameraError("view direction is zero (position == target)")
        f = view / np.linalg.norm(view)
        upn = self.up / np.linalg.norm(self.up)
        if abs(float(np.dot(f, upn))) > 1.0 - 1e-9:
            raise CameraError("up vector is parallel to the view direction")
        if self.mode == ORTHO and self.extent <= 0:
            raise CameraError("ortho extent must be positive")
        if self.mode == PERSP and not (0 < self.fov_y < 180):
            raise CameraError("fov_y must lie in (0, 180) degrees")

    @property
    def aspect(self) -> float:
        return self.width / self.height

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) orthonormal world-space axes."""
        f = self.target - self.position
        f = f / np.linalg.norm(f)
        r = np.cross(f, self.up)
        r = r / np.linalg.norm(r)
        u = np.cross(r, f)
        return r, u, f

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points (N, 3) -> (pixel xy (N, 2), depth (N,), w (N,)).

        depth is the forward-axis distance; w is the perspective divisor
        used for perspective-correct interpolation (1 for orthographic).
        Points at or behind a perspective camera get non-finite pixels.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        r, u, f = self.basis()
        d = p - self.position
        x = d @ r
        y = d @ u
        z = d @ f
        if self.mode == ORTHO:
            sx = x / (self.extent * self.aspect)
            sy = y / self.extent
            w = np.ones_like(z)
        else:
            t = np.tan(np.deg2rad(self.fov_y) * 0.5)
            with np.errstate(divide="ignore", invalid="ignore"):
                sx = x / (z * t * self.aspect)
                sy = y / (z * t)
            sx = np.where(z > 0, sx, np.inf)
            sy = np.where(z > 0, sy, np.inf)
            w = z.copy()  # distinct array: callers may permute one of them
        px = (sx * 0.5 + 0.5) * self.width
        py = (0.5 - sy * 0.5) * self.height
        return np.stack([px, py], axis=-1), z, w

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel-center rays: origins (H, W, 3) and unit directions.

        The inverse of project_points on the image grid; used by the
        ray-cast oracle and handy for debugging.
        """
        r, u, f = self.basis()
        ix = (np.arange(self.width) + 0.5) / self.width
        iy = (np.arange(self.height) + 0.5) / self.height
        sx = ix * 2.0 - 1.0
        sy = 1.0 - 2.0 * iy
        gx, gy = np.meshgrid(sx, sy)
        if self.mode == ORTHO:
            origins = (self.position
                       + gx[..., None] * (self.extent * self.aspect) * r
                       + gy[..., None] * self.extent * u)
            dirs = np.broadcast_to(f, origins.shape).copy()
        else:
            t = np.tan(np.deg2rad(self.fov_y) * 0.5)
            dirs = (f + gx[..., None] * (t * self.aspect) * r + gy[..., None] * t * u)
            dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
            origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "position": [float(v) for v in self.position],
            "target": [float(v) for v in self.target],
            "up": [float(v) for v in self.up],
            "width": int(self.width),
            "height": int(self.height),
        }
        if self.mode == ORTHO:
            d["extent"] = float(self.extent)
        else:
            d["fov_y"] = float(self.fov_y)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            kwargs = dict(
                mode=d["mode"],
                position=d["position"],
                target=d["target"],
                up=d["up"],
                width=int(d["width"]),
                height=int(d["height"]),
            )
        except KeyError as e:
            raise CameraError(f"camera entry missing field {e.args[0]!r}") from e
        if "extent" in d:
            kwargs["extent"] = float(d["extent"])
        if "fov_y" in d:
            kwargs["fov_y"] = float(d["fov_y"])
        return cls(**kwargs)


def read_cameras(path) -> list[Camera]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict) or "cameras" not in doc:
        raise CameraError(f"{path}: expected a JSON object with a 'cameras' list")
    return [Camera.from_dict(d) for d in doc["cameras"]]


def write_cameras(path, cameras) -> None:
    doc = {"cameras": [c.to_dict() for c in cameras]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
