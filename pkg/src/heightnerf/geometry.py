"""Rays, pinhole cameras and image buffers.

Camera convention: the camera looks along -z of its own frame with +x to the
right and +y up. Pixel (0, 0) is the top-left pixel and rays pass through pixel
centers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

Vec3 = np.ndarray


def vec3(x: float, y: float, z: float) -> Vec3:
    v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector component in {v}")
    return v


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


@dataclass(frozen=True)
class Ray:
    origin: Vec3
    direction: Vec3
    t_near: float
    t_far: float

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64)
        direction = np.asarray(self.direction, dtype=np.float64)
        if origin.shape != (3,) or direction.shape != (3,):
            raise ValueError("ray origin and direction must be 3-vectors")
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must have unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def at(self, t):
        """Point(s) at ray parameter ``t`` (scalar or array)."""
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class Camera:
    camera_to_world: np.ndarray
    fov_x: float
    width: int
    height: int
    near: float = 0.0
    far: float = 1.0

    def __post_init__(self):
        c2w = np.asarray(self.camera_to_world, dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ValueError("camera_to_world must be 4x4")
        rot = c2w[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")
        if not (0.0 < self.fov_x < np.pi):
            raise ValueError("fov_x must lie in (0, pi)")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0.0 <= self.near < self.far):
            raise ValueError("need 0 <= near < far")
        object.__setattr__(self, "camera_to_world", c2w)

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)

    @property
    def position(self) -> Vec3:
        return self.camera_to_world[:3, 3].copy()


def _camera_frame_dirs(camera: Camera, px, py):
    f = camera.focal
    u = (np.asarray(px, dtype=np.float64) + 0.5 - 0.5 * camera.width) / f
    v = -(np.asarray(py, dtype=np.float64) + 0.5 - 0.5 * camera.height) / f
    return np.stack([u, v, -np.ones_like(u)], axis=-1)


def ray_for_pixel(camera: Camera, px: int, py: int) -> Ray:
    """Ray through the center of pixel ``(px, py)``."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise IndexError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d_cam = _camera_frame_dirs(camera, px, py)
    d = camera.camera_to_world[:3, :3] @ d_cam
    d = d / np.linalg.norm(d)
    return Ray(camera.position, d, camera.near, camera.far)


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel, row-major ``(H*W, 3)``."""
    py, px = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    d_cam = _camera_frame_dirs(camera, px.ravel(), py.ravel())
    dirs = normalize(d_cam @ camera.camera_to_world[:3, :3].T)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    back = eye - target
    back /= np.linalg.norm(back)
    if abs(np.dot(back, up)) > 1.0 - 1e-9:
        # straight down/up: any horizontal "up" works
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = true_up
    m[:3, 2] = back
    m[:3, 3] = eye
    return m


@dataclass
class ImageBuffer:
    """RGB image with channels in [0, 1], stored as an ``(height, width, 3)`` array."""

    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel channels must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_flat(cls, flat, width: int, height: int) -> "ImageBuffer":
        return cls(np.asarray(flat, dtype=np.float64).reshape(height, width, 3))

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def save_png(self, path) -> None:
        Image.fromarray(self.to_uint8()).save(Path(path), format="PNG")

    @classmethod
    def load_png(cls, path) -> "ImageBuffer":
        with Image.open(Path(path)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return cls(arr)
