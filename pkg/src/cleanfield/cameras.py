"""Pinhole cameras: poses, look-at construction, per-pixel ray generation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class CameraPose:
    """Pinhole camera: intrinsics plus a camera-to-world rigid transform.

    ``c2w`` is (3, 4): rotation columns [right, up, -forward], translation in
    the last column. The camera looks along -z in camera space.
    """

    focal: float
    principal: tuple[float, float]
    resolution: tuple[int, int]  # (width, height)
    c2w: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(3, 4)
        if self.focal <= 0:
            raise InvalidInputError(f"focal length must be positive, got {self.focal}")
        if any(r < 1 for r in self.resolution):
            raise InvalidInputError(f"resolution must be positive, got {self.resolution}")
        rot = self.c2w[:, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise InvalidInputError("camera rotation is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:, 3]

    @property
    def forward(self) -> np.ndarray:
        """Optical axis in world space."""
        return -self.c2w[:, 2]


def look_at(eye, target, up=WORLD_UP) -> np.ndarray:
    """Camera-to-world transform for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvalidInputError("eye and target coincide")
    forward = forward / norm
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise InvalidInputError("view direction is parallel to the up vector")
    right = right / rnorm
    cam_up = np.cross(right, forward)
    c2w = np.empty((3, 4))
    c2w[:, 0] = right
    c2w[:, 1] = cam_up
    c2w[:, 2] = -forward
    c2w[:, 3] = eye
    return c2w


def pixel_rays(camera: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """One ray per pixel center, row-major top-left order.

    Returns (origins, directions), both (width*height, 3); directions unit-norm.
    """
    w, h = camera.resolution
    cx, cy = camera.principal
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    # Image y grows downward; camera y is up, camera looks along -z.
    dirs_cam = np.stack(
        [
            (cols.ravel() + 0.5 - cx) / camera.focal,
            -(rows.ravel() + 0.5 - cy) / camera.focal,
            -np.ones(w * h),
        ],
        axis=1,
    )
    dirs = dirs_cam @ camera.c2w[:, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, (w * h, 3)).copy()
    return origins, dirs
