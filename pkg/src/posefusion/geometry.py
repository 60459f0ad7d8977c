"""Calibrated pinhole cameras and rigid transforms into a shared reference frame.

Conventions used throughout the package:

* Pixel coordinates are (x, y) with x = column index and y = row index,
  origin at the centre of the top-left pixel.
* Depth images store the z-coordinate of the surface in the camera frame
  (perpendicular depth), not ray length.
* All lengths are in meters internally; reported metrics convert to
  centimeters at the reporting boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError",
    "BehindCameraError",
    "Point3",
    "RigidTransform",
    "Camera",
    "backproject_pixel",
    "backproject_grid",
    "project_point",
    "transform_point",
    "transform_points",
    "compose",
    "invert_transform",
]


class GeometryError(ValueError):
    """Invalid geometric input (non-finite values, broken invariants)."""


class BehindCameraError(GeometryError):
    """A point with z <= 0 cannot be projected through a pinhole camera."""


@dataclass(frozen=True)
class Point3:
    """A 3D point in meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.z)):
            raise GeometryError(f"Point3 components must be finite, got {(self.x, self.y, self.z)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Point3":
        a = np.asarray(a, dtype=np.float64)
        return Point3(float(a[0]), float(a[1]), float(a[2]))


_ROTATION_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid transform as a 4x4 row-major homogeneous matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"rigid transform matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise GeometryError("rigid transform matrix contains non-finite values")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise GeometryError(f"rigid transform bottom row must be (0,0,0,1), got {m[3]}")
        r = m[:3, :3]
        ortho_err = np.max(np.abs(r.T @ r - np.eye(3)))
        if ortho_err >= _ROTATION_TOL:
            raise GeometryError(
                f"rotation block is not orthonormal: max |R^T R - I| = {ortho_err:.3e}"
            )
        if np.linalg.det(r) <= 0:
            raise GeometryError("rotation block must have determinant +1 (proper rotation)")
        object.__setattr__(self, "matrix", m)
        m.setflags(write=False)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(4))

    @staticmethod
    def from_rotation_translation(rotation, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = np.asarray(rotation, dtype=np.float64)
        m[:3, 3] = np.asarray(translation, dtype=np.float64)
        return RigidTransform(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def is_identity(self, tol: float = 0.0) -> bool:
        return np.max(np.abs(self.matrix - np.eye(4))) <= tol


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics plus the rigid transform into the shared frame.

    ``to_reference`` maps points from this camera's frame into the frame of
    camera 0 (the shared reference). Camera 0 itself carries the identity.
    """

    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    to_reference: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise GeometryError(f"camera {self.id}: {name} must be finite, got {v}")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"camera {self.id}: focal lengths must be positive")


def backproject_pixel(pixel, depth: float, camera: Camera) -> Point3:
    """Lift a pixel to a 3D point in the camera's own frame.

    Along the camera ray through (x, y), at z-depth ``depth``:
    (depth*(x-cx)/fx, depth*(y-cy)/fy, depth).
    """
    if not np.isfinite(depth):
        raise GeometryError(f"depth must be finite, got {depth}")
    if depth < 0:
        raise GeometryError(f"depth must be non-negative, got {depth}")
    x, y = float(pixel[0]), float(pixel[1])
    return Point3(
        depth * (x - camera.cx) / camera.fx,
        depth * (y - camera.cy) / camera.fy,
        depth,
    )


def backproject_grid(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Backproject every pixel of a depth raster at once.

    Returns an (H*W, 3) array of camera-frame points in row-major pixel
    order. Pixels with depth 0 map to the origin.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)):
        raise GeometryError("depth raster contains non-finite values")
    if np.any(depth < 0):
        raise GeometryError("depth raster contains negative values")
    h, w = depth.shape
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx = (xs[None, :] - camera.cx) / camera.fx
    gy = (ys[:, None] - camera.cy) / camera.fy
    pts = np.empty((h, w, 3))
    pts[:, :, 0] = depth * gx
    pts[:, :, 1] = depth * gy
    pts[:, :, 2] = depth
    return pts.reshape(-1, 3)


def project_point(point: Point3, camera: Camera) -> tuple[float, float]:
    """Forward pinhole projection to continuous pixel coordinates."""
    if point.z <= 0:
        raise BehindCameraError(f"cannot project point with z={point.z} (behind camera)")
    return (
        camera.fx * point.x / point.z + camera.cx,
        camera.fy * point.y / point.z + camera.cy,
    )


def transform_point(point: Point3, t: RigidTransform) -> Point3:
    """Apply a rigid transform: homogeneous multiply T @ [x y z 1]."""
    v = t.matrix @ np.array([point.x, point.y, point.z, 1.0])
    return Point3(float(v[0]), float(v[1]), float(v[2]))


def transform_points(points: np.ndarray, t: RigidTransform) -> np.ndarray:
    """Apply a rigid transform to an (N, 3) array of points."""
    points = np.asarray(points, dtype=np.float64)
    return points @ t.rotation.T + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """The transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.matrix @ b.matrix)


def invert_transform(t: RigidTransform) -> RigidTransform:
    """Closed-form rigid inverse: [R^T, -R^T t]."""
    r_inv = t.rotation.T
    return RigidTransform.from_rotation_translation(r_inv, -r_inv @ t.translation)
