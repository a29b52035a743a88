"""Cameras, hemisphere viewpoints, rays and coordinate transforms.

Conventions used throughout the package:

* World frame: right-handed, +z up. The scene sits around a configurable
  centre point and cameras live on a scene-centric hemisphere above it.
* Camera frame: x right, y down, z forward (optical axis). A point with
  positive z is in front of the camera.
* Poses are world-from-camera: ``x_world = R @ x_cam + t`` where ``t`` is
  the camera centre in world coordinates.
* Pixel coordinates are continuous, with the centre of the pixel in column
  ``i``, row ``j`` at ``(i + 0.5, j + 0.5)``. Valid image coordinates span
  ``[0, width] x [0, height]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ROTATION_TOL = 1e-6
_MIN_PROJECTION_DEPTH = 1e-6


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def rescaled(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics for the same camera at a different pixel resolution."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                          width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def is_rotation(r: np.ndarray, tol: float = _ROTATION_TOL) -> bool:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        return False
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        return False
    return bool(np.linalg.det(r) > 0)


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a near-orthonormal matrix onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        if not is_rotation(self.rotation):
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def centre(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return self.translation

    def matrix(self) -> np.ndarray:
        """4x4 camera-to-world homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform_point(self, x_cam) -> np.ndarray:
        """Map a point from camera to world coordinates."""
        return self.rotation @ _as_vec3(x_cam) + self.translation

    def world_to_camera(self, x_world) -> np.ndarray:
        return self.rotation.T @ (_as_vec3(x_world) - self.translation)


@dataclass(frozen=True)
class CameraView:
    """A posed pinhole camera: the unit of planning and rendering."""

    intrinsics: Intrinsics
    pose: Pose


@dataclass(frozen=True)
class Ray:
    """Half-line ``r(t) = origin + t * direction`` with unit direction."""

    origin: np.ndarray
    direction: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin))
        object.__setattr__(self, "direction", _as_vec3(self.direction))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if self.t < 0:
            raise ValueError("ray parameter t must be non-negative")

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class SphericalViewpoint:
    """A camera position on a scene-centric hemisphere, looking at the centre."""

    azimuth: float
    elevation: float
    radius: float
    centre: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "azimuth", float(self.azimuth) % (2.0 * math.pi))
        object.__setattr__(self, "elevation", float(self.elevation))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "centre", _as_vec3(self.centre))
        if not (0.0 <= self.elevation <= math.pi / 2 + 1e-12):
            raise ValueError("elevation must lie in [0, pi/2]")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def direction(self) -> np.ndarray:
        """Unit vector from the scene centre towards the camera position."""
        ce = math.cos(self.elevation)
        return np.array([ce * math.cos(self.azimuth),
                         ce * math.sin(self.azimuth),
                         math.sin(self.elevation)])

    @property
    def position(self) -> np.ndarray:
        return self.centre + self.radius * self.direction


@dataclass(frozen=True)
class PoseFeature:
    """Frequency-encoded point position plus unit view direction, both in a
    reference camera's frame."""

    encoded_position: np.ndarray
    view_direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "encoded_position",
                           np.asarray(self.encoded_position, dtype=np.float64))
        object.__setattr__(self, "view_direction", _as_vec3(self.view_direction))
        if abs(np.linalg.norm(self.view_direction) - 1.0) > 1e-6:
            raise ValueError("view direction must be unit length")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.encoded_position, self.view_direction])


def pose_from_spherical(v: SphericalViewpoint) -> Pose:
    """Camera pose at a hemisphere viewpoint, optical axis aimed at the centre.

    The image up direction follows world +z; at the exact zenith, where that
    is degenerate, world +x is used instead.
    """
    position = v.position
    forward = v.centre - position
    forward = forward / np.linalg.norm(forward)

    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(up, forward)) > 1.0 - 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    up = up - np.dot(up, forward) * forward
    up = up / np.linalg.norm(up)

    down = -up
    right = np.cross(down, forward)
    rotation = np.stack([right, down, forward], axis=1)
    return Pose(rotation, position)


def spherical_from_position(position, centre=(0.0, 0.0, 0.0)) -> SphericalViewpoint:
    """Recover hemisphere coordinates of a camera position above the centre."""
    offset = _as_vec3(position) - _as_vec3(centre)
    radius = float(np.linalg.norm(offset))
    if radius <= 0:
        raise ValueError("position coincides with the scene centre")
    z = min(max(offset[2] / radius, -1.0), 1.0)
    if z < -1e-9:
        raise ValueError("position lies below the hemisphere")
    elevation = math.asin(min(z, 1.0)) if z >= 0 else 0.0
    azimuth = math.atan2(offset[1], offset[0]) % (2.0 * math.pi)
    return SphericalViewpoint(azimuth, elevation, radius, centre)


def ray_through_pixel(intr: Intrinsics, pose: Pose, pixel) -> Ray:
    """World-frame ray through a (possibly fractional) pixel coordinate."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0.0 <= u <= intr.width and 0.0 <= v <= intr.height):
        raise ValueError(f"pixel ({u}, {v}) outside image bounds")
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d_world = pose.rotation @ d_cam
    d_world = d_world / np.linalg.norm(d_world)
    return Ray(pose.centre, d_world)


def transform_to_reference(ref_pose: Pose, x_world, d_world):
    """Express a point and unit direction in a reference camera's frame."""
    r_t = ref_pose.rotation.T
    x_n = r_t @ (_as_vec3(x_world) - ref_pose.translation)
    d_n = r_t @ _as_vec3(d_world)
    return x_n, d_n


def project_to_pixel(intr: Intrinsics, x_cam):
    """Pinhole projection of a camera-frame point.

    Returns ``((u, v), in_view)``. Points at or behind the camera plane
    (z <= 1e-6) are flagged out of view with NaN coordinates; points in
    front but projecting outside ``[0, width] x [0, height]`` keep their
    coordinates but are flagged out of view.
    """
    x = _as_vec3(x_cam)
    z = x[2]
    if z <= _MIN_PROJECTION_DEPTH:
        return np.array([np.nan, np.nan]), False
    u = intr.fx * x[0] / z + intr.cx
    v = intr.fy * x[1] / z + intr.cy
    in_view = bool(0.0 <= u <= intr.width and 0.0 <= v <= intr.height)
    return np.array([u, v]), in_view


def positional_encoding(x, n_freq: int) -> np.ndarray:
    """Fourier feature expansion of coordinates.

    Concatenates the raw input with ``sin(2^j pi x)`` and ``cos(2^j pi x)``
    for ``j = 0 .. n_freq - 1``, per coordinate; an input of dimension D
    yields ``D * (1 + 2 * n_freq)`` values. Works on any ``(..., D)`` array.
    """
    if n_freq < 0:
        raise ValueError("n_freq must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for j in range(n_freq):
        scaled = (2.0 ** j) * math.pi * x
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


def encoding_length(dim: int, n_freq: int) -> int:
    return dim * (1 + 2 * n_freq)


def make_pose_feature(ref_pose: Pose, x_world, d_world, n_freq: int) -> PoseFeature:
    """Pose feature of a sample point as seen from one reference camera."""
    x_n, d_n = transform_to_reference(ref_pose, x_world, d_world)
    return PoseFeature(positional_encoding(x_n, n_freq), d_n)


def _check_same_sphere(a: SphericalViewpoint, b: SphericalViewpoint):
    if not np.allclose(a.centre, b.centre, atol=1e-9):
        raise ValueError("viewpoints have different centres")
    if not math.isclose(a.radius, b.radius, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("viewpoints have different radii")


def angular_distance(a: SphericalViewpoint, b: SphericalViewpoint) -> float:
    """Angle in [0, pi] between two camera directions from the scene centre."""
    _check_same_sphere(a, b)
    da, db = a.direction, b.direction
    return float(math.atan2(np.linalg.norm(np.cross(da, db)), float(np.dot(da, db))))


def sample_view_within_cone(current: SphericalViewpoint, max_angle: float,
                            rng: np.random.Generator,
                            min_elevation: float = 0.0) -> SphericalViewpoint:
    """Uniform sample from the spherical cap of half-angle ``max_angle``
    around ``current``, intersected with the hemisphere (rejection sampling).

    ``min_elevation`` optionally tightens the hemisphere constraint so that
    mission views keep a margin above the horizon.
    """
    if not (0.0 < max_angle <= math.pi):
        raise ValueError("max_angle must lie in (0, pi]")
    axis = current.direction
    e1 = np.cross(axis, np.array([0.0, 0.0, 1.0]))
    if np.linalg.norm(e1) < 1e-9:
        e1 = np.cross(axis, np.array([1.0, 0.0, 0.0]))
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(axis, e1)

    z_floor = math.sin(min_elevation)
    for _ in range(100_000):
        cos_t = rng.uniform(math.cos(max_angle), 1.0)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        d = cos_t * axis + sin_t * (math.cos(phi) * e1 + math.sin(phi) * e2)
        if d[2] >= z_floor:
            elevation = math.asin(min(max(d[2], -1.0), 1.0))
            azimuth = math.atan2(d[1], d[0]) % (2.0 * math.pi)
            return SphericalViewpoint(azimuth, elevation, current.radius,
                                      current.centre)
    raise RuntimeError("cone sampling failed to hit the hemisphere")


def uniform_hemisphere_viewpoint(rng: np.random.Generator, radius: float,
                                 centre=(0.0, 0.0, 0.0),
                                 min_elevation: float = 0.0) -> SphericalViewpoint:
    """Uniform random viewpoint on the hemisphere cap above ``min_elevation``."""
    z = rng.uniform(math.sin(min_elevation), 1.0)
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    elevation = math.asin(min(z, 1.0))
    return SphericalViewpoint(azimuth, elevation, radius, _as_vec3(centre))


def fibonacci_hemisphere(n_views: int, radius: float, centre=(0.0, 0.0, 0.0),
                         min_elevation: float = math.radians(10.0)) -> list:
    """Near-uniform deterministic lattice of viewpoints on the hemisphere cap.

    Uses the golden-angle (Fibonacci) spiral restricted to elevations of at
    least ``min_elevation``.
    """
    if n_views < 1:
        raise ValueError("n_views must be positive")
    golden = math.pi * (3.0 - math.sqrt(5.0))
    z_min = math.sin(min_elevation)
    views = []
    for i in range(n_views):
        z = z_min + (i + 0.5) / n_views * (1.0 - z_min)
        azimuth = (i * golden) % (2.0 * math.pi)
        views.append(SphericalViewpoint(azimuth, math.asin(min(z, 1.0)), radius,
                                        _as_vec3(centre)))
    return views
