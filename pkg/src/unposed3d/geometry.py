"""Orbit camera parameterization, pose sampling and ray generation.

World convention: right-handed, +z up, object centered at the origin inside
the unit sphere. All cameras look at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

TWO_PI = 2.0 * math.pi

# Default orbit radius and near/far margin around the unit object.
DEFAULT_RADIUS = 2.0
NEAR_FAR_MARGIN = 1.2


@dataclass(frozen=True)
class OrbitPose:
    """Camera pose on a sphere around the origin.

    ``polar`` is the elevation offset from the equatorial plane, in
    [-pi/2, pi/2]. ``azimuth`` is normalized to [0, 2*pi).
    """

    radius: float
    azimuth: float
    polar: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if abs(self.polar) > math.pi / 2 + 1e-12:
            raise ValueError(f"|polar| must be <= pi/2, got {self.polar}")
        az = self.azimuth % TWO_PI
        if az >= TWO_PI:  # tiny negative inputs can round the modulo up to 2*pi
            az = 0.0
        object.__setattr__(self, "azimuth", az)

    @property
    def position(self) -> np.ndarray:
        cd = math.cos(self.polar)
        return self.radius * np.array(
            [cd * math.cos(self.azimuth), cd * math.sin(self.azimuth), math.sin(self.polar)]
        )

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "azimuth_rad": self.azimuth,
            "polar_rad": self.polar,
        }

    @staticmethod
    def from_dict(d: dict) -> "OrbitPose":
        return OrbitPose(radius=d["radius"], azimuth=d["azimuth_rad"], polar=d["polar_rad"])


@dataclass
class CameraFrame:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics."""

    rotation: np.ndarray  # (3, 3) world->camera
    translation: np.ndarray  # (3,)
    focal: float  # pixels
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be > 0")
        residual = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if residual >= 1e-6:
            raise ValueError(f"extrinsic rotation not orthonormal (residual {residual:.2e})")

    @property
    def position(self) -> np.ndarray:
        # R x + t = 0 at the camera center
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        # camera looks along its +z axis
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])


@dataclass
class RayBundle:
    origins: torch.Tensor  # (n, 3)
    directions: torch.Tensor  # (n, 3), unit length
    near: float
    far: float

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")


def sample_orbit_poses(
    k: int, r: float, theta: float, rng: np.random.Generator
) -> list[OrbitPose]:
    """Sample k orbit poses: uniformly spaced azimuths, random elevations.

    Azimuths are deterministic given k (phi_i = 2*pi*i/k for i = 1..k); only
    the polar offsets are random, drawn iid from Uniform(-theta, theta).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if r <= 0:
        raise ValueError(f"r must be > 0, got {r}")
    if not 0 <= theta <= math.pi / 2:
        raise ValueError(f"theta must be in [0, pi/2], got {theta}")
    deltas = rng.uniform(-theta, theta, size=k) if theta > 0 else np.zeros(k)
    return [
        OrbitPose(radius=r, azimuth=TWO_PI * (i + 1) / k, polar=float(deltas[i]))
        for i in range(k)
    ]


def pose_to_camera(
    pose: OrbitPose, focal: float, resolution: int
) -> CameraFrame:
    """Build a look-at camera for an orbit pose.

    Up vector is world +z projected orthogonal to the view axis; at the poles
    (|polar| = pi/2) that projection degenerates and world +x is used instead.
    """
    if focal <= 0:
        raise ValueError("focal must be > 0")
    eye = pose.position
    forward = -eye / np.linalg.norm(eye)  # toward the origin
    up_hint = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up_hint)
    if np.linalg.norm(right) < 1e-8:
        up_hint = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up_hint)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)  # +y in image coordinates points down

    # rows of R are the camera axes expressed in world coordinates
    rotation = np.stack([right, down, forward])
    translation = -rotation @ eye
    return CameraFrame(
        rotation=rotation,
        translation=translation,
        focal=focal,
        cx=resolution / 2.0,
        cy=resolution / 2.0,
        width=resolution,
        height=resolution,
    )


def default_focal(resolution: int, radius: float = DEFAULT_RADIUS) -> float:
    """Focal length that frames the unit sphere with a small margin."""
    # half-angle subtended by a sphere of radius 1.1 seen from distance `radius`
    half_angle = math.asin(min(1.1 / radius, 0.999))
    return resolution / (2.0 * math.tan(half_angle))


def generate_rays(
    camera: CameraFrame,
    near: float | None = None,
    far: float | None = None,
    dtype: torch.dtype = torch.float32,
) -> RayBundle:
    """One ray per pixel through the pixel center, in world coordinates."""
    r = np.linalg.norm(camera.position)
    if near is None:
        near = r - NEAR_FAR_MARGIN
    if far is None:
        far = r + NEAR_FAR_MARGIN

    j, i = np.meshgrid(
        np.arange(camera.height, dtype=np.float64),
        np.arange(camera.width, dtype=np.float64),
        indexing="ij",
    )
    x = (i + 0.5 - camera.cx) / camera.focal
    y = (j + 0.5 - camera.cy) / camera.focal
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs_world = dirs_cam @ camera.rotation  # R^T applied row-wise
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs_world.shape).copy()
    return RayBundle(
        origins=torch.from_numpy(origins).to(dtype),
        directions=torch.from_numpy(dirs_world).to(dtype),
        near=float(near),
        far=float(far),
    )
