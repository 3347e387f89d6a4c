"""SO(3)/SE(3) primitives and the pinhole camera model.

Twists are plain 6-vectors ``[rho, theta]`` (translation first). Poses are
world-to-camera transforms: ``x_cam = R @ x_world + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, ConfigError, InvalidDepth

SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _half_angle_coeff(angle: float) -> float:
    # (1 - cos a) / a^2 without cancellation
    h = np.sin(0.5 * angle) / angle
    return 2.0 * h * h


def so3_exp(theta) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (Rodrigues)."""
    theta = np.asarray(theta, dtype=float)
    K = hat(theta)
    angle = float(np.linalg.norm(theta))
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(angle) / angle
    return np.eye(3) + a * K + _half_angle_coeff(angle) * (K @ K)


def so3_left_jacobian(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    K = hat(theta)
    angle = float(np.linalg.norm(theta))
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    if angle < 1e-2:
        a2 = angle * angle
        c = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0
    else:
        c = (angle - np.sin(angle)) / angle**3
    return np.eye(3) + _half_angle_coeff(angle) * K + c * (K @ K)


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform ``T_cw = [R | t]``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform world points (..., 3) into the camera frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
        )


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, theta = xi[:3], xi[3:]
    return Pose(so3_exp(theta), so3_left_jacobian(theta) @ rho)


def compose_pose(prev: Pose, delta_xi) -> Pose:
    """Right-multiplied update ``prev @ exp(delta_xi)``."""
    return prev @ se3_exp(delta_xi)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


def project(intr: Intrinsics, pose: Pose, point_world) -> tuple[np.ndarray, float]:
    """Pinhole projection; returns the pixel and the camera-frame depth."""
    pc = pose.apply(point_world)
    z = float(pc[2])
    if z <= 1e-9:
        raise BehindCamera(f"camera-frame depth {z:.3g} is not positive")
    u = intr.fx * pc[0] / z + intr.cx
    v = intr.fy * pc[1] / z + intr.cy
    return np.array([u, v]), z


def unproject(intr: Intrinsics, pose: Pose, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepth(f"depth {depth!r} is not positive")
    u, v = pixel
    ray = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    return pose.rotation.T @ (depth * ray - pose.translation)


def project_points(intr: Intrinsics, pose: Pose, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of (N, 3) world points; no depth check."""
    pc = pose.apply(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[..., 0] / z + intr.cx
        v = intr.fy * pc[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def unproject_pixels(intr: Intrinsics, pose: Pose, pixels, depth) -> np.ndarray:
    """Vectorised inverse of :func:`project_points`."""
    pixels = np.asarray(pixels, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (pixels[..., 0] - intr.cx) / intr.fx * depth
    y = (pixels[..., 1] - intr.cy) / intr.fy * depth
    pc = np.stack([x, y, depth], axis=-1)
    return (pc - pose.translation) @ pose.rotation


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates; pixel (row i, col j) sits at (u=j, v=i)."""
    v, u = np.mgrid[0:height, 0:width].astype(float)
    return u, v


# Quaternions are stored (w, x, y, z).


def quat_to_rotmat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q
