"""Projection of 3D Gaussians to screen-space ellipses, and its adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..lie import Intrinsics, Pose


@dataclass
class Projected:
    """Screen-space Gaussians; arrays are indexed like the input batch."""

    xy: np.ndarray          # (N, 2) projected centers
    conic: np.ndarray       # (N, 3) inverse 2D covariance (a, b, c)
    depth: np.ndarray       # (N,) camera-frame z
    half_extent: np.ndarray  # (N, 2) bounding half-widths of the cutoff ellipse
    visible: np.ndarray     # (N,) bool
    cache: dict


def quat_rotmat_backward(q_unit: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a unit quaternion (w, x, y, z) of ``<G, R(q)>``."""
    w, x, y, z = np.moveaxis(q_unit, -1, 0)
    g = lambda i, j: G[..., i, j]  # noqa: E731
    gw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    gy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    gz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([gw, gx, gy, gz], axis=-1)


def _rotmats(q_unit: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(q_unit, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q_unit.shape[:-1] + (3, 3))


def project_gaussians(means, log_scales, quats, opacity, pose: Pose, intr: Intrinsics,
                      dilation: float = 0.3, extent: float = 3.0, near: float = 0.01,
                      min_opacity: float = 1.0 / 255.0) -> Projected:
    means = np.asarray(means, dtype=float).reshape(-1, 3)
    n = len(means)
    R, t = pose.rotation, pose.translation
    pc = means @ R.T + t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    front = z > near
    zs = np.where(front, z, 1.0)
    fx, fy = intr.fx, intr.fy

    xy = np.stack([fx * x / zs + intr.cx, fy * y / zs + intr.cy], axis=1)
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = fx / zs
    Jp[:, 0, 2] = -fx * x / zs**2
    Jp[:, 1, 1] = fy / zs
    Jp[:, 1, 2] = -fy * y / zs**2

    qraw = np.asarray(quats, dtype=float).reshape(-1, 4)
    qnorm = np.linalg.norm(qraw, axis=1, keepdims=True)
    qn = qraw / qnorm
    Rq = _rotmats(qn)
    s = np.exp(np.asarray(log_scales, dtype=float).reshape(-1, 3))
    M = Rq * s[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    cov_c = R @ cov @ R.T
    cov2 = Jp @ cov_c @ np.swapaxes(Jp, 1, 2)
    cov2[:, 0, 0] += dilation
    cov2[:, 1, 1] += dilation
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    good = front & (det > 0)
    det = np.where(good, det, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    half = extent * np.sqrt(np.maximum(np.stack([a, c], axis=1), 0.0))

    opacity = np.asarray(opacity, dtype=float)
    on_screen = (
        (xy[:, 0] + half[:, 0] >= -0.5) & (xy[:, 0] - half[:, 0] <= intr.width - 0.5)
        & (xy[:, 1] + half[:, 1] >= -0.5) & (xy[:, 1] - half[:, 1] <= intr.height - 0.5)
    )
    visible = good & (opacity >= min_opacity) & on_screen & np.all(np.isfinite(xy), axis=1)
    cache = dict(pc=pc, zs=zs, Jp=Jp, qn=qn, qnorm=qnorm, Rq=Rq, s=s, M=M, cov=cov,
                 cov_c=cov_c, conic=conic, R=R, means=means, fx=fx, fy=fy)
    return Projected(xy, conic, z.copy(), half, visible, cache)


def project_points_backward(pc, zs, fx, fy, g_xy):
    """Adjoint of the pinhole projection of camera-frame points."""
    x, y = pc[:, 0], pc[:, 1]
    g = np.zeros_like(pc)
    g[:, 0] = g_xy[:, 0] * fx / zs
    g[:, 1] = g_xy[:, 1] * fy / zs
    g[:, 2] = -(g_xy[:, 0] * fx * x + g_xy[:, 1] * fy * y) / zs**2
    return g


def projection_backward(proj: Projected, g_xy, g_conic, g_depth):
    """Chain screen-space gradients back to means, log-scales, raw quaternions and camera.

    The camera gradient is with respect to a right-perturbation ``T exp(dxi)``.
    """
    c = proj.cache
    pc, zs, Jp, conic = c["pc"], c["zs"], c["Jp"], c["conic"]
    R, fx, fy = c["R"], c["fx"], c["fy"]
    x, y = pc[:, 0], pc[:, 1]

    A, B, C = conic[:, 0], conic[:, 1], conic[:, 2]
    Q = np.empty((len(A), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = A, B, B, C
    GQ = np.empty_like(Q)
    GQ[:, 0, 0] = g_conic[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_conic[:, 1]
    GQ[:, 1, 1] = g_conic[:, 2]
    G2 = -Q @ GQ @ Q

    JpT = np.swapaxes(Jp, 1, 2)
    G_covc = JpT @ G2 @ Jp
    G_Jp = 2.0 * G2 @ Jp @ c["cov_c"]

    g_pc = project_points_backward(pc, zs, fx, fy, g_xy)
    g_pc[:, 2] += g_depth
    g_pc[:, 0] += -fx / zs**2 * G_Jp[:, 0, 2]
    g_pc[:, 1] += -fy / zs**2 * G_Jp[:, 1, 2]
    g_pc[:, 2] += (-fx / zs**2 * G_Jp[:, 0, 0] + 2 * fx * x / zs**3 * G_Jp[:, 0, 2]
                   - fy / zs**2 * G_Jp[:, 1, 1] + 2 * fy * y / zs**3 * G_Jp[:, 1, 2])

    G_cov = R.T @ G_covc @ R
    G_R = np.einsum("nij,jk,nkl->il", G_covc, R, c["cov"]) * 2.0

    M, s, Rq, qn, qnorm = c["M"], c["s"], c["Rq"], c["qn"], c["qnorm"]
    G_M = 2.0 * G_cov @ M
    g_log_scales = np.einsum("nji,nji->ni", Rq, G_M) * s
    G_Rq = G_M * s[:, None, :]
    g_qn = quat_rotmat_backward(qn, G_Rq)
    g_quats = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / qnorm

    g_world = g_pc @ R
    g_means = g_world
    means = c["means"]
    g_rho = g_world.sum(axis=0)
    g_theta = np.cross(means, g_world).sum(axis=0)
    H = R.T @ G_R
    g_theta = g_theta + np.array([H[2, 1] - H[1, 2], H[0, 2] - H[2, 0], H[1, 0] - H[0, 1]])
    return g_means, g_log_scales, g_quats, np.concatenate([g_rho, g_theta])
