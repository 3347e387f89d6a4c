"""Camera-induced motion decomposition.

Fits a 6-DoF camera twist to depth plus optical flow with IRLS, predicts the
rigid flow it induces, flags pixels whose flow disagrees (median/MAD
threshold on the residual) and turns the cleaned twist into a pose prior for
tracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InsufficientData, InvalidDepth, SingularSystem
from .lie import Intrinsics, Pose, compose_pose, pixel_grid, se3_exp

log = logging.getLogger(__name__)


@dataclass
class FlowField:
    """Per-pixel displacement ``(u, v)`` in pixels plus a validity grid."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.u.shape == self.v.shape == self.valid.shape):
            raise DimensionMismatch("flow components and validity differ in shape")

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        z = np.zeros((height, width))
        return cls(z, z.copy(), np.ones((height, width), bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def stacked(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


@dataclass
class RobustFitConfig:
    cauchy_scale: float = 1.5
    irls_iterations: int = 10
    mad_k: float = 3.0
    # residuals below this many pixels are never flagged (first-order model error, noise)
    min_residual: float = 0.25
    min_inliers: int = 50
    max_translation: float = 0.05
    max_rotation: float = 0.05
    clamp_inlier_gain: float = 1.5
    # "published" keeps the unit column-6 coefficients; "classical" scales them by fx/fy.
    jacobian_variant: str = "published"
    # "camera": T_t = exp(xi) T_{t-1}, consistent with the motion-field model.
    # "published": T_t = T_{t-1} exp(xi), the literal right-multiplied update.
    twist_direction: str = "camera"
    subsample_above: int = 2**18
    max_condition: float = 1e12

    def __post_init__(self):
        if self.cauchy_scale <= 0 or self.irls_iterations < 1 or self.mad_k <= 0 or self.min_residual < 0:
            raise ValueError("invalid robust-fit configuration")
        if self.jacobian_variant not in ("published", "classical"):
            raise ValueError(f"unknown jacobian_variant {self.jacobian_variant!r}")
        if self.twist_direction not in ("camera", "published"):
            raise ValueError(f"unknown twist_direction {self.twist_direction!r}")


@dataclass
class DecompositionResult:
    twist_refined: np.ndarray
    pose_init: Pose
    mask_ca: np.ndarray
    mask_dynamic: np.ndarray
    residuals: np.ndarray
    inlier_ratio: float
    clamped: bool
    degraded: bool = False


def jacobian_stack(u_c, v_c, Z, intr: Intrinsics, variant: str = "published") -> np.ndarray:
    """Image Jacobians for arrays of centered pixel coords, shape (..., 2, 6)."""
    u_c = np.asarray(u_c, dtype=float)
    v_c = np.asarray(v_c, dtype=float)
    Z = np.asarray(Z, dtype=float)
    fx, fy = intr.fx, intr.fy
    inv_z = 1.0 / Z
    zero = np.zeros(np.broadcast(u_c, v_c, Z).shape)
    c6_u, c6_v = (fx / fy, fy / fx) if variant == "classical" else (1.0, 1.0)
    row1 = [
        -fx * inv_z + zero, zero, u_c * inv_z + zero,
        u_c * v_c / fy + zero, -fx - u_c**2 / fx + zero, c6_u * v_c + zero,
    ]
    row2 = [
        zero, -fy * inv_z + zero, v_c * inv_z + zero,
        fy + v_c**2 / fy + zero, -u_c * v_c / fx + zero, -c6_v * u_c + zero,
    ]
    return np.stack([np.stack(row1, -1), np.stack(row2, -1)], axis=-2)


def image_jacobian(u_centered: float, v_centered: float, Z: float, intr: Intrinsics,
                   variant: str = "published") -> np.ndarray:
    if not Z > 0:
        raise InvalidDepth(f"depth {Z!r} is not positive")
    return jacobian_stack(u_centered, v_centered, Z, intr, variant)


def _centered_grid(intr: Intrinsics, shape):
    u, v = pixel_grid(*shape)
    return u - intr.cx, v - intr.cy


def predict_rigid_flow(xi, depth: np.ndarray, intr: Intrinsics, variant: str = "published") -> FlowField:
    xi = np.asarray(xi, dtype=float).reshape(6)
    depth = np.asarray(depth, dtype=float)
    valid = depth > 0
    uc, vc = _centered_grid(intr, depth.shape)
    Z = np.where(valid, depth, 1.0)
    J = jacobian_stack(uc, vc, Z, intr, variant)
    flow = J @ xi
    flow[~valid] = 0.0
    return FlowField(flow[..., 0], flow[..., 1], valid)


def _usable(flow: FlowField, depth: np.ndarray, exclude) -> np.ndarray:
    depth = np.asarray(depth, dtype=float)
    if flow.shape != depth.shape:
        raise DimensionMismatch(f"flow {flow.shape} vs depth {depth.shape}")
    finite = np.isfinite(flow.u) & np.isfinite(flow.v)
    usable = flow.valid & finite & (depth > 0)
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=bool)
        if exclude.shape != depth.shape:
            raise DimensionMismatch("exclusion mask shape differs from depth")
        usable &= ~exclude
    return usable


def fit_twist_irls(flow: FlowField, depth: np.ndarray, exclude, intr: Intrinsics,
                   cfg: RobustFitConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Robust least-squares twist fit with Cauchy reweighting.

    Returns the twist and an (H, W) grid of the final Cauchy weights (zero on
    pixels that did not take part in the fit).
    """
    cfg = cfg or RobustFitConfig()
    depth = np.asarray(depth, dtype=float)
    usable = _usable(flow, depth, exclude)
    H, W = depth.shape
    if H * W > cfg.subsample_above:
        stride = np.zeros_like(usable)
        stride[::2, ::2] = True
        usable &= stride
    rows, cols = np.nonzero(usable)
    if rows.size < cfg.min_inliers:
        raise InsufficientData(f"{rows.size} usable pixels < {cfg.min_inliers}")

    J = jacobian_stack(cols - intr.cx, rows - intr.cy, depth[rows, cols], intr, cfg.jacobian_variant)
    F = np.stack([flow.u[rows, cols], flow.v[rows, cols]], axis=-1)
    A = J.reshape(-1, 6)
    b = F.reshape(-1)

    w = np.ones(rows.size)
    xi = np.zeros(6)
    for _ in range(cfg.irls_iterations):
        sw = np.repeat(np.sqrt(w), 2)
        Aw = A * sw[:, None]
        normal = Aw.T @ Aw
        if not np.all(np.isfinite(normal)) or np.linalg.cond(normal) > cfg.max_condition:
            raise SingularSystem("normal matrix is ill-conditioned")
        xi = np.linalg.lstsq(Aw, b * sw, rcond=None)[0]
        r = np.linalg.norm(F - J @ xi, axis=-1)
        w = 1.0 / (1.0 + (r / cfg.cauchy_scale) ** 2)

    weights = np.zeros((H, W))
    weights[rows, cols] = w
    return xi, weights


def residual_map(flow: FlowField, rigid: FlowField) -> np.ndarray:
    """Per-pixel flow disagreement; NaN where either field is invalid."""
    if flow.shape != rigid.shape:
        raise DimensionMismatch(f"{flow.shape} vs {rigid.shape}")
    r = np.hypot(flow.u - rigid.u, flow.v - rigid.v)
    return np.where(flow.valid & rigid.valid, r, np.nan)


def mad_mask(residuals: np.ndarray, k: float, exclude=None, floor: float = 0.0) -> np.ndarray:
    """Flag residuals above ``max(median + k * MAD, floor)`` of the valid (non-excluded) ones."""
    residuals = np.asarray(residuals, dtype=float)
    stats = np.isfinite(residuals)
    if exclude is not None:
        stats &= ~np.asarray(exclude, dtype=bool)
    values = residuals[stats]
    if values.size == 0:
        raise EmptyInput("no valid residuals")
    med = np.median(values)
    mad = np.median(np.abs(values - med))
    with np.errstate(invalid="ignore"):
        return np.nan_to_num(residuals, nan=-np.inf) > max(med + k * mad, floor)


def _clamp(xi: np.ndarray, inlier_ratio: float, cfg: RobustFitConfig) -> tuple[np.ndarray, bool]:
    gain = min(1.0, cfg.clamp_inlier_gain * inlier_ratio)
    bound_t = cfg.max_translation * gain
    bound_r = cfg.max_rotation * gain
    nt = np.linalg.norm(xi[:3])
    nr = np.linalg.norm(xi[3:])
    scale = 1.0
    if nt > bound_t:
        scale = min(scale, bound_t / nt)
    if nr > bound_r:
        scale = min(scale, bound_r / nr)
    return xi * scale, scale < 1.0


def apply_twist(prev: Pose, xi, direction: str = "camera") -> Pose:
    """Pose prior from the previous pose and a fitted camera twist."""
    if direction == "published":
        return compose_pose(prev, xi)
    return se3_exp(xi) @ prev


def decompose(flow: FlowField, depth: np.ndarray, prev_pose: Pose, intr: Intrinsics,
              cfg: RobustFitConfig | None = None, semantic_mask=None) -> DecompositionResult:
    """Full decomposition: first fit, residual mask, refit, clamp, pose prior."""
    cfg = cfg or RobustFitConfig()
    depth = np.asarray(depth, dtype=float)
    shape = depth.shape
    m_s = np.zeros(shape, bool) if semantic_mask is None else np.asarray(semantic_mask, bool)
    if m_s.shape != shape:
        raise DimensionMismatch("semantic mask shape differs from depth")

    try:
        xi0, _ = fit_twist_irls(flow, depth, m_s, intr, cfg)
        rigid = predict_rigid_flow(xi0, depth, intr, cfg.jacobian_variant)
        residuals = residual_map(flow, rigid)
        try:
            m_ca = mad_mask(residuals, cfg.mad_k, exclude=m_s, floor=cfg.min_residual)
        except EmptyInput:
            m_ca = np.zeros(shape, bool)
        m_dy = m_s | m_ca
        xi, weights = fit_twist_irls(flow, depth, m_dy, intr, cfg)
    except (InsufficientData, SingularSystem) as exc:
        log.warning("motion decomposition degraded: %s", exc)
        return DecompositionResult(
            twist_refined=np.zeros(6),
            pose_init=prev_pose,
            mask_ca=np.zeros(shape, bool),
            mask_dynamic=m_s.copy(),
            residuals=np.full(shape, np.nan),
            inlier_ratio=0.0,
            clamped=True,
            degraded=True,
        )

    used = weights > 0
    inlier_ratio = float(np.mean(weights[used] > 0.5)) if used.any() else 0.0
    xi, clamped = _clamp(xi, inlier_ratio, cfg)
    return DecompositionResult(
        twist_refined=xi,
        pose_init=apply_twist(prev_pose, xi, cfg.twist_direction),
        mask_ca=m_ca,
        mask_dynamic=m_dy,
        residuals=residuals,
        inlier_ratio=inlier_ratio,
        clamped=clamped,
    )
