"""Camera tracking against the static part of the map.

Pose refinement minimizes a masked L1 photometric + depth loss by gradient
descent on SE(3) (right-multiplied updates) with a Barzilai-Borwein step
length and step-halving backtracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyValidSet
from .field import GaussianField
from .lie import Intrinsics, Pose, se3_exp
from .render import RenderConfig, RenderContext, RenderOutput, stack_adjoint

log = logging.getLogger(__name__)


@dataclass
class TrackingConfig:
    max_iterations: int = 100
    alpha_threshold: float = 0.95
    lambda_color: float = 0.9
    lambda_depth: float = 0.1
    # initial step length (twist norm) and its bounds
    initial_step: float = 2e-3
    max_step: float = 2e-2
    min_step: float = 1e-9
    rotation_weight: float = 1.0
    max_halvings: int = 8
    tolerance: float = 1e-7
    patience: int = 5
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if not 0.0 < self.alpha_threshold < 1.0:
            raise ValueError("alpha_threshold must lie in (0, 1)")
        if self.lambda_color < 0 or self.lambda_depth < 0 or self.max_iterations < 1:
            raise ValueError("invalid tracking configuration")


@dataclass
class LossResult:
    value: float
    adjoint: np.ndarray
    n_valid: int
    empty: bool = False


@dataclass
class TrackResult:
    pose: Pose
    loss: float
    iterations: int
    converged: bool
    empty: bool = False
    history: list = field(default_factory=list)


def valid_mask(alpha_map, mask_dynamic, alpha_threshold: float) -> np.ndarray:
    alpha_map = np.asarray(alpha_map, dtype=float)
    mask_dynamic = np.asarray(mask_dynamic, dtype=bool)
    if alpha_map.shape != mask_dynamic.shape:
        raise DimensionMismatch(f"alpha {alpha_map.shape} vs mask {mask_dynamic.shape}")
    return ~mask_dynamic & (alpha_map >= alpha_threshold)


def tracking_loss(out: RenderOutput, color, depth, mask_valid, lambda_color: float = 0.9,
                  lambda_depth: float = 0.1) -> LossResult:
    """Masked L1 over pixels with valid depth, normalized by the valid-depth count."""
    depth = np.asarray(depth, dtype=float)
    has_depth = depth > 0
    n_valid = int(has_depth.sum())
    use = np.asarray(mask_valid, bool) & has_depth
    if n_valid == 0 or not use.any():
        return LossResult(0.0, np.zeros(out.color.shape[:2] + (5,)), 0, empty=True)
    dc = out.color - color
    dd = out.depth - depth
    m = use / n_valid
    value = float(np.sum(m * (lambda_color * np.abs(dc).sum(axis=-1) + lambda_depth * np.abs(dd))))
    adjoint = stack_adjoint(
        color=lambda_color * np.sign(dc) * m[..., None],
        depth=lambda_depth * np.sign(dd) * m,
    )
    return LossResult(value, adjoint, int(use.sum()))


def orthonormalize(pose: Pose) -> Pose:
    U, _, Vt = np.linalg.svd(pose.rotation)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return Pose(R, pose.translation)


class _Objective:
    def __init__(self, fld, intr, t, color, depth, mask_dynamic, cfg: TrackingConfig):
        self.fld, self.intr, self.t = fld, intr, t
        self.color, self.depth = color, depth
        self.mask_dynamic = mask_dynamic
        self.cfg = cfg

    def evaluate(self, pose: Pose):
        ctx = RenderContext(self.fld, pose, self.intr, self.t, "static", self.cfg.render)
        out = ctx.output
        mv = valid_mask(out.alpha, self.mask_dynamic, self.cfg.alpha_threshold)
        res = tracking_loss(out, self.color, self.depth, mv, self.cfg.lambda_color, self.cfg.lambda_depth)
        return res, ctx

    @staticmethod
    def gradient(res: LossResult, ctx: RenderContext) -> np.ndarray:
        return ctx.backward(res.adjoint).camera


_TRANSLATION = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
_ROTATION = 1.0 - _TRANSLATION


def _line_search(obj: _Objective, pose: Pose, loss: float, direction, step: float, cfg: TrackingConfig):
    """Step-halving search along ``direction``; returns the first non-increasing candidate or None."""
    unit = direction / np.linalg.norm(direction)
    for _ in range(cfg.max_halvings + 1):
        delta = unit * step
        cand = orthonormalize(pose @ se3_exp(delta))
        cres, cctx = obj.evaluate(cand)
        if not cres.empty and cres.value <= loss:
            return delta, step, cand, cres, cctx
        step *= 0.5
    return None


def track_frame(fld: GaussianField, color, depth, t: float, pose_init: Pose, mask_dynamic,
                intr: Intrinsics, cfg: TrackingConfig | None = None) -> TrackResult:
    """Refine ``pose_init`` against the static Gaussians rendered at time ``t``."""
    cfg = cfg or TrackingConfig()
    obj = _Objective(fld, intr, t, color, depth, np.asarray(mask_dynamic, bool), cfg)
    res, ctx = obj.evaluate(pose_init)
    if res.empty:
        log.warning("tracking: empty valid set, keeping initial pose")
        return TrackResult(pose_init, 0.0, 0, False, empty=True)

    grad = obj.gradient(res, ctx)
    scale = np.array([1.0] * 3 + [cfg.rotation_weight] * 3)
    pose, loss = pose_init, res.value
    history = [loss]
    step = cfg.initial_step
    prev_x = prev_g = None
    x = np.zeros(6)  # accumulated right-perturbation, only used for step-length estimates
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        direction = -scale * grad
        norm = np.linalg.norm(direction)
        if norm == 0:
            converged = True
            break
        if prev_g is not None:
            s = x - prev_x
            y = scale * (grad - prev_g)
            sy = float(s @ y)
            if sy > 0:
                step = float(np.clip(s @ s / sy * norm, cfg.min_step, cfg.max_step))
        found = _line_search(obj, pose, loss, direction, step, cfg)
        if found is None:
            # a depth-order swap can wall off the steepest direction; try the
            # translation and rotation blocks on their own before giving up
            for block in (_TRANSLATION, _ROTATION):
                d = direction * block
                if np.any(d):
                    found = _line_search(obj, pose, loss, d, cfg.initial_step, cfg)
                if found is not None:
                    break
        if found is None:
            converged = True
            break
        delta, step, cand, cres, cctx = found
        prev_x, prev_g = x.copy(), grad
        x = x + delta
        pose, loss, grad = cand, cres.value, obj.gradient(cres, cctx)
        history.append(loss)
        if len(history) > cfg.patience and history[-1 - cfg.patience] - loss < cfg.tolerance:
            converged = True
            break
        if step < cfg.min_step:
            converged = True
            break
    return TrackResult(pose, loss, it, converged, history=history)
