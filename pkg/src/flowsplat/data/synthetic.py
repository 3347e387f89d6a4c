"""Analytic RGB-D sequence generator used as ground truth.

The scene is a set of textured planes plus moving spheres/boxes, rendered by
exact ray casting. Flow between any two frames is computed by moving each
visible surface point to the other time, projecting it, and checking by a
second ray cast that it is not occluded there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateScene
from ..lie import Intrinsics, Pose, pixel_grid, se3_exp
from ..motion import FlowField, jacobian_stack
from .dataset import Dataset, FrameBundle

BACKGROUND = -1
SKY = -2


@dataclass
class ObjectSpec:
    shape: str = "sphere"  # "sphere" or "box"
    size: tuple = (0.15,)  # radius, or box half-extents
    waypoints: list = field(default_factory=lambda: [(-0.45, 0.0, 0.95), (0.15, 0.0, 0.95)])
    entry_frame: int = 0
    exit_frame: int | None = None
    base_color: tuple = (0.85, 0.4, 0.3)
    stripe_period: float = 0.1

    def center(self, frame: float, n_frames: int) -> np.ndarray:
        """Piecewise-linear path through the waypoints over the whole sequence."""
        pts = np.asarray(self.waypoints, dtype=float)
        if len(pts) == 1 or n_frames <= 1:
            return pts[0].copy()
        s = np.clip(frame / (n_frames - 1), 0.0, 1.0) * (len(pts) - 1)
        k = min(int(np.floor(s)), len(pts) - 2)
        lam = s - k
        return (1 - lam) * pts[k] + lam * pts[k + 1]

    def present(self, frame: int) -> bool:
        return frame >= self.entry_frame and (self.exit_frame is None or frame <= self.exit_frame)


@dataclass
class SyntheticSceneConfig:
    width: int = 64
    height: int = 64
    fx: float = 60.0
    fy: float = 60.0
    cx: float = 31.5
    cy: float = 31.5
    n_frames: int = 50
    fps: float = 30.0
    trajectory: str = "sinusoid"  # static | dolly | orbit | sinusoid
    amplitude: float = 0.02  # metres (per-frame step for dolly/orbit)
    rotation_amplitude: float = 0.01  # radians
    period_frames: float = 40.0
    orbit_radius: float = 1.2
    wall_depth: float = 1.6
    floor_height: float | None = 0.42
    checker_period: float = 0.25
    objects: list = field(default_factory=list)
    flow_noise: float = 0.0  # pixels
    depth_noise: float = 0.0  # metres
    flow_model: str = "projective"  # or "motion_field" for adjacent pairs
    semantic_masks: bool = False
    seed: int = 0

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


def default_dynamic_config(**overrides) -> SyntheticSceneConfig:
    """The desk-scale benchmark: textured room corner plus one moving sphere."""
    cfg = SyntheticSceneConfig(objects=[ObjectSpec()])
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def step_twists(cfg: SyntheticSceneConfig) -> np.ndarray:
    """Per-frame camera twists ``xi_t`` with ``T_t = exp(xi_t) T_{t-1}`` (row 0 unused)."""
    n = cfg.n_frames
    xis = np.zeros((n, 6))
    t = np.arange(n, dtype=float)
    if cfg.trajectory == "static":
        return xis
    if cfg.trajectory == "dolly":
        xis[1:, 2] = -cfg.amplitude
    elif cfg.trajectory == "orbit":
        s = cfg.amplitude
        xis[1:, 0] = -s
        xis[1:, 4] = s / cfg.orbit_radius
    elif cfg.trajectory == "sinusoid":
        w = 2.0 * np.pi / cfg.period_frames
        a, r = cfg.amplitude * w, cfg.rotation_amplitude * w
        xis[:, 0] = -a * np.cos(w * t)
        xis[:, 1] = -0.5 * a * np.cos(2 * w * t + 0.3)
        xis[:, 2] = -0.3 * a * np.sin(w * t + 0.7)
        xis[:, 3] = 0.5 * r * np.sin(w * t + 1.1)
        xis[:, 4] = r * np.cos(w * t + 0.4)
        xis[:, 5] = 0.3 * r * np.sin(2 * w * t)
        xis[0] = 0.0
    else:
        raise ValueError(f"unknown trajectory {cfg.trajectory!r}")
    return xis


def trajectory_poses(cfg: SyntheticSceneConfig) -> list[Pose]:
    poses = [Pose.identity()]
    for xi in step_twists(cfg)[1:]:
        poses.append(se3_exp(xi) @ poses[-1])
    return poses


def _wall_color(a, b, period):
    c = np.sin(2 * np.pi * a / period) * np.sin(2 * np.pi * b / period)
    col = np.stack([0.55 + 0.22 * c + 0.08 * a, 0.5 + 0.18 * c - 0.06 * b, 0.42 + 0.12 * c + 0.05 * a], -1)
    return col


def _floor_color(a, b, period):
    c = np.sin(2 * np.pi * a / (0.8 * period)) * np.sin(2 * np.pi * b / (0.8 * period))
    return np.stack([0.35 + 0.15 * c, 0.42 + 0.17 * c + 0.05 * a, 0.52 + 0.2 * c - 0.04 * b], -1)


def _object_color(obj: ObjectSpec, local):
    s = np.sin(2 * np.pi * local[..., 1] / obj.stripe_period) * np.cos(2 * np.pi * local[..., 0] / (1.5 * obj.stripe_period))
    base = np.asarray(obj.base_color)
    return base + np.stack([0.1 * s, 0.15 * s, -0.08 * s], -1)


class SceneRenderer:
    """Ray caster for one synthetic scene configuration."""

    def __init__(self, cfg: SyntheticSceneConfig):
        self.cfg = cfg
        self.intr = cfg.intrinsics
        self.poses = trajectory_poses(cfg)
        self.twists = step_twists(cfg)

    def object_center(self, k: int, frame: int) -> np.ndarray:
        return self.cfg.objects[k].center(frame, self.cfg.n_frames)

    def cast(self, pose: Pose, frame: int, pixels_u, pixels_v):
        """Ray cast through pixel coordinates; returns depth, hit id, world point, colour."""
        intr = self.intr
        d_cam = np.stack([(pixels_u - intr.cx) / intr.fx, (pixels_v - intr.cy) / intr.fy,
                          np.ones_like(pixels_u, dtype=float)], -1)
        origin = pose.center
        d = d_cam @ pose.rotation  # R^T d_cam, row-vector form
        shape = d.shape[:-1]
        best = np.full(shape, np.inf)
        hit = np.full(shape, SKY, dtype=int)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.cfg.wall_depth - origin[2]) / d[..., 2]
            ok = (s > 1e-9) & (s < best)
            best = np.where(ok, s, best)
            hit = np.where(ok, BACKGROUND, hit)
            if self.cfg.floor_height is not None:
                s = (self.cfg.floor_height - origin[1]) / d[..., 1]
                ok = (s > 1e-9) & (s < best)
                best = np.where(ok, s, best)
                hit = np.where(ok, BACKGROUND - 10, hit)
            for k, obj in enumerate(self.cfg.objects):
                if not obj.present(frame):
                    continue
                s = self._intersect(obj, self.object_center(k, frame), origin, d)
                ok = (s > 1e-9) & (s < best)
                best = np.where(ok, s, best)
                hit = np.where(ok, k, hit)
        point = origin + best[..., None] * d
        color = np.zeros(shape + (3,))
        wall = hit == BACKGROUND
        color[wall] = _wall_color(point[wall][:, 0], point[wall][:, 1], self.cfg.checker_period)
        floor = hit == BACKGROUND - 10
        color[floor] = _floor_color(point[floor][:, 0], point[floor][:, 2], self.cfg.checker_period)
        for k, obj in enumerate(self.cfg.objects):
            sel = hit == k
            if sel.any():
                color[sel] = _object_color(obj, point[sel] - self.object_center(k, frame))
        hit = np.where(hit == BACKGROUND - 10, BACKGROUND, hit)
        depth = np.where(np.isfinite(best), best, 0.0)  # ray z-component is 1
        return depth, hit, point, np.clip(color, 0.0, 1.0)

    @staticmethod
    def _intersect(obj: ObjectSpec, center, origin, d):
        oc = origin - center
        if obj.shape == "sphere":
            r = obj.size[0]
            a = np.sum(d * d, -1)
            b = 2.0 * (d @ oc)
            c = oc @ oc - r * r
            disc = b * b - 4 * a * c
            s = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
            return np.where(disc >= 0, s, np.inf)
        if obj.shape == "box":
            half = np.asarray(obj.size, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-half - oc) / d
                t2 = (half - oc) / d
            tmin = np.nanmax(np.minimum(t1, t2), -1)
            tmax = np.nanmin(np.maximum(t1, t2), -1)
            return np.where((tmax >= tmin) & (tmax > 0), tmin, np.inf)
        raise ValueError(f"unknown object shape {obj.shape!r}")

    def render_frame(self, frame: int):
        u, v = pixel_grid(self.cfg.height, self.cfg.width)
        return self.cast(self.poses[frame], frame, u, v)

    def flow(self, i: int, j: int, model: str | None = None) -> FlowField:
        """Exact flow from frame ``i`` to frame ``j`` on the pixels of ``i``."""
        model = model or self.cfg.flow_model
        u, v = pixel_grid(self.cfg.height, self.cfg.width)
        depth_i, hit_i, point_i, _ = self.render_frame(i)
        moved = point_i.copy()
        valid = hit_i != SKY
        for k, obj in enumerate(self.cfg.objects):
            sel = hit_i == k
            if not sel.any():
                continue
            if not obj.present(j):
                valid &= ~sel
                continue
            moved[sel] += self.object_center(k, j) - self.object_center(k, i)
        pose_j = self.poses[j]
        pc = pose_j.apply(moved)
        z = pc[..., 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        uj = self.intr.fx * pc[..., 0] / zs + self.intr.cx
        vj = self.intr.fy * pc[..., 1] / zs + self.intr.cy
        valid &= front
        # z-buffer: the moved point must be the first surface along its ray in frame j
        d_j, _, _, _ = self.cast(pose_j, j, uj, vj)
        valid &= d_j >= z * (1.0 - 1e-7) - 1e-9
        fu, fv = uj - u, vj - v

        if model == "motion_field" and j == i - 1:
            xi = self.twists[i]
            J = jacobian_stack(u - self.intr.cx, v - self.intr.cy, np.where(depth_i > 0, depth_i, 1.0), self.intr)
            rigid = J @ xi
            own_u = np.zeros_like(fu)
            own_v = np.zeros_like(fv)
            pose_i = self.poses[i]
            pci = pose_i.apply(moved)
            zi = np.where(pci[..., 2] > 1e-9, pci[..., 2], 1.0)
            for k in range(len(self.cfg.objects)):
                sel = hit_i == k
                own_u[sel] = (self.intr.fx * pci[..., 0] / zi + self.intr.cx - u)[sel]
                own_v[sel] = (self.intr.fy * pci[..., 1] / zi + self.intr.cy - v)[sel]
            fu = rigid[..., 0] + own_u
            fv = rigid[..., 1] + own_v

        if self.cfg.flow_noise > 0:
            rng = np.random.default_rng([self.cfg.seed, 1, i, j])
            fu = fu + rng.normal(0, self.cfg.flow_noise, fu.shape)
            fv = fv + rng.normal(0, self.cfg.flow_noise, fv.shape)
        fu = np.where(valid, fu, 0.0)
        fv = np.where(valid, fv, 0.0)
        return FlowField(fu, fv, valid)


def generate_synthetic(cfg: SyntheticSceneConfig) -> Dataset:
    scene = SceneRenderer(cfg)
    frames, masks = [], []
    total = cfg.width * cfg.height
    for t in range(cfg.n_frames):
        depth, hit, _, color = scene.render_frame(t)
        obj_mask = hit >= 0
        if obj_mask.sum() == total:
            raise DegenerateScene(f"object covers the whole of frame {t}")
        if cfg.depth_noise > 0:
            rng = np.random.default_rng([cfg.seed, 2, t])
            noisy = depth + rng.normal(0, cfg.depth_noise, depth.shape)
            depth = np.where(depth > 0, np.maximum(noisy, 1e-3), 0.0)
        frames.append(FrameBundle(
            index=t,
            timestamp=t / cfg.fps,
            color=color,
            depth=depth,
            semantic_mask=obj_mask.copy() if cfg.semantic_masks else None,
        ))
        masks.append(obj_mask)
    for t in range(1, cfg.n_frames):
        frames[t].flow_to_prev = scene.flow(t, t - 1)
        frames[t].flow_from_prev = scene.flow(t - 1, t)
    return Dataset(
        frames=frames,
        intrinsics=cfg.intrinsics,
        gt_poses=list(scene.poses),
        gt_object_masks=masks,
        depth_scale=1.0,
        name="synthetic",
        flow_source=scene.flow,
    )
