"""Differentiable Gaussian splatting: color/depth/alpha maps, flow maps, and adjoints."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from ..field import GaussianField, sigmoid
from ..lie import Intrinsics, Pose
from ..motion import FlowField
from .backend import DEFAULT_BACKEND, get_backend
from .projection import project_gaussians, project_points_backward, projection_backward
from .raster_numpy import bin_tiles

SUBSETS = ("static", "dynamic", "both")


@dataclass
class RenderConfig:
    dilation: float = 0.3
    footprint_extent: float = 3.0
    near: float = 0.01
    min_opacity: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    tile: int = 16
    normalized_depth: bool = False
    backend: str | None = None


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    contrib_count: np.ndarray


@dataclass
class RenderGradients:
    """Gradients keyed like ``GaussianField.static`` / ``.dynamic``, plus the camera twist."""

    static: dict
    dynamic: dict
    camera: np.ndarray = dc_field(default_factory=lambda: np.zeros(6))

    def add(self, other: "RenderGradients") -> "RenderGradients":
        for mine, theirs in ((self.static, other.static), (self.dynamic, other.dynamic)):
            for k, v in theirs.items():
                mine[k] = mine[k] + v if k in mine else v.copy()
        self.camera = self.camera + other.camera
        return self


def zero_gradients(fld: GaussianField) -> RenderGradients:
    return RenderGradients(
        {k: np.zeros_like(v) for k, v in fld.static.items()},
        {k: np.zeros_like(v) for k, v in fld.dynamic.items()},
    )


@dataclass
class _Batch:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    n_static: int
    use_static: bool
    use_dynamic: bool
    state: object = None


def _gather(fld: GaussianField, t: float, subset: str) -> _Batch:
    if subset not in SUBSETS:
        raise ValueError(f"subset must be one of {SUBSETS}")
    use_s = subset in ("static", "both")
    use_d = subset in ("dynamic", "both") and fld.n_dynamic > 0
    parts = {k: [] for k in ("means", "log_scales", "quats", "opacity", "colors")}
    ns = 0
    if use_s:
        s = fld.static
        ns = fld.n_static
        parts["means"].append(s["means"])
        parts["log_scales"].append(s["log_scales"])
        parts["quats"].append(s["quats"])
        parts["opacity"].append(sigmoid(s["opacity_logits"]))
        parts["colors"].append(s["colors"])
    state = None
    if use_d:
        state = fld.dynamic_state(t)
        d = fld.dynamic
        parts["means"].append(state.positions)
        parts["log_scales"].append(d["log_scales"])
        parts["quats"].append(state.quats)
        parts["opacity"].append(state.opacity)
        parts["colors"].append(d["colors"])
    shapes = {"means": (0, 3), "log_scales": (0, 3), "quats": (0, 4), "opacity": (0,), "colors": (0, 3)}
    arrays = {k: np.concatenate(v) if v else np.zeros(shapes[k]) for k, v in parts.items()}
    return _Batch(**arrays, n_static=ns, use_static=use_s, use_dynamic=use_d, state=state)


class RenderContext:
    """One rasterization pass, kept around so the adjoint can be applied later."""

    def __init__(self, fld: GaussianField, pose: Pose, intr: Intrinsics, t: float,
                 subset: str = "both", cfg: RenderConfig | None = None, extra_features=None):
        # extra_features(projected, batch) -> (N, C) replaces [color, depth, 1]
        self.cfg = cfg = cfg or RenderConfig()
        self.field, self.pose, self.intr, self.t = fld, pose, intr, t
        self.kernel = get_backend(cfg.backend)
        self.batch = b = _gather(fld, t, subset)
        self.proj = p = project_gaussians(
            b.means, b.log_scales, b.quats, b.opacity, pose, intr,
            cfg.dilation, cfg.footprint_extent, cfg.near, cfg.min_opacity,
        )
        idx = np.nonzero(p.visible)[0]
        order = idx[np.lexsort((idx, p.depth[idx]))]
        self.offsets, self.ids = bin_tiles(p.xy, p.half_extent, order, intr.height, intr.width, cfg.tile)
        self._xy = np.ascontiguousarray(np.nan_to_num(p.xy))
        self._conic = np.ascontiguousarray(p.conic)
        self._opac = np.ascontiguousarray(b.opacity)
        n = len(b.opacity)
        if extra_features is None:
            feats = np.concatenate([b.colors, p.depth[:, None], np.ones((n, 1))], axis=1)
        else:
            feats = extra_features(p, b)
        self.feats = np.ascontiguousarray(feats, dtype=float)
        out, T, n_contrib, n_used = self._call("rasterize_forward", self.feats)
        self.raw = out
        self.transmittance = T
        self.n_contrib = n_used

    def _call(self, name, feats, *extra):
        cfg, intr = self.cfg, self.intr
        return getattr(self.kernel, name)(
            self._xy, self._conic, self._opac, feats, self.offsets, self.ids,
            intr.height, intr.width, cfg.tile, cfg.footprint_extent**2, cfg.transmittance_min, *extra,
        )

    @property
    def output(self) -> RenderOutput:
        out = self.raw
        alpha = out[..., 4]
        depth = out[..., 3]
        if self.cfg.normalized_depth:
            depth = np.where(alpha > 1e-8, depth / np.maximum(alpha, 1e-8), 0.0)
        return RenderOutput(out[..., :3].copy(), depth.copy(), alpha.copy(), self.n_contrib)

    def raster_backward(self, adjoint):
        adjoint = np.ascontiguousarray(adjoint, dtype=float)
        if adjoint.shape != self.raw.shape:
            raise ValueError(f"adjoint shape {adjoint.shape} != {self.raw.shape}")
        return self._call("rasterize_backward", self.feats, adjoint)

    def backward(self, adjoint) -> RenderGradients:
        """Vector-Jacobian product for an (H, W, 5) adjoint over [r, g, b, depth, alpha]."""
        adjoint = np.array(adjoint, dtype=float)
        if self.cfg.normalized_depth:
            a = self.raw[..., 4]
            d = self.raw[..., 3]
            cov = a > 1e-8
            safe = np.where(cov, a, 1.0)
            g = adjoint[..., 3].copy()
            adjoint[..., 3] = np.where(cov, g / safe, 0.0)
            adjoint[..., 4] += np.where(cov, -g * d / safe**2, 0.0)
        g_xy, g_conic, g_opac, g_feats = self.raster_backward(adjoint)
        return self._finish(g_xy, g_conic, g_opac, g_feats[:, :3], g_feats[:, 3])

    def _finish(self, g_xy, g_conic, g_opac, g_colors, g_depth, g_means_extra=None):
        b, fld = self.batch, self.field
        g_means, g_ls, g_q, g_cam = projection_backward(self.proj, g_xy, g_conic, g_depth)
        if g_means_extra is not None:
            g_means = g_means + g_means_extra
        grads = zero_gradients(fld)
        grads.camera = g_cam
        ns = b.n_static
        if b.use_static and ns:
            s = fld.static
            sig = sigmoid(s["opacity_logits"])
            grads.static.update(
                means=g_means[:ns], log_scales=g_ls[:ns], quats=g_q[:ns],
                opacity_logits=g_opac[:ns] * sig * (1.0 - sig), colors=g_colors[:ns],
            )
        if b.use_dynamic:
            dg = fld.dynamic_backward(b.state, g_means[ns:], g_opac[ns:], g_q[ns:])
            grads.dynamic.update(dg)
            grads.dynamic["log_scales"] = g_ls[ns:]
            grads.dynamic["colors"] = g_colors[ns:]
        return grads


def render(fld: GaussianField, pose: Pose, intr: Intrinsics, t: float, subset: str = "both",
           cfg: RenderConfig | None = None) -> RenderOutput:
    return RenderContext(fld, pose, intr, t, subset, cfg).output


def render_with_gradients(fld: GaussianField, pose: Pose, intr: Intrinsics, t: float, subset: str,
                          loss_grad, cfg: RenderConfig | None = None) -> RenderGradients:
    return RenderContext(fld, pose, intr, t, subset, cfg).backward(loss_grad)


def stack_adjoint(color=None, depth=None, alpha=None, shape=None) -> np.ndarray:
    """Assemble an (H, W, 5) adjoint from optional per-channel parts."""
    ref = next(x for x in (color, depth, alpha) if x is not None) if shape is None else None
    h, w = shape if shape is not None else np.shape(ref)[:2]
    adj = np.zeros((h, w, 5))
    if color is not None:
        adj[..., :3] = color
    if depth is not None:
        adj[..., 3] = depth
    if alpha is not None:
        adj[..., 4] = alpha
    return adj


class FlowRenderContext:
    """Rendered 2D displacement from (pose_a, t_a) to (pose_b, t_b), weighted at (pose_a, t_a)."""

    def __init__(self, fld: GaussianField, pose_a: Pose, pose_b: Pose, intr: Intrinsics,
                 t_a: float, t_b: float, subset: str = "both", cfg: RenderConfig | None = None):
        cfg = cfg or RenderConfig()
        batch_b = _gather(fld, t_b, subset)
        self.batch_b = batch_b
        R, t = pose_b.rotation, pose_b.translation
        pc = batch_b.means @ R.T + t
        ok = pc[:, 2] > cfg.near
        zs = np.where(ok, pc[:, 2], 1.0)
        xy_b = np.stack([intr.fx * pc[:, 0] / zs + intr.cx, intr.fy * pc[:, 1] / zs + intr.cy], axis=1)
        self._pc_b, self._zs_b, self._ok_b, self.pose_b = pc, zs, ok, pose_b

        def displacement(proj, _batch):
            d = np.where(ok[:, None], xy_b - proj.xy, 0.0)
            return np.nan_to_num(np.concatenate([d, np.ones((len(d), 1))], axis=1))

        self.ctx = RenderContext(fld, pose_a, intr, t_a, subset, cfg, extra_features=displacement)
        self.raw = self.ctx.raw

    @property
    def flow(self) -> FlowField:
        alpha = self.raw[..., 2]
        return FlowField(self.raw[..., 0].copy(), self.raw[..., 1].copy(), alpha > 0)

    @property
    def alpha(self) -> np.ndarray:
        return self.raw[..., 2].copy()

    def backward(self, adjoint_uv) -> RenderGradients:
        """Adjoint of the flow map w.r.t. the field (camera poses are held fixed)."""
        base = self.ctx
        adj = np.zeros(self.raw.shape)
        adj[..., :2] = adjoint_uv
        g_xy, g_conic, g_opac, g_feats = base.raster_backward(adj)
        g_flow = np.where(self._ok_b[:, None], g_feats[:, :2], 0.0)
        g_xy = g_xy - g_flow
        intr = base.intr
        g_pc_b = project_points_backward(self._pc_b, self._zs_b, intr.fx, intr.fy, g_flow)
        g_pos_b = g_pc_b @ self.pose_b.rotation
        n = len(g_xy)
        zeros3 = np.zeros((n, 3))
        bb, ba = self.batch_b, base.batch
        grads = base._finish(g_xy, g_conic, g_opac, zeros3, np.zeros(n))
        ns = ba.n_static
        if ba.use_static and ns:
            grads.static["means"] = grads.static["means"] + g_pos_b[:ns]
        if bb.use_dynamic:
            dg = base.field.dynamic_backward(bb.state, g_pos_b[ns:], np.zeros(n - ns), np.zeros((n - ns, 4)))
            grads.dynamic["centers"] = grads.dynamic["centers"] + dg["centers"]
        grads.camera = np.zeros(6)
        return grads


def render_flow(fld: GaussianField, pose_a: Pose, pose_b: Pose, intr: Intrinsics, t_a: float,
                t_b: float, subset: str = "both", cfg: RenderConfig | None = None) -> FlowField:
    return FlowRenderContext(fld, pose_a, pose_b, intr, t_a, t_b, subset, cfg).flow


__all__ = [
    "DEFAULT_BACKEND", "FlowRenderContext", "RenderConfig", "RenderContext", "RenderGradients",
    "RenderOutput", "render", "render_flow", "render_with_gradients", "stack_adjoint", "zero_gradients",
]
