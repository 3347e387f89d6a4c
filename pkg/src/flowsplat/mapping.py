"""Keyframe mapping for the hybrid Gaussian field.

On each new keyframe the dynamic Gaussians are advected with prior flow and
depth (then smoothed over their spatial neighbours), new dynamic Gaussians
are spawned where the motion mask has no backtracked predecessor, static
Gaussians are seeded where the map is still empty, and the field is
optimized on a window of keyframes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .field import GaussianField, inv_softplus, logit, normal_pdf, sigmoid
from .lie import Intrinsics, Pose, pixel_grid, project_points, unproject_pixels
from .motion import FlowField
from .render import (FlowRenderContext, RenderConfig, RenderContext, RenderGradients,
                     stack_adjoint, zero_gradients)

log = logging.getLogger(__name__)

MASK_CLAMP = (0.05, 0.95)


def default_learning_rates() -> dict:
    return {
        "static.means": 1e-3,
        "static.log_scales": 1e-2,
        "static.quats": 5e-3,
        "static.opacity_logits": 5e-2,
        "static.colors": 1e-2,
        "dynamic.centers": 1e-3,
        "dynamic.log_scales": 1e-2,
        "dynamic.opacity_logits": 5e-2,
        "dynamic.colors": 1e-2,
        "dynamic.weight_logits": 1e-2,
        "dynamic.gmm_means": 1e-2,
        "dynamic.log_tau": 1e-2,
        "dynamic.control_quats": 5e-3,
        "dynamic.amplitude_log": 1e-2,
    }


@dataclass
class MappingConfig:
    iterations: int = 50
    window_size: int = 8
    random_past_keyframes: int = 2
    # every other iteration trains on the newest keyframe
    newest_keyframe_share: float = 0.5
    flow_loss_iterations: int = 25
    knn_count: int = 8
    knn_radius: float = 0.25
    tau_knn: float = 0.05
    density_divisor: float = 4.0
    lambda_color: float = 0.9
    lambda_depth: float = 0.1
    lambda_flow: float = 0.1
    lambda_mask: float = 0.05
    lambda_iso: float = 10.0
    learning_rates: dict = dc_field(default_factory=default_learning_rates)
    prune_opacity: float = 0.005
    keyframe_every: int = 5
    mask_diff_threshold: float = 0.1
    static_stride: int = 2
    static_seed_alpha: float = 0.5
    static_init_opacity: float = 0.8
    static_scale_factor: float = 0.7
    dynamic_init_opacity: float = 0.5
    gmm_tau_init: float = 0.2
    birth_activation: float = 0.9
    static_mean_warmup: int = 0
    color_refine_iterations: int = 300
    # ablation switches
    use_propagation: bool = True
    use_knn: bool = True
    use_adaptive_insert: bool = True
    render: RenderConfig = dc_field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.window_size < 1 or self.density_divisor < 1:
            raise ValueError("window_size and density_divisor must be at least 1")
        weights = (self.lambda_color, self.lambda_depth, self.lambda_flow, self.lambda_mask, self.lambda_iso)
        if min(weights) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Keyframe:
    slot: int
    frame: int
    timestamp: float
    pose: Pose
    color: np.ndarray
    depth: np.ndarray
    mask_dynamic: np.ndarray
    flow_from_prev: FlowField | None = None  # pixels of the previous keyframe, displacement to this one


def keyframe_decision(mask_current, mask_last_kf, frames_since_kf: int, cfg: MappingConfig) -> bool:
    if frames_since_kf >= cfg.keyframe_every:
        return True
    a = np.asarray(mask_current, bool)
    b = np.asarray(mask_last_kf, bool)
    return bool(np.count_nonzero(a ^ b) / a.size > cfg.mask_diff_threshold)


# -- propagation ------------------------------------------------------------


def sample_bilinear(values, valid, u, v):
    """Bilinear lookup ignoring invalid corners; returns (samples, ok)."""
    values = np.asarray(values, dtype=float)
    valid = np.asarray(valid, bool)
    H, W = valid.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(int), W - 1)
    v0 = np.minimum(np.floor(vc).astype(int), H - 1)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = uc - u0
    fv = vc - v0
    corners = ((v0, u0, (1 - fu) * (1 - fv)), (v0, u1, fu * (1 - fv)),
               (v1, u0, (1 - fu) * fv), (v1, u1, fu * fv))
    extra = values.shape[2:]
    acc = np.zeros(u.shape + extra)
    total = np.zeros(u.shape)
    for vv, uu, w in corners:
        w = np.where(valid[vv, uu] & (w > 0), w, 0.0)
        total += w
        acc += w.reshape(w.shape + (1,) * len(extra)) * values[vv, uu]
    ok = inside & (total > 0)
    safe = np.where(ok, total, 1.0)
    return acc / safe.reshape(safe.shape + (1,) * len(extra)), ok


def propagate_centers(centers, pose_prev: Pose, pose_new: Pose, flow_fwd: FlowField, depth_new,
                      intr: Intrinsics):
    """Scene-flow advection of 3D centers; returns (deltas, failed)."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    depth_new = np.asarray(depth_new, dtype=float)
    n = len(centers)
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0, bool)
    pix, z = project_points(intr, pose_prev, centers)
    front = z > 1e-9
    pix = np.where(front[:, None], pix, np.nan)
    flow, ok_f = sample_bilinear(flow_fwd.stacked(), flow_fwd.valid, pix[:, 0], pix[:, 1])
    target = pix + flow
    # inverse depth is affine in the pixel coordinates on a plane, so its
    # bilinear lookup is exact on planar patches whatever the camera motion
    has = depth_new > 0
    inv, ok_d = sample_bilinear(np.where(has, 1.0 / np.where(has, depth_new, 1.0), 0.0), has,
                                target[:, 0], target[:, 1])
    ok = front & ok_f & ok_d & (inv > 0)
    d = 1.0 / np.where(ok, inv, 1.0)
    moved = unproject_pixels(intr, pose_new, np.where(ok[:, None], target, 0.0), np.where(ok, d, 1.0))
    deltas = np.where(ok[:, None], moved - centers, 0.0)
    return deltas, ~ok


def propagate_gaussians(fld: GaussianField, kf_prev: Keyframe, kf_new: Keyframe, flow_fwd: FlowField,
                        depth_new, intr: Intrinsics):
    """Per-dynamic-Gaussian raw deltas from slot ``kf_prev.slot``; unborn Gaussians are flagged."""
    live = fld.dynamic_birth <= kf_prev.slot
    deltas = np.zeros((fld.n_dynamic, 3))
    failed = ~live
    if live.any():
        d, f = propagate_centers(fld.dynamic["centers"][live, kf_prev.slot], kf_prev.pose, kf_new.pose,
                                 flow_fwd, depth_new, intr)
        deltas[live] = d
        failed = failed.copy()
        failed[live] = f
    return deltas, failed


def knn_weights(centers, cfg: MappingConfig, failed=None):
    """Neighbour indices and normalized Gaussian weights; flagged points are not sources.

    Returns ``(idx, w)`` of shape (N, k); unused slots have weight 0.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    n = len(centers)
    failed = np.zeros(n, bool) if failed is None else np.asarray(failed, bool)
    k = max(1, min(cfg.knn_count, n))
    tree = cKDTree(centers)
    dist, idx = tree.query(centers, k=k, distance_upper_bound=cfg.knn_radius)
    dist = dist.reshape(n, k)
    idx = idx.reshape(n, k)
    own = np.arange(n)
    has_self = (idx == own[:, None]).any(axis=1)
    # coincident points can push a point out of its own neighbour list
    idx[~has_self, -1] = own[~has_self]
    dist[~has_self, -1] = 0.0
    present = idx < n
    idx = np.where(present, idx, 0)
    usable = present & ~failed[idx]
    logw = np.where(usable, -0.5 * (dist / cfg.tau_knn) ** 2, -np.inf)
    top = logw.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    w = np.where(usable, np.exp(logw - top), 0.0)
    total = w.sum(axis=1, keepdims=True)
    w = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    return idx, w


def knn_smooth(deltas, centers_prev, cfg: MappingConfig, failed=None) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=float).reshape(-1, 3)
    if len(deltas) == 0:
        return deltas.copy()
    idx, w = knn_weights(centers_prev, cfg, failed)
    return np.einsum("nk,nkc->nc", w, deltas[idx])


# -- insertion ----------------------------------------------------------------


def backtrack(mask_new, flow_bwd: FlowField):
    """Nearest previous-frame pixel for every pixel; ``ok`` is False off-image or on invalid flow."""
    H, W = np.shape(mask_new)
    u, v = pixel_grid(H, W)
    up = np.floor(u + flow_bwd.u + 0.5)
    vp = np.floor(v + flow_bwd.v + 0.5)
    ok = flow_bwd.valid & np.isfinite(up) & np.isfinite(vp) & (up >= 0) & (up < W) & (vp >= 0) & (vp < H)
    return np.where(ok, up, 0).astype(int), np.where(ok, vp, 0).astype(int), ok


def insertion_mask(mask_new, mask_prev, flow_bwd: FlowField) -> np.ndarray:
    """Pixels of ``mask_new`` whose backtracked location is not in ``mask_prev``."""
    mask_new = np.asarray(mask_new, bool)
    mask_prev = np.asarray(mask_prev, bool)
    up, vp, ok = backtrack(mask_new, flow_bwd)
    was_dynamic = ok & mask_prev[vp, up]
    return mask_new & ~was_dynamic


@dataclass
class NewGaussians:
    centers: np.ndarray
    colors: np.ndarray
    log_scales: np.ndarray
    pixels: np.ndarray
    mask_insert: np.ndarray


def adaptive_insert(mask_new, mask_prev, flow_bwd: FlowField, depth_new, pose_new: Pose, intr: Intrinsics,
                    frame_color, cfg: MappingConfig, rng: np.random.Generator) -> NewGaussians:
    m_ins = insertion_mask(mask_new, mask_prev, flow_bwd)
    return spawn_from_mask(m_ins, depth_new, pose_new, intr, frame_color, cfg, rng)


def spawn_from_mask(m_ins, depth, pose: Pose, intr: Intrinsics, color, cfg: MappingConfig,
                    rng: np.random.Generator) -> NewGaussians:
    depth = np.asarray(depth, dtype=float)
    rows, cols = np.nonzero(m_ins)
    keep = rng.random(rows.size) < 1.0 / cfg.density_divisor
    rows, cols = rows[keep], cols[keep]
    good = depth[rows, cols] > 0
    rows, cols = rows[good], cols[good]
    pixels = np.stack([cols, rows], axis=1).astype(float)
    d = depth[rows, cols]
    centers = unproject_pixels(intr, pose, pixels, d) if rows.size else np.zeros((0, 3))
    footprint = d / intr.fx * np.sqrt(cfg.density_divisor)
    if rows.size >= 4:
        dist, _ = cKDTree(centers).query(centers, k=4)
        scale = dist[:, 1:].mean(axis=1)
        scale = np.clip(scale, 0.5 * footprint, 4.0 * footprint)
    else:
        scale = footprint
    log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)
    colors = np.asarray(color, dtype=float)[rows, cols]
    return NewGaussians(centers, colors, log_scales, pixels, np.asarray(m_ins, bool))


def gmm_birth_params(t_hat: float, K: int, cfg: MappingConfig):
    """Mixture initialization: means over [t_hat, 1], visible (m ~ birth_activation) at birth."""
    means = np.linspace(t_hat, 1.0, K) if K > 1 else np.array([t_hat])
    weight_logits = np.full(K, float(inv_softplus(1.0)))
    log_tau = np.full(K, np.log(cfg.gmm_tau_init))
    act = float(np.sum(normal_pdf(t_hat, means, cfg.gmm_tau_init)))
    amplitude = -np.log1p(-cfg.birth_activation) / act
    return weight_logits, means, log_tau, float(np.log(amplitude))


# -- losses -------------------------------------------------------------------


def isotropy_loss(log_scales):
    """Mean over Gaussians of sum_axes |s - mean(s)| and its gradient w.r.t. log-scales."""
    log_scales = np.asarray(log_scales, dtype=float).reshape(-1, 3)
    n = len(log_scales)
    if n == 0:
        return 0.0, np.zeros((0, 3))
    s = np.exp(log_scales)
    dev = s - s.mean(axis=1, keepdims=True)
    value = float(np.abs(dev).sum(axis=1).mean())
    sg = np.sign(dev)
    g_s = (sg - sg.mean(axis=1, keepdims=True)) / n
    return value, g_s * s


def mask_loss(alpha, mask):
    """Bernoulli KL between the clamped mask and the clamped dynamic alpha.

    Zero when the clamped alpha equals the clamped mask. The gradient is
    taken at the clamped alpha and passed straight through the clamp, so a
    saturated alpha on the wrong side of the mask is still pulled back.
    """
    lo, hi = MASK_CLAMP
    t = np.clip(np.asarray(mask, dtype=float), lo, hi)
    p = np.clip(np.asarray(alpha, dtype=float), lo, hi)
    n = t.size
    value = float(np.sum(t * np.log(t / p) + (1 - t) * np.log((1 - t) / (1 - p))) / n)
    grad = (-t / p + (1 - t) / (1 - p)) / n
    return value, grad


@dataclass
class MapLoss:
    total: float
    terms: dict
    grads: RenderGradients


def mapping_loss(fld: GaussianField, kf: Keyframe, prev_kf: Keyframe | None, intr: Intrinsics,
                 cfg: MappingConfig, use_flow: bool = True) -> MapLoss:
    """Weighted sum of color, depth, flow, mask and isotropy terms for one keyframe."""
    rc = cfg.render
    terms = {"color": 0.0, "depth": 0.0, "flow": 0.0, "mask": 0.0, "iso": 0.0}
    grads = zero_gradients(fld)

    ctx = RenderContext(fld, kf.pose, intr, kf.timestamp, "both", rc)
    out = ctx.output
    has_depth = kf.depth > 0
    n_valid = max(int(has_depth.sum()), 1)
    m = has_depth / n_valid
    dc = out.color - kf.color
    dd = out.depth - kf.depth
    terms["color"] = float(np.sum(m * np.abs(dc).sum(axis=-1)))
    terms["depth"] = float(np.sum(m * np.abs(dd)))
    adj = stack_adjoint(color=cfg.lambda_color * np.sign(dc) * m[..., None],
                        depth=cfg.lambda_depth * np.sign(dd) * m)
    grads.add(ctx.backward(adj))

    if fld.n_dynamic and cfg.lambda_mask > 0:
        dctx = RenderContext(fld, kf.pose, intr, kf.timestamp, "dynamic", rc)
        val, g_alpha = mask_loss(dctx.output.alpha, kf.mask_dynamic)
        terms["mask"] = val
        grads.add(dctx.backward(stack_adjoint(alpha=cfg.lambda_mask * g_alpha, shape=g_alpha.shape)))
    elif cfg.lambda_mask > 0:
        terms["mask"] = mask_loss(np.zeros(kf.mask_dynamic.shape), kf.mask_dynamic)[0]

    if (use_flow and cfg.lambda_flow > 0 and fld.n_dynamic and prev_kf is not None
            and kf.flow_from_prev is not None):
        prior = kf.flow_from_prev
        sel = prev_kf.mask_dynamic & prior.valid
        if sel.any():
            fctx = FlowRenderContext(fld, prev_kf.pose, kf.pose, intr, prev_kf.timestamp, kf.timestamp,
                                     "dynamic", rc)
            diff = fctx.raw[..., :2] - prior.stacked()
            cnt = int(sel.sum())
            terms["flow"] = float(np.sum(np.abs(diff)[sel]) / cnt)
            g = cfg.lambda_flow * np.sign(diff) * (sel / cnt)[..., None]
            grads.add(fctx.backward(g))

    if cfg.lambda_iso > 0:
        ls = np.concatenate([fld.static["log_scales"], fld.dynamic["log_scales"]])
        val, g = isotropy_loss(ls)
        terms["iso"] = val
        ns = fld.n_static
        grads.static["log_scales"] = grads.static["log_scales"] + cfg.lambda_iso * g[:ns]
        grads.dynamic["log_scales"] = grads.dynamic["log_scales"] + cfg.lambda_iso * g[ns:]

    total = (cfg.lambda_color * terms["color"] + cfg.lambda_depth * terms["depth"]
             + cfg.lambda_flow * terms["flow"] + cfg.lambda_mask * terms["mask"]
             + cfg.lambda_iso * terms["iso"])
    return MapLoss(total, terms, grads)


# -- optimization --------------------------------------------------------------


class Adam:
    """Adam over named arrays; state is keyed by name and reset by the caller."""

    def __init__(self, lrs: dict, betas=(0.9, 0.999), eps=1e-15):
        self.lrs, self.betas, self.eps = lrs, betas, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, masks: dict | None = None) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            lr = self.lrs.get(name, 0.0)
            if lr == 0.0 or g.size == 0:
                continue
            g = np.nan_to_num(g)
            if masks and name in masks:
                g = g * masks[name].reshape(masks[name].shape + (1,) * (g.ndim - masks[name].ndim))
            m = self.m.get(name)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mh = m / (1 - b1**self.t)
            vh = v / (1 - b2**self.t)
            group, key = name.split(".")
            params[group][key] -= lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class MapStats:
    keyframe: int
    frame: int
    n_static: int
    n_dynamic: int
    inserted: int
    seeded: int
    pruned: int
    propagation_failed: int
    loss: dict

    def as_dict(self) -> dict:
        return {
            "frame": self.frame, "keyframe": self.keyframe, "n_static": self.n_static,
            "n_dynamic": self.n_dynamic, "inserted": self.inserted, "seeded": self.seeded,
            "pruned": self.pruned, "propagation_failed": self.propagation_failed, "loss": self.loss,
        }


class Mapper:
    """Owns the Gaussian field and the keyframe list."""

    def __init__(self, intr: Intrinsics, cfg: MappingConfig | None = None, time_normalizer=(0.0, 1.0),
                 K: int = 3, temporal_model: str = "gmm", seed: int = 0):
        self.intr = intr
        self.cfg = cfg or MappingConfig()
        self.field = GaussianField(K, time_normalizer, temporal_model)
        self.keyframes: list[Keyframe] = []
        self.rng = np.random.default_rng(seed)

    # -- keyframe intake ---------------------------------------------------

    def add_keyframe(self, frame: int, timestamp: float, pose: Pose, color, depth, mask_dynamic,
                     flow_from_prev: FlowField | None = None, flow_to_prev: FlowField | None = None) -> MapStats:
        cfg, fld = self.cfg, self.field
        k = len(self.keyframes)
        kf = Keyframe(k, frame, timestamp, pose, np.asarray(color, float), np.asarray(depth, float),
                      np.asarray(mask_dynamic, bool), flow_from_prev)
        prev = self.keyframes[-1] if self.keyframes else None
        fld.add_keyframe_slot(k, timestamp)

        n_failed = 0
        if prev is not None and fld.n_dynamic and cfg.use_propagation and flow_from_prev is not None:
            deltas, failed = propagate_gaussians(fld, prev, kf, flow_from_prev, kf.depth, self.intr)
            live = fld.dynamic_birth <= prev.slot
            n_failed = int((failed & live).sum())
            if cfg.use_knn:
                smooth = np.zeros_like(deltas)
                smooth[live] = knn_smooth(deltas[live], fld.dynamic["centers"][live, prev.slot], cfg,
                                          failed[live])
            else:
                smooth = deltas
            fld.dynamic["centers"][live, k] = fld.dynamic["centers"][live, prev.slot] + smooth[live]

        inserted = self._insert(kf, prev, flow_to_prev)
        seeded = self._seed_static(kf)
        self.keyframes.append(kf)
        loss = self.optimize(cfg.iterations)
        pruned = self.prune()
        return MapStats(k, frame, fld.n_static, fld.n_dynamic, inserted, seeded, pruned, n_failed, loss)

    def _insert(self, kf: Keyframe, prev: Keyframe | None, flow_to_prev: FlowField | None) -> int:
        cfg, fld = self.cfg, self.field
        if not kf.mask_dynamic.any():
            return 0
        if prev is None or flow_to_prev is None:
            m_ins = kf.mask_dynamic
        elif cfg.use_adaptive_insert:
            m_ins = insertion_mask(kf.mask_dynamic, prev.mask_dynamic, flow_to_prev)
        elif fld.n_dynamic == 0:
            # without adaptive insertion, dynamic Gaussians are only created once
            m_ins = kf.mask_dynamic
        else:
            return 0
        new = spawn_from_mask(m_ins, kf.depth, kf.pose, self.intr, kf.color, cfg, self.rng)
        n = len(new.centers)
        if n:
            wl, mu, lt, al = gmm_birth_params(fld.normalize_time(kf.timestamp), fld.K, cfg)
            fld.add_dynamic(new.centers, kf.slot, new.log_scales, new.colors,
                            float(logit(cfg.dynamic_init_opacity)), wl, mu, lt, al)
        return n

    def _seed_static(self, kf: Keyframe) -> int:
        cfg, fld = self.cfg, self.field
        H, W = kf.depth.shape
        grid = np.zeros((H, W), bool)
        grid[::cfg.static_stride, ::cfg.static_stride] = True
        cand = grid & (kf.depth > 0) & ~kf.mask_dynamic
        if fld.n_static:
            alpha = RenderContext(fld, kf.pose, self.intr, kf.timestamp, "static", cfg.render).output.alpha
            cand &= alpha < cfg.static_seed_alpha
        rows, cols = np.nonzero(cand)
        if rows.size == 0:
            return 0
        d = kf.depth[rows, cols]
        pts = unproject_pixels(self.intr, kf.pose, np.stack([cols, rows], axis=1).astype(float), d)
        scale = cfg.static_scale_factor * cfg.static_stride * d / self.intr.fx
        fld.add_static(pts, np.repeat(np.log(scale)[:, None], 3, axis=1), kf.color[rows, cols],
                       float(logit(cfg.static_init_opacity)), birth=kf.slot)
        return int(rows.size)

    # -- optimization -------------------------------------------------------

    def _schedule(self, iterations: int) -> list[int]:
        cfg = self.cfg
        n = len(self.keyframes)
        window = list(range(max(0, n - cfg.window_size), n))
        earlier = list(range(0, window[0]))
        extra = []
        if earlier and cfg.random_past_keyframes > 0:
            extra = sorted(self.rng.choice(earlier, min(cfg.random_past_keyframes, len(earlier)),
                                           replace=False).tolist())
        pool = window + extra
        period = int(round(1.0 / cfg.newest_keyframe_share)) if cfg.newest_keyframe_share > 0 else 0
        out = []
        for i in range(iterations):
            if period and i % period == 0:
                out.append(n - 1)
            else:
                out.append(int(pool[self.rng.integers(len(pool))]))
        return out

    def _masks(self, newest_slot: int, geometry: bool) -> dict:
        fld, cfg = self.field, self.cfg
        masks = {}
        if geometry:
            lo = newest_slot - cfg.static_mean_warmup
            masks["static.means"] = (fld.static_birth >= lo).astype(float)
        return masks

    def optimize(self, iterations: int, geometry: bool = True, slots: list[int] | None = None) -> dict:
        """Run Adam on the mapping loss; returns the mean loss terms of the last iterations."""
        cfg, fld = self.cfg, self.field
        if not self.keyframes or iterations <= 0:
            return {}
        lrs = dict(cfg.learning_rates)
        if not geometry:
            lrs = {k: v for k, v in lrs.items() if k.endswith(("colors", "opacity_logits"))}
        opt = Adam(lrs)
        schedule = slots if slots is not None else self._schedule(iterations)
        newest = len(self.keyframes) - 1
        record = []
        for i, slot in enumerate(schedule):
            kf = self.keyframes[slot]
            prev = self.keyframes[slot - 1] if slot > 0 else None
            use_flow = geometry and i >= len(schedule) - cfg.flow_loss_iterations
            res = mapping_loss(fld, kf, prev, self.intr, cfg, use_flow=use_flow)
            params = {"static": fld.static, "dynamic": fld.dynamic}
            grads = {f"static.{k}": v for k, v in res.grads.static.items()}
            grads.update({f"dynamic.{k}": v for k, v in res.grads.dynamic.items()})
            opt.step(params, grads, self._masks(newest, geometry))
            self._project_constraints()
            if i >= len(schedule) - 10:
                record.append(dict(res.terms, total=res.total))
        return {k: float(np.mean([r[k] for r in record])) for k in record[0]} if record else {}

    def _project_constraints(self) -> None:
        fld = self.field
        for q in (fld.static["quats"], fld.dynamic["control_quats"]):
            n = np.linalg.norm(q, axis=-1, keepdims=True)
            q /= np.where(n > 0, n, 1.0)
        np.clip(fld.dynamic["gmm_means"], 0.0, 1.0, out=fld.dynamic["gmm_means"])
        np.clip(fld.dynamic["log_tau"], np.log(0.01), np.log(5.0), out=fld.dynamic["log_tau"])
        np.clip(fld.static["colors"], 0.0, 1.0, out=fld.static["colors"])
        np.clip(fld.dynamic["colors"], 0.0, 1.0, out=fld.dynamic["colors"])

    def prune(self) -> int:
        """Drop Gaussians whose opacity stays below the threshold at every keyframe time."""
        fld, thr = self.field, self.cfg.prune_opacity
        drop_s = sigmoid(fld.static["opacity_logits"]) < thr
        peak = np.zeros(fld.n_dynamic)
        for kf in self.keyframes:
            if fld.n_dynamic:
                peak = np.maximum(peak, fld.dynamic_state(kf.timestamp).opacity)
        drop_d = peak < thr
        fld.remove_static(drop_s)
        fld.remove_dynamic(drop_d)
        return int(drop_s.sum() + drop_d.sum())

    def refine_colors(self, iterations: int | None = None) -> dict:
        """Color/opacity-only optimization cycling over every keyframe."""
        iterations = self.cfg.color_refine_iterations if iterations is None else iterations
        n = len(self.keyframes)
        if n == 0 or iterations <= 0:
            return {}
        order = self.rng.permutation(np.resize(np.arange(n), iterations)).tolist()
        return self.optimize(iterations, geometry=False, slots=order)
