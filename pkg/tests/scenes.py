"""Seeded random scenes shared by the renderer, tracker and mapper tests."""

from __future__ import annotations

import numpy as np

from flowsplat.field import GaussianField
from flowsplat.lie import Intrinsics


def random_quats(rng, shape):
    q = rng.normal(size=tuple(shape) + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def random_field(rng, n_static=5, n_dynamic=3, K=3, n_keyframes=3, depth=(1.5, 3.0), spread=0.5,
                 scale=(0.08, 0.3), opacity=(-0.5, 2.0)) -> GaussianField:
    fld = GaussianField(K=K, time_normalizer=(0.0, 1.0))
    times = np.sort(rng.uniform(0.05, 0.95, n_keyframes))
    times = times + 1e-3 * np.arange(n_keyframes)
    for k, t in enumerate(times):
        fld.add_keyframe_slot(k, float(t))

    def means(n):
        return np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                                rng.uniform(*depth, n)])

    fld.add_static(means(n_static), np.log(rng.uniform(*scale, (n_static, 3))), rng.uniform(0, 1, (n_static, 3)),
                   rng.uniform(*opacity, n_static), quats=random_quats(rng, (n_static,)))
    for i in range(n_dynamic):
        birth = int(rng.integers(0, n_keyframes))
        fld.add_dynamic(means(1), birth, np.log(rng.uniform(*scale, (1, 3))), rng.uniform(0, 1, (1, 3)),
                        rng.uniform(*opacity, 1), rng.normal(0, 1, (1, K)), rng.uniform(0, 1, (1, K)),
                        np.log(rng.uniform(0.15, 0.5, (1, K))), rng.normal(0.5, 0.3, 1),
                        control_quats=random_quats(rng, (1, K)))
    # move later keyframe centers so interpolation is exercised
    c = fld.dynamic["centers"]
    ok = np.isfinite(c)
    c[ok] += rng.normal(0, 0.05, c.shape)[ok]
    return fld


def tiny_intrinsics(size=16) -> Intrinsics:
    return Intrinsics(1.1 * size, 1.05 * size, (size - 1) / 2 + 0.2, (size - 1) / 2 - 0.3, size, size)


def fd_gradient_check(loss, fld, grads, eps=1e-4, rel=1e-3, floor=1e-6, camera=None):
    """Central differences for every finite parameter; returns (worst ratio, where, count).

    A ratio <= 1 means ``|analytic - fd| <= max(rel |fd|, floor)``. ``camera`` is an
    optional ``(pose, grad)`` pair checked under right perturbations.
    """
    from flowsplat.lie import se3_exp

    worst, where, count = 0.0, None, 0

    def record(fd, an, tag):
        nonlocal worst, where, count
        count += 1
        ratio = abs(an - fd) / max(rel * abs(fd), floor)
        if ratio > worst:
            worst, where = ratio, (tag, fd, an)

    for group, params, g in (("static", fld.static, grads.static), ("dynamic", fld.dynamic, grads.dynamic)):
        for key, arr in params.items():
            flat = arr.reshape(-1)
            gflat = g[key].reshape(-1)
            for i in range(flat.size):
                if not np.isfinite(flat[i]):
                    continue
                old = flat[i]
                flat[i] = old + eps
                lp = loss(fld, None)
                flat[i] = old - eps
                lm = loss(fld, None)
                flat[i] = old
                record((lp - lm) / (2 * eps), gflat[i], (group, key, i))
    if camera is not None:
        pose, g_cam = camera
        for i in range(6):
            d = np.zeros(6)
            d[i] = eps
            fd = (loss(fld, pose @ se3_exp(d)) - loss(fld, pose @ se3_exp(-d))) / (2 * eps)
            record(fd, g_cam[i], ("camera", i))
    return worst, where, count


def one_pixel_instance(rng, n_max=7, opacity_max=0.7):
    """Random Gaussians around pixel (0, 0): screen means, conics, opacities, features."""
    n = int(rng.integers(1, n_max + 1))
    xy = rng.uniform(-2.5, 2.5, (n, 2))
    L = rng.normal(size=(n, 2, 2))
    cov = L @ np.swapaxes(L, 1, 2) + 0.3 * np.eye(2)
    inv = np.linalg.inv(cov)
    conic = np.stack([inv[:, 0, 0], inv[:, 0, 1], inv[:, 1, 1]], axis=1)
    opac = rng.uniform(0.01, opacity_max, n)
    feats = np.column_stack([rng.uniform(0, 1, (n, 3)), rng.uniform(0.5, 5.0, n), np.ones(n)])
    return xy, conic, opac, feats


def composite_one_pixel(kernel, xy, conic, opac, feats, extent=3.0, t_min=1e-4):
    """Run a rasterizer kernel on a 1x1 image with the Gaussians in the given order."""
    n = len(opac)
    offsets = np.array([0, n], dtype=np.int64)
    ids = np.arange(n, dtype=np.int32)
    out, T, _, n_used = kernel.rasterize_forward(
        np.ascontiguousarray(xy, dtype=float), np.ascontiguousarray(conic, dtype=float),
        np.ascontiguousarray(opac, dtype=float), np.ascontiguousarray(feats, dtype=float),
        offsets, ids, 1, 1, 16, extent**2, t_min)
    return out[0, 0], T[0, 0], int(n_used[0, 0])


def footprint_alpha(xy, conic, opac, extent=3.0):
    """Per-Gaussian alpha at pixel (0, 0) from the inverse covariance written as a 2x2 matrix."""
    alphas = []
    for (x, y), (a, b, c), o in zip(xy, conic, opac):
        d = np.array([0.0 - x, 0.0 - y])
        m2 = d @ np.array([[a, b], [b, c]]) @ d
        alphas.append(o * np.exp(-0.5 * m2) if m2 <= extent**2 else 0.0)
    return np.array(alphas)


def _interior(mask, margin=2):
    from scipy.ndimage import binary_erosion
    return binary_erosion(mask, iterations=margin)


def box_shift_case(rng, n_points=40, frames=(1, 3)):
    """Static camera, box translating parallel to the image plane.

    Returns ``(points_i, pose_i, pose_j, flow_ij, depth_j, intr, true_delta)``
    with points sampled at sub-pixel positions inside the box's front face.
    """
    from flowsplat.data.synthetic import ObjectSpec, SceneRenderer, SyntheticSceneConfig
    from flowsplat.lie import unproject_pixels

    start = np.array([rng.uniform(-0.08, 0.0), rng.uniform(-0.05, 0.05), 1.0])
    step = np.array([rng.uniform(0.02, 0.05), rng.uniform(-0.03, 0.03), 0.0])
    cfg = SyntheticSceneConfig(n_frames=5, trajectory="static", floor_height=None,
                               objects=[ObjectSpec("box", (0.18, 0.14, 0.1), [tuple(start), tuple(start + 4 * step)])])
    scene = SceneRenderer(cfg)
    i, j = frames
    depth_i, hit_i, _, _ = scene.render_frame(i)
    depth_j, _, _, _ = scene.render_frame(j)
    face = _interior(hit_i == 0, 3)
    rows, cols = np.nonzero(face)
    pick = rng.choice(rows.size, n_points, replace=False)
    pix = np.column_stack([cols[pick], rows[pick]]) + rng.uniform(-0.5, 0.5, (n_points, 2))
    pts = unproject_pixels(scene.intr, scene.poses[i], pix, np.full(n_points, 0.9))
    delta = scene.object_center(0, j) - scene.object_center(0, i)
    return pts, scene.poses[i], scene.poses[j], scene.flow(i, j), depth_j, scene.intr, delta


def wall_dolly_case(rng, n_points=40, frames=(0, 2), trajectory="dolly"):
    """Wall-only scene under pure camera translation; static points get zero displacement."""
    from flowsplat.data.synthetic import SceneRenderer, SyntheticSceneConfig

    cfg = SyntheticSceneConfig(n_frames=4, trajectory=trajectory, floor_height=None, amplitude=0.03)
    scene = SceneRenderer(cfg)
    i, j = frames
    depth_i, _, _, _ = scene.render_frame(i)
    depth_j, _, _, _ = scene.render_frame(j)
    flow = scene.flow(i, j)
    H, W = depth_i.shape
    ok = np.zeros((H, W), bool)
    ok[4:H - 4, 4:W - 4] = True
    rows, cols = np.nonzero(ok)
    pick = rng.choice(rows.size, n_points, replace=False)
    pix = np.column_stack([cols[pick], rows[pick]]) + rng.uniform(-0.5, 0.5, (n_points, 2))
    _, _, pts, _ = scene.cast(scene.poses[i], i, pix[:, 0], pix[:, 1])
    return pts, scene.poses[i], scene.poses[j], flow, depth_j, scene.intr


def random_masks(rng, H=24, W=28):
    """Shifted blob masks with noisy backward flow, some invalid and some off-image."""
    from flowsplat.motion import FlowField

    prev = np.zeros((H, W), bool)
    r, c = rng.integers(2, H - 8), rng.integers(2, W - 8)
    prev[r:r + 6, c:c + 7] = True
    prev |= rng.random((H, W)) < 0.05
    shift = rng.integers(-3, 4, 2)
    new = np.roll(prev, tuple(shift), axis=(0, 1)) | (rng.random((H, W)) < 0.05)
    fu = -shift[1] + rng.normal(0, 0.6, (H, W))
    fv = -shift[0] + rng.normal(0, 0.6, (H, W))
    fu[rng.random((H, W)) < 0.05] = 40.0  # off-image landings
    valid = rng.random((H, W)) > 0.1
    return new, prev, FlowField(np.where(valid, fu, 0), np.where(valid, fv, 0), valid)
