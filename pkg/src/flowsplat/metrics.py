"""Trajectory and image-quality metrics."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate

from .errors import DimensionMismatch, LengthMismatch
from .lie import Pose

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation minimizing ``||R source + t - target||`` (unit scale)."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    cov = (target - mu_t).T @ (source - mu_s) / len(source)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_t - R @ mu_s


def translation_errors(estimated: list[Pose], ground_truth: list[Pose]) -> np.ndarray:
    """Per-frame camera-center errors (m) after rigid alignment."""
    if len(estimated) != len(ground_truth):
        raise LengthMismatch(f"{len(estimated)} estimated vs {len(ground_truth)} ground-truth poses")
    if len(estimated) < 2:
        raise LengthMismatch("need at least two poses")
    est = np.array([p.center for p in estimated])
    gt = np.array([p.center for p in ground_truth])
    R, t = align_rigid(est, gt)
    return np.linalg.norm(est @ R.T + t - gt, axis=1)


def ate_rmse(estimated: list[Pose], ground_truth: list[Pose]) -> float:
    """Absolute trajectory error RMSE in centimetres."""
    err = translation_errors(estimated, ground_truth)
    return float(np.sqrt(np.mean(err**2)) * 100.0)


def _check(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def psnr(render, reference, mask=None) -> float:
    a, b = _check(render, reference)
    sq = (a - b) ** 2
    if mask is not None:
        sq = sq[np.asarray(mask, bool)]
        if sq.size == 0:
            return PSNR_CAP
    mse = float(np.mean(sq))
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(render, reference, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over the fully-covered window positions and all channels."""
    a, b = _check(render, reference)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window(size, sigma)
    r = size // 2
    if a.shape[0] <= 2 * r or a.shape[1] <= 2 * r:
        raise DimensionMismatch(f"image {a.shape[:2]} smaller than the {size}x{size} window")
    crop = (slice(r, -r), slice(r, -r))
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        f = lambda img: correlate(img, win, mode="reflect")[crop]  # noqa: E731
        mx, my = f(x), f(y)
        vx = f(x * x) - mx * mx
        vy = f(y * y) - my * my
        cxy = f(x * y) - mx * my
        s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
            (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
        )
        scores.append(s.mean())
    return float(np.mean(scores))
