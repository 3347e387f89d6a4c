"""Independent reference implementations used only by the tests.

Each oracle is written from the defining formula, avoiding the package's
own helpers, so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import expm, logm


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp_series(theta, terms: int = 20) -> np.ndarray:
    K = skew(theta)
    out = np.eye(3)
    term = np.eye(3)
    for n in range(1, terms + 1):
        term = term @ K / n
        out = out + term
    return out


def left_jacobian_simpson(thetas: np.ndarray, steps: int = 1000) -> np.ndarray:
    """``int_0^1 exp(s hat(theta)) ds`` by Simpson's rule, via an eigen-decomposition of hat(theta)."""
    thetas = np.atleast_2d(thetas)
    K = np.stack([skew(t) for t in thetas])
    lam, U = np.linalg.eig(K)
    Uinv = np.linalg.inv(U)
    s = np.linspace(0.0, 1.0, steps + 1)
    w = np.ones(steps + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= (1.0 / steps) / 3.0
    integral = np.einsum("s,nks->nk", w, np.exp(lam[:, :, None] * s[None, None, :]))
    V = np.einsum("nij,nj,njk->nik", U, integral, Uinv)
    return V.real


def se3_log(T: np.ndarray) -> np.ndarray:
    """Twist ``[rho, theta]`` of a 4x4 rigid transform via the matrix logarithm."""
    L = logm(T).real
    return np.array([L[0, 3], L[1, 3], L[2, 3], L[2, 1], L[0, 2], L[1, 0]])


def se3_exp_matrix(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    M = np.zeros((4, 4))
    M[:3, :3] = skew(xi[3:])
    M[:3, 3] = xi[:3]
    return expm(M)


def interaction_matrix(u, v, Z, fx, fy):
    """The 2x6 rigid-flow Jacobian written out entry by entry."""
    return np.array([
        [-fx / Z, 0.0, u / Z, u * v / fy, -(fx + u * u / fx), v],
        [0.0, -fy / Z, v / Z, fy + v * v / fy, -u * v / fx, -u],
    ])


def composite_back_to_front(alphas, features) -> np.ndarray:
    """Literal back-to-front over-compositing; index 0 is nearest."""
    out = np.zeros(np.shape(features)[1])
    for a, f in zip(alphas[::-1], features[::-1]):
        out = a * np.asarray(f) + (1.0 - a) * out
    return out


def insertion_bruteforce(mask_new, mask_prev, fu, fv, valid) -> np.ndarray:
    H, W = mask_new.shape
    out = np.zeros((H, W), bool)
    for i in range(H):
        for j in range(W):
            if not mask_new[i, j]:
                continue
            found = False
            if valid[i, j]:
                x = math.floor(j + fu[i, j] + 0.5)
                y = math.floor(i + fv[i, j] + 0.5)
                if 0 <= x < W and 0 <= y < H:
                    found = bool(mask_prev[y, x])
            out[i, j] = not found
    return out


def ssim_loops(a, b, size: int = 11, sigma: float = 1.5) -> float:
    """SSIM by explicit windows over every fully-covered position."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = 0.01**2, 0.03**2
    H, W, C = a.shape
    scores = []
    for c in range(C):
        vals = []
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                pa = a[i:i + size, j:j + size, c]
                pb = b[i:i + size, j:j + size, c]
                ma = np.sum(win * pa)
                mb = np.sum(win * pb)
                va = np.sum(win * (pa - ma) ** 2)
                vb = np.sum(win * (pb - mb) ** 2)
                cov = np.sum(win * (pa - ma) * (pb - mb))
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
        scores.append(np.mean(vals))
    return float(np.mean(scores))


def ate_bruteforce(est_centers, gt_centers) -> float:
    """Rigid alignment by direct SVD of the cross-covariance, RMSE in cm."""
    P = np.asarray(est_centers, dtype=float)
    Q = np.asarray(gt_centers, dtype=float)
    Pc, Qc = P - P.mean(0), Q - Q.mean(0)
    U, _, Vt = np.linalg.svd(Pc.T @ Qc)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    res = Qc - Pc @ R.T
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))) * 100.0)


def normal_pdf(x, mu, tau):
    return math.exp(-0.5 * ((x - mu) / tau) ** 2) / (tau * math.sqrt(2.0 * math.pi))


def rigid_flow(xi, depth, fx, fy, cx, cy):
    """Flow ``J xi`` on every pixel, built from :func:`interaction_matrix` one pixel at a time."""
    H, W = depth.shape
    fu = np.zeros((H, W))
    fv = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            f = interaction_matrix(j - cx, i - cy, depth[i, j], fx, fy) @ xi
            fu[i, j], fv[i, j] = f
    return fu, fv


def random_twist(rng, max_t=0.03, max_r=0.03):
    """Twist with translation and rotation norms drawn in (0.3, 1) x the bounds."""
    t = rng.normal(size=3)
    r = rng.normal(size=3)
    t *= rng.uniform(0.3, 1.0) * max_t / np.linalg.norm(t)
    r *= rng.uniform(0.3, 1.0) * max_r / np.linalg.norm(r)
    return np.concatenate([t, r])


def f1_score(pred, truth) -> float:
    tp = np.sum(pred & truth)
    fp = np.sum(pred & ~truth)
    fn = np.sum(~pred & truth)
    return float(2 * tp / max(2 * tp + fp + fn, 1))
