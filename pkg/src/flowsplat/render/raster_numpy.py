"""Pure-NumPy tile rasterizer (fallback when the compiled kernel is unavailable).

Each tile is processed densely: a (gaussians x pixels) alpha matrix, a
cumulative product for transmittance and reverse cumulative sums for the
backward pass. Results match the compiled kernel to rounding.
"""

from __future__ import annotations

import numpy as np


def bin_tiles(xy, half_extent, order, height: int, width: int, tile: int):
    """Per-tile lists of Gaussian ids, each list in the given front-to-back order.

    Returns ``(offsets, ids)`` where tile ``k`` owns ``ids[offsets[k]:offsets[k+1]]``.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    order = np.asarray(order, dtype=np.int64)
    if order.size == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int32)
    p = xy[order]
    h = half_extent[order]
    x0 = np.clip(np.ceil(p[:, 0] - h[:, 0]), 0, width - 1).astype(np.int64) // tile
    x1 = np.clip(np.floor(p[:, 0] + h[:, 0]), 0, width - 1).astype(np.int64) // tile
    y0 = np.clip(np.ceil(p[:, 1] - h[:, 1]), 0, height - 1).astype(np.int64) // tile
    y1 = np.clip(np.floor(p[:, 1] + h[:, 1]), 0, height - 1).astype(np.int64) // tile
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    rank = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    tx = np.repeat(x0, counts) + local % np.maximum(nxr, 1)
    ty = np.repeat(y0, counts) + local // np.maximum(nxr, 1)
    tile_id = ty * tiles_x + tx
    key = np.lexsort((rank, tile_id))
    ids = order[rank[key]].astype(np.int32)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=n_tiles), out=offsets[1:])
    return offsets, ids


def _tile_pixels(tx, ty, tile, height, width):
    xs = np.arange(tx * tile, min((tx + 1) * tile, width))
    ys = np.arange(ty * tile, min((ty + 1) * tile, height))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


def _tile_alpha(g, px, py, xy, conic, opac, extent2, t_min):
    dx = px[None, :] - xy[g, 0][:, None]
    dy = py[None, :] - xy[g, 1][:, None]
    A, B, C = conic[g, 0][:, None], conic[g, 1][:, None], conic[g, 2][:, None]
    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
    inside = power >= -0.5 * extent2
    G = np.exp(np.where(inside, power, 0.0))
    alpha = np.where(inside, opac[g][:, None] * G, 0.0)
    one_minus = 1.0 - alpha
    T_before = np.ones_like(alpha)
    if len(g) > 1:
        T_before[1:] = np.cumprod(one_minus[:-1], axis=0)
    stop = inside & (T_before * one_minus < t_min)
    n = len(g)
    first = np.where(stop.any(axis=0), np.argmax(stop, axis=0), n)
    used = inside & (np.arange(n)[:, None] < first[None, :])
    return dx, dy, G, alpha, T_before, used


def rasterize_forward(xy, conic, opac, feats, offsets, ids, height, width, tile, extent2, t_min):
    C = feats.shape[1]
    out = np.zeros((height, width, C))
    T_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int32)
    n_used = np.zeros((height, width), dtype=np.int32)
    tiles_x = (width + tile - 1) // tile
    for k in range(len(offsets) - 1):
        g = ids[offsets[k]:offsets[k + 1]]
        if g.size == 0:
            continue
        ty, tx = divmod(k, tiles_x)
        py, px = _tile_pixels(tx, ty, tile, height, width)
        _, _, _, alpha, T_before, used = _tile_alpha(g, px, py, xy, conic, opac, extent2, t_min)
        w = np.where(used, alpha * T_before, 0.0)
        out[py, px] = w.T @ feats[g]
        T_final[py, px] = np.prod(np.where(used, 1.0 - alpha, 1.0), axis=0)
        last = np.where(used, np.arange(1, len(g) + 1)[:, None], 0).max(axis=0)
        n_contrib[py, px] = last
        n_used[py, px] = used.sum(axis=0)
    return out, T_final, n_contrib, n_used


def rasterize_backward(xy, conic, opac, feats, offsets, ids, height, width, tile, extent2, t_min,
                       g_out):
    N, C = feats.shape
    g_xy = np.zeros((N, 2))
    g_conic = np.zeros((N, 3))
    g_opac = np.zeros(N)
    g_feats = np.zeros((N, C))
    tiles_x = (width + tile - 1) // tile
    for k in range(len(offsets) - 1):
        g = ids[offsets[k]:offsets[k + 1]]
        if g.size == 0:
            continue
        ty, tx = divmod(k, tiles_x)
        py, px = _tile_pixels(tx, ty, tile, height, width)
        dx, dy, G, alpha, T_before, used = _tile_alpha(g, px, py, xy, conic, opac, extent2, t_min)
        go = g_out[py, px]  # (P, C)
        w = np.where(used, alpha * T_before, 0.0)
        f = feats[g]
        contrib = w[:, :, None] * f[:, None, :]  # (n, P, C)
        behind = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib  # sum over j > i
        one_minus = 1.0 - alpha
        safe = np.where(used & (one_minus > 0), one_minus, 1.0)
        d_alpha = np.einsum("pc,npc->np", go, T_before[:, :, None] * f[:, None, :]
                            - behind / safe[:, :, None])
        d_alpha = np.where(used, d_alpha, 0.0)
        g_feats[g] += w @ go
        g_opac[g] += np.sum(d_alpha * G, axis=1)
        d_pow = d_alpha * alpha
        A, B, Cc = conic[g, 0][:, None], conic[g, 1][:, None], conic[g, 2][:, None]
        g_xy[g, 0] += np.sum(d_pow * (A * dx + B * dy), axis=1)
        g_xy[g, 1] += np.sum(d_pow * (B * dx + Cc * dy), axis=1)
        g_conic[g, 0] += np.sum(d_pow * (-0.5 * dx * dx), axis=1)
        g_conic[g, 1] += np.sum(d_pow * (-dx * dy), axis=1)
        g_conic[g, 2] += np.sum(d_pow * (-0.5 * dy * dy), axis=1)
    return g_xy, g_conic, g_opac, g_feats
