"""TUM RGB-D directory layout: loading, association, and writing sequences.

Besides the public layout (rgb.txt, depth.txt, groundtruth.txt) a sequence
may carry ``intrinsics.txt``, prior flows ``flow/{i:06d}_{j:06d}.flo``
(pixels of frame i, displacement to frame j), semantic masks
``mask/{i:06d}.pgm`` and object masks ``gt_mask/{i:06d}.pgm``; indices refer
to associated frames in order.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from ..errors import DataError, MissingIndexFile, NoAssociations
from ..lie import Intrinsics
from .codecs import (
    TUM_DEPTH_SCALE, ensure_dir, format_tum_line, parse_tum_pose, read_color_png, read_depth_png,
    read_flo, read_intrinsics, read_mask_pgm, write_color_png, write_depth_png, write_flo,
    write_intrinsics, write_mask_pgm,
)
from .dataset import Dataset, FrameBundle

log = logging.getLogger(__name__)

# Freiburg 1 calibration, used when a sequence ships no intrinsics.txt.
DEFAULT_INTRINSICS = (517.3, 516.5, 318.6, 255.3)


def read_index(path) -> list[tuple[float, list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise MissingIndexFile(f"missing index file {path}")
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        try:
            rows.append((float(parts[0]), parts[1:]))
        except ValueError:
            raise DataError(f"{path}: bad timestamp {parts[0]!r}") from None
    return rows


def associate(first: list[float], second: list[float], tolerance: float) -> list[tuple[int, int]]:
    """Greedy one-to-one matching by smallest timestamp difference within ``tolerance``."""
    a = np.asarray(first, dtype=float)
    b = np.asarray(second, dtype=float)
    if a.size == 0 or b.size == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    ii, jj = np.nonzero(diff <= tolerance)
    order = np.lexsort((jj, ii, diff[ii, jj]))
    used_a, used_b, pairs = set(), set(), []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def _flow_path(root: Path, i: int, j: int) -> Path:
    return root / "flow" / f"{i:06d}_{j:06d}.flo"


def load_tum_sequence(root, max_frames: int | None = None, association_tolerance: float = 0.02,
                      depth_scale: float = TUM_DEPTH_SCALE, intrinsics: Intrinsics | None = None) -> Dataset:
    root = Path(root)
    rgb = read_index(root / "rgb.txt")
    depth = read_index(root / "depth.txt")
    pairs = associate([r[0] for r in rgb], [d[0] for d in depth], association_tolerance)
    if not pairs:
        raise NoAssociations(f"{root}: no rgb/depth pairs within {association_tolerance} s")
    if max_frames is not None:
        pairs = pairs[:max_frames]

    frames = []
    for idx, (i, j) in enumerate(pairs):
        color = read_color_png(root / rgb[i][1][0])
        d = read_depth_png(root / depth[j][1][0], depth_scale)
        mask_path = root / "mask" / f"{idx:06d}.pgm"
        semantic = read_mask_pgm(mask_path) if mask_path.is_file() else None
        frames.append(FrameBundle(idx, rgb[i][0], color, d, semantic_mask=semantic))

    h, w = frames[0].shape
    if intrinsics is None:
        if (root / "intrinsics.txt").is_file():
            intrinsics = read_intrinsics(root / "intrinsics.txt")
        else:
            intrinsics = Intrinsics(*DEFAULT_INTRINSICS, width=w, height=h)

    for k in range(1, len(frames)):
        p = _flow_path(root, k, k - 1)
        if p.is_file():
            frames[k].flow_to_prev = read_flo(p)
        p = _flow_path(root, k - 1, k)
        if p.is_file():
            frames[k].flow_from_prev = read_flo(p)

    gt_poses = None
    gt_file = root / "groundtruth.txt"
    if gt_file.is_file():
        gt = read_index(gt_file)
        stamps = [f.timestamp for f in frames]
        matched = dict(associate(stamps, [g[0] for g in gt], association_tolerance))
        if len(matched) == len(frames):
            gt_poses = [parse_tum_pose(gt[matched[k]][1][:7]) for k in range(len(frames))]
        else:
            log.warning("%s: ground truth covers %d of %d frames, ignoring it", root, len(matched), len(frames))

    gt_masks = None
    if (root / "gt_mask").is_dir():
        paths = [root / "gt_mask" / f"{k:06d}.pgm" for k in range(len(frames))]
        if all(p.is_file() for p in paths):
            gt_masks = [read_mask_pgm(p) for p in paths]

    def flow_source(i: int, j: int):
        p = _flow_path(root, i, j)
        return read_flo(p) if p.is_file() else None

    return Dataset(frames, intrinsics, gt_poses, gt_masks, depth_scale, root.name, flow_source)


def write_tum_sequence(ds: Dataset, root, flow_radius: int = 5) -> Path:
    """Write ``ds`` in the TUM layout, with prior flows for all pairs within ``flow_radius``."""
    root = ensure_dir(root)
    for sub in ("rgb", "depth", "flow", "mask", "gt_mask"):
        ensure_dir(root / sub)
    rgb_lines, depth_lines, gt_lines = ["# timestamp filename\n"], ["# timestamp filename\n"], []
    n = len(ds)
    for k, f in enumerate(ds.frames):
        name = f"{f.timestamp:.6f}.png"
        write_color_png(root / "rgb" / name, f.color)
        write_depth_png(root / "depth" / name, f.depth, TUM_DEPTH_SCALE)
        rgb_lines.append(f"{f.timestamp:.6f} rgb/{name}\n")
        depth_lines.append(f"{f.timestamp:.6f} depth/{name}\n")
        if ds.gt_poses is not None:
            gt_lines.append(format_tum_line(f.timestamp, ds.gt_poses[k]) + "\n")
        if f.semantic_mask is not None:
            write_mask_pgm(root / "mask" / f"{k:06d}.pgm", f.semantic_mask)
        if ds.gt_object_masks is not None:
            write_mask_pgm(root / "gt_mask" / f"{k:06d}.pgm", ds.gt_object_masks[k])
        for j in range(max(0, k - flow_radius), min(n, k + flow_radius + 1)):
            if j == k:
                continue
            flow = ds.flow(k, j)
            if flow is not None:
                write_flo(_flow_path(root, k, j), flow)
    (root / "rgb.txt").write_text("".join(rgb_lines))
    (root / "depth.txt").write_text("".join(depth_lines))
    if gt_lines:
        (root / "groundtruth.txt").write_text("# timestamp tx ty tz qx qy qz qw\n" + "".join(gt_lines))
    write_intrinsics(root / "intrinsics.txt", ds.intrinsics)
    return root
