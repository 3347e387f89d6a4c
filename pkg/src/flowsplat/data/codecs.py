"""File codecs: Middlebury .flo, binary PGM masks, TUM trajectories, PNG maps."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import BadHeader, BadMagic, DataError, LengthMismatch, TruncatedFile
from ..lie import Intrinsics, Pose, quat_to_rotmat, rotmat_to_quat
from ..motion import FlowField

FLO_MAGIC = b"PIEH"
FLO_INVALID = 1e9
TUM_DEPTH_SCALE = 5000.0


def write_flo(path, flow: FlowField) -> None:
    h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = flow.u
    data[..., 1] = flow.v
    data[~flow.valid] = np.float32(1e10)
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: header shorter than 12 bytes")
    if raw[:4] != FLO_MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 0 or h < 0:
        raise BadHeader(f"{path}: negative size {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, expected {need}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    valid = np.all(np.abs(data) <= FLO_INVALID, axis=-1)
    u = data[..., 0].astype(float)
    v = data[..., 1].astype(float)
    return FlowField(np.where(valid, u, 0.0), np.where(valid, v, 0.0), valid)


def write_mask_pgm(path, mask) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.where(mask, 255, 0).astype(np.uint8).tobytes())


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise BadHeader("PGM header ended early")
        try:
            tokens.append(int(raw[start:pos]))
        except ValueError as exc:
            raise BadHeader(f"bad PGM header token {raw[start:pos]!r}") from exc
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_mask_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise BadHeader(f"{path}: not a binary PGM")
    (w, h, maxval), pos = _pgm_tokens(raw[2:], 3)
    if maxval != 255:
        raise BadHeader(f"{path}: maxval {maxval}, expected 255")
    pos += 2
    body = raw[pos:pos + w * h]
    if len(body) < w * h:
        raise TruncatedFile(f"{path}: raster truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) != 0


def _fmt(x: float) -> str:
    s = f"{float(x) + 0.0:.9g}"
    return "0" if s == "-0" else s


def format_tum_line(timestamp: float, pose: Pose) -> str:
    """One trajectory line; the pose is exported camera-to-world."""
    c2w = pose.inverse()
    q = rotmat_to_quat(c2w.rotation)
    tx, ty, tz = c2w.translation
    vals = [tx, ty, tz, q[1], q[2], q[3], q[0]]
    return f"{timestamp:.9f} " + " ".join(_fmt(v) for v in vals)


def write_trajectory_tum(path, timestamps, poses) -> None:
    if len(timestamps) != len(poses):
        raise LengthMismatch(f"{len(timestamps)} timestamps vs {len(poses)} poses")
    lines = [format_tum_line(t, p) + "\n" for t, p in zip(timestamps, poses)]
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.writelines(lines)
    except OSError as exc:
        raise DataError(f"cannot write trajectory {path}: {exc}") from exc


def parse_tum_pose(values) -> Pose:
    """Camera-to-world ``tx ty tz qx qy qz qw`` to a world-to-camera pose."""
    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in values)
    c2w = Pose(quat_to_rotmat([qw, qx, qy, qz]), [tx, ty, tz])
    return c2w.inverse()


def read_trajectory_tum(path) -> tuple[list[float], list[Pose]]:
    stamps, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataError(f"{path}: expected 8 columns, got {len(parts)}")
        try:
            stamps.append(float(parts[0]))
            poses.append(parse_tum_pose(parts[1:]))
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
    return stamps, poses


def read_pose_file(path) -> Pose:
    """A 4x4 world-to-camera matrix, or a single TUM trajectory line."""
    try:
        rows = [
            [float(x) for x in line.split()]
            for line in Path(path).read_text().splitlines()
            if line.strip() and not line.lstrip().startswith("#")
        ]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if len(rows) == 4 and all(len(r) == 4 for r in rows):
        return Pose.from_matrix(np.array(rows))
    if len(rows) == 1 and len(rows[0]) in (7, 8):
        return parse_tum_pose(rows[0][-7:])
    raise DataError(f"{path}: not a 4x4 matrix or TUM pose line")


def read_intrinsics(path) -> Intrinsics:
    text = Path(path).read_text().split()
    if len(text) < 6:
        raise DataError(f"{path}: expected 'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(x) for x in text[:4])
        width, height = int(float(text[4])), int(float(text[5]))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return Intrinsics(fx, fy, cx, cy, width, height)


def write_intrinsics(path, intr: Intrinsics) -> None:
    Path(path).write_text(
        f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.width} {intr.height}\n"
    )


def read_depth_png(path, scale: float = TUM_DEPTH_SCALE) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im)
    if raw.ndim != 2:
        raise DataError(f"{path}: depth PNG must be single channel")
    return raw.astype(float) / scale


def write_depth_png(path, depth, scale: float = TUM_DEPTH_SCALE) -> None:
    d = np.clip(np.round(np.asarray(depth) * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(d).save(path)


def read_color_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def write_color_png(path, color) -> None:
    c = np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(c).save(path)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
