"""Hybrid static/dynamic Gaussian scene representation.

Static Gaussians carry fixed attributes. Dynamic Gaussians store one center
per keyframe (linearly interpolated in time) and a K-component temporal
mixture that drives their opacity and blends K control rotations.

Parameters live in struct-of-arrays form, unconstrained (logits/logs), and
in float64 so analytic gradients can be checked by finite differences.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import BadHeader, BadMagic, NonContiguousKeyframe, TruncatedFile
from .lie import quat_to_rotmat

log = logging.getLogger(__name__)

SQRT_2PI = math.sqrt(2.0 * math.pi)
FIELD_MAGIC = b"F4DG"
FIELD_VERSION = 1
DEGENERATE_BLEND = 1e-12


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def normal_pdf(x, mu, tau):
    z = (x - mu) / tau
    return np.exp(-0.5 * z * z) / (tau * SQRT_2PI)


def covariance_of(log_scale, quaternion) -> np.ndarray:
    """``R diag(exp(2 s)) R^T`` for one or many Gaussians."""
    R = quat_to_rotmat(quaternion)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=float))
    return (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class StaticGaussian:
    center: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray


@dataclass
class DynamicGaussian:
    """Single dynamic Gaussian; ``keyframe_centers`` maps keyframe index to center."""

    keyframe_centers: dict
    birth_keyframe: int
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray
    weight_logits: np.ndarray
    means: np.ndarray
    log_tau: np.ndarray
    control_quats: np.ndarray
    amplitude_log: float

    @property
    def K(self) -> int:
        return len(self.weight_logits)


def normalize_time(t: float, normalizer=(0.0, 1.0)) -> float:
    t0, t1 = normalizer
    span = t1 - t0
    if span <= 0:
        return 0.0
    return float(np.clip((t - t0) / span, 0.0, 1.0))


def position_at(g: DynamicGaussian, t: float, keyframe_times) -> np.ndarray:
    """Linear interpolation between bracketing keyframe centers, clamped at the ends."""
    ks = sorted(g.keyframe_centers)
    times = np.array([keyframe_times[k] for k in ks], dtype=float)
    if len(ks) == 1 or t <= times[0]:
        return np.array(g.keyframe_centers[ks[0]], dtype=float)
    if t >= times[-1]:
        return np.array(g.keyframe_centers[ks[-1]], dtype=float)
    j = int(np.searchsorted(times, t, side="right")) - 1
    lam = (t - times[j]) / (times[j + 1] - times[j])
    xa = np.asarray(g.keyframe_centers[ks[j]], dtype=float)
    xb = np.asarray(g.keyframe_centers[ks[j + 1]], dtype=float)
    return (1.0 - lam) * xa + lam * xb


def gmm_activation(g: DynamicGaussian, t_hat: float) -> float:
    w = softplus(np.asarray(g.weight_logits, dtype=float))
    tau = np.exp(np.asarray(g.log_tau, dtype=float))
    return float(np.sum(w * normal_pdf(t_hat, np.asarray(g.means, dtype=float), tau)))


def opacity_at(g: DynamicGaussian, t: float, normalizer=(0.0, 1.0)) -> float:
    act = gmm_activation(g, normalize_time(t, normalizer))
    return float(sigmoid(g.opacity_logit) * -np.expm1(-np.exp(g.amplitude_log) * act))


def rotation_at(g: DynamicGaussian, t: float, normalizer=(0.0, 1.0)) -> np.ndarray:
    t_hat = normalize_time(t, normalizer)
    w = softplus(np.asarray(g.weight_logits, dtype=float))
    a = w * normal_pdf(t_hat, np.asarray(g.means, float), np.exp(np.asarray(g.log_tau, float)))
    q = np.asarray(g.control_quats, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    sign = np.where(q @ q[0] >= 0, 1.0, -1.0)
    s = np.sum((a * sign)[:, None] * q, axis=0)
    n = np.linalg.norm(s)
    if n < DEGENERATE_BLEND:
        k = int(np.argmax(a))
        log.debug("degenerate rotation blend, using component %d", k)
        return sign[k] * q[k]
    return s / n


@dataclass
class DynamicState:
    """Dynamic Gaussians evaluated at one timestamp, with what backward needs."""

    positions: np.ndarray
    opacity: np.ndarray
    quats: np.ndarray
    slot_a: np.ndarray
    slot_b: np.ndarray
    lam: np.ndarray
    t_hat: float
    cache: dict = dc_field(default_factory=dict, repr=False)


class GaussianField:
    """Static and dynamic Gaussian sets plus the keyframe timeline."""

    STATIC_KEYS = ("means", "log_scales", "quats", "opacity_logits", "colors")
    DYNAMIC_KEYS = (
        "centers", "log_scales", "opacity_logits", "colors", "weight_logits",
        "gmm_means", "log_tau", "control_quats", "amplitude_log",
    )

    def __init__(self, K: int = 3, time_normalizer=(0.0, 1.0), temporal_model: str = "gmm"):
        if K < 1:
            raise ValueError("K must be at least 1")
        self.K = K
        self.time_normalizer = tuple(float(x) for x in time_normalizer)
        self.temporal_model = temporal_model
        self.keyframe_times: list[float] = []
        self.static = {
            "means": np.zeros((0, 3)),
            "log_scales": np.zeros((0, 3)),
            "quats": np.zeros((0, 4)),
            "opacity_logits": np.zeros(0),
            "colors": np.zeros((0, 3)),
        }
        self.static_birth = np.zeros(0, dtype=int)
        self.dynamic = {
            "centers": np.zeros((0, 0, 3)),
            "log_scales": np.zeros((0, 3)),
            "opacity_logits": np.zeros(0),
            "colors": np.zeros((0, 3)),
            "weight_logits": np.zeros((0, K)),
            "gmm_means": np.zeros((0, K)),
            "log_tau": np.zeros((0, K)),
            "control_quats": np.zeros((0, K, 4)),
            "amplitude_log": np.zeros(0),
        }
        self.dynamic_birth = np.zeros(0, dtype=int)

    # -- bookkeeping -----------------------------------------------------

    @property
    def n_static(self) -> int:
        return len(self.static["opacity_logits"])

    @property
    def n_dynamic(self) -> int:
        return len(self.dynamic["opacity_logits"])

    @property
    def n_keyframes(self) -> int:
        return len(self.keyframe_times)

    def copy(self) -> "GaussianField":
        out = GaussianField(self.K, self.time_normalizer, self.temporal_model)
        out.keyframe_times = list(self.keyframe_times)
        out.static = {k: v.copy() for k, v in self.static.items()}
        out.dynamic = {k: v.copy() for k, v in self.dynamic.items()}
        out.static_birth = self.static_birth.copy()
        out.dynamic_birth = self.dynamic_birth.copy()
        return out

    def normalize_time(self, t: float) -> float:
        return normalize_time(t, self.time_normalizer)

    def add_keyframe_slot(self, k: int, t_k: float, init_centers=None) -> None:
        """Open slot ``k`` for every dynamic Gaussian (copying slot k-1 by default)."""
        if k != self.n_keyframes:
            raise NonContiguousKeyframe(f"expected keyframe {self.n_keyframes}, got {k}")
        if self.keyframe_times and t_k <= self.keyframe_times[-1]:
            raise NonContiguousKeyframe("keyframe times must increase")
        self.keyframe_times.append(float(t_k))
        c = self.dynamic["centers"]
        new = np.full((c.shape[0], 1, 3), np.nan)
        if c.shape[1] > 0:
            new[:, 0] = c[:, -1]
        if init_centers is not None:
            new[:, 0] = init_centers
        self.dynamic["centers"] = np.concatenate([c, new], axis=1)

    def add_static(self, means, log_scales, colors, opacity_logits, quats=None, birth: int = 0) -> None:
        n = len(means)
        if n == 0:
            return
        quats = np.tile(IDENTITY_QUAT, (n, 1)) if quats is None else np.asarray(quats, float)
        new = {
            "means": np.asarray(means, float).reshape(n, 3),
            "log_scales": np.asarray(log_scales, float).reshape(n, 3),
            "quats": quats.reshape(n, 4),
            "opacity_logits": np.broadcast_to(np.asarray(opacity_logits, float), (n,)).copy(),
            "colors": np.asarray(colors, float).reshape(n, 3),
        }
        for k in self.STATIC_KEYS:
            self.static[k] = np.concatenate([self.static[k], new[k]])
        self.static_birth = np.concatenate([self.static_birth, np.full(n, birth, dtype=int)])

    def add_dynamic(self, centers, birth: int, log_scales, colors, opacity_logits,
                    weight_logits, gmm_means, log_tau, amplitude_log, control_quats=None) -> None:
        """Append Gaussians born at keyframe ``birth`` with center ``centers`` there."""
        n = len(centers)
        if n == 0:
            return
        K, nk = self.K, self.n_keyframes
        if not 0 <= birth < nk:
            raise NonContiguousKeyframe(f"birth keyframe {birth} outside 0..{nk - 1}")
        slots = np.full((n, nk, 3), np.nan)
        slots[:, birth:] = np.asarray(centers, float).reshape(n, 1, 3)
        if control_quats is None:
            control_quats = np.tile(IDENTITY_QUAT, (n, K, 1))
        new = {
            "centers": slots,
            "log_scales": np.asarray(log_scales, float).reshape(n, 3),
            "opacity_logits": np.broadcast_to(np.asarray(opacity_logits, float), (n,)).copy(),
            "colors": np.asarray(colors, float).reshape(n, 3),
            "weight_logits": np.broadcast_to(np.asarray(weight_logits, float), (n, K)).copy(),
            "gmm_means": np.broadcast_to(np.asarray(gmm_means, float), (n, K)).copy(),
            "log_tau": np.broadcast_to(np.asarray(log_tau, float), (n, K)).copy(),
            "control_quats": np.broadcast_to(np.asarray(control_quats, float), (n, K, 4)).copy(),
            "amplitude_log": np.broadcast_to(np.asarray(amplitude_log, float), (n,)).copy(),
        }
        if self.dynamic["centers"].shape[1] != nk:
            self.dynamic["centers"] = np.full((0, nk, 3), np.nan)
        for k in self.DYNAMIC_KEYS:
            self.dynamic[k] = np.concatenate([self.dynamic[k], new[k]])
        self.dynamic_birth = np.concatenate([self.dynamic_birth, np.full(n, birth, dtype=int)])

    def remove_static(self, drop) -> None:
        keep = ~np.asarray(drop, bool)
        for k in self.STATIC_KEYS:
            self.static[k] = self.static[k][keep]
        self.static_birth = self.static_birth[keep]

    def remove_dynamic(self, drop) -> None:
        keep = ~np.asarray(drop, bool)
        for k in self.DYNAMIC_KEYS:
            self.dynamic[k] = self.dynamic[k][keep]
        self.dynamic_birth = self.dynamic_birth[keep]

    def static_gaussian(self, i: int) -> StaticGaussian:
        s = self.static
        return StaticGaussian(s["means"][i].copy(), s["log_scales"][i].copy(), s["quats"][i].copy(),
                              float(s["opacity_logits"][i]), s["colors"][i].copy())

    def dynamic_gaussian(self, i: int) -> DynamicGaussian:
        d = self.dynamic
        b = int(self.dynamic_birth[i])
        centers = {k: d["centers"][i, k].copy() for k in range(b, self.n_keyframes)}
        return DynamicGaussian(
            centers, b, d["log_scales"][i].copy(), float(d["opacity_logits"][i]), d["colors"][i].copy(),
            d["weight_logits"][i].copy(), d["gmm_means"][i].copy(), d["log_tau"][i].copy(),
            d["control_quats"][i].copy(), float(d["amplitude_log"][i]),
        )

    # -- time model ------------------------------------------------------

    def interpolation(self, t: float):
        """Bracketing keyframe slots and blend factor for every dynamic Gaussian."""
        kt = np.asarray(self.keyframe_times, dtype=float)
        last = len(kt) - 1
        birth = self.dynamic_birth
        n = len(birth)
        if n == 0 or last < 0:
            z = np.zeros(n, dtype=int)
            return z, z, np.zeros(n)
        tc = np.clip(t, kt[birth], kt[last])
        k = np.searchsorted(kt, tc, side="right") - 1
        k = np.clip(k, birth, max(last - 1, 0))
        single = birth >= last
        a = np.where(single, last, k)
        b = np.where(single, last, np.minimum(k + 1, last))
        span = kt[b] - kt[a]
        lam = np.where(span > 0, (tc - kt[a]) / np.where(span > 0, span, 1.0), 0.0)
        return a, b, lam

    def dynamic_state(self, t: float) -> DynamicState:
        d = self.dynamic
        n = self.n_dynamic
        a, b, lam = self.interpolation(t)
        idx = np.arange(n)
        if n:
            pos = (1.0 - lam)[:, None] * d["centers"][idx, a] + lam[:, None] * d["centers"][idx, b]
        else:
            pos = np.zeros((0, 3))
        t_hat = self.normalize_time(t)
        sig = sigmoid(d["opacity_logits"])
        qraw = d["control_quats"]
        qnorm = np.linalg.norm(qraw, axis=-1, keepdims=True)
        qn = qraw / np.where(qnorm > 0, qnorm, 1.0)
        cache = {"sig": sig, "qn": qn, "qnorm": qnorm}
        if self.temporal_model == "constant":
            cache["mode"] = "constant"
            return DynamicState(pos, sig.copy(), qn[:, 0].copy(), a, b, lam, t_hat, cache)

        w = softplus(d["weight_logits"])
        tau = np.exp(d["log_tau"])
        N = normal_pdf(t_hat, d["gmm_means"], tau)
        act_k = w * N
        act = act_k.sum(axis=1)
        A = np.exp(d["amplitude_log"])
        e = np.exp(-A * act)
        m = 1.0 - e
        opacity = sig * m

        sign = np.where(np.einsum("nkc,nc->nk", qn, qn[:, 0]) >= 0, 1.0, -1.0)
        s = np.einsum("nk,nkc->nc", act_k * sign, qn)
        ns = np.linalg.norm(s, axis=1)
        degenerate = ns < DEGENERATE_BLEND
        quats = s / np.where(degenerate, 1.0, ns)[:, None]
        if degenerate.any():
            kstar = np.argmax(act_k, axis=1)
            dg = np.nonzero(degenerate)[0]
            quats[dg] = sign[dg, kstar[dg], None] * qn[dg, kstar[dg]]
        cache.update(mode="gmm", w=w, tau=tau, N=N, act_k=act_k, act=act, A=A, e=e, m=m,
                     sign=sign, s=s, ns=ns, degenerate=degenerate)
        return DynamicState(pos, opacity, quats, a, b, lam, t_hat, cache)

    def dynamic_backward(self, state: DynamicState, g_pos, g_opacity, g_quat) -> dict:
        """Chain gradients w.r.t. evaluated position/opacity/rotation to parameters."""
        d = self.dynamic
        n = self.n_dynamic
        c = state.cache
        grads = {k: np.zeros_like(v) for k, v in d.items() if k in ("centers", "opacity_logits",
                 "weight_logits", "gmm_means", "log_tau", "control_quats", "amplitude_log")}
        if n == 0:
            return grads
        idx = np.arange(n)
        gc = grads["centers"]
        np.add.at(gc, (idx, state.slot_a), (1.0 - state.lam)[:, None] * g_pos)
        np.add.at(gc, (idx, state.slot_b), state.lam[:, None] * g_pos)

        sig, qn, qnorm = c["sig"], c["qn"], c["qnorm"]
        g_qn = np.zeros_like(qn)
        if c["mode"] == "constant":
            grads["opacity_logits"] = g_opacity * sig * (1.0 - sig)
            g_qn[:, 0] = g_quat
        else:
            m, A, e, act = c["m"], c["A"], c["e"], c["act"]
            grads["opacity_logits"] = g_opacity * m * sig * (1.0 - sig)
            g_m = g_opacity * sig
            g_act = g_m * A * e
            grads["amplitude_log"] = g_m * A * act * e
            g_actk = np.repeat(g_act[:, None], self.K, axis=1)

            sign, s, ns, degenerate = c["sign"], c["s"], c["ns"], c["degenerate"]
            q = state.quats
            ok = ~degenerate
            g_s = np.zeros_like(s)
            g_s[ok] = (g_quat[ok] - q[ok] * np.sum(q[ok] * g_quat[ok], axis=1, keepdims=True)) / ns[ok, None]
            g_actk += sign * np.einsum("nkc,nc->nk", qn, g_s)
            g_qn += (c["act_k"] * sign)[:, :, None] * g_s[:, None, :]
            if degenerate.any():
                kstar = np.argmax(c["act_k"], axis=1)
                for i in np.nonzero(degenerate)[0]:
                    g_qn[i, kstar[i]] += sign[i, kstar[i]] * g_quat[i]

            w, tau, N = c["w"], c["tau"], c["N"]
            g_w = g_actk * N
            g_N = g_actk * w
            grads["weight_logits"] = g_w * sigmoid(d["weight_logits"])
            diff = state.t_hat - d["gmm_means"]
            grads["gmm_means"] = g_N * N * diff / tau**2
            grads["log_tau"] = g_N * N * (diff**2 / tau**2 - 1.0)
        radial = np.sum(qn * g_qn, axis=-1, keepdims=True)
        grads["control_quats"] = (g_qn - qn * radial) / np.where(qnorm > 0, qnorm, 1.0)
        return grads


# -- serialization -------------------------------------------------------
#
# Layout (little-endian), see docs/FIELD_FORMAT.md:
#   "F4DG" | u32 version | u32 n_static | u32 n_dynamic | u32 K | u32 n_keyframes
#   f64 t_min | f64 t_max | f64 keyframe_times[n_keyframes]
#   static block:  n_static x 14 f32 (center3, log_scale3, quat4 wxyz, opacity_logit, color3)
#   dynamic block: per Gaussian u32 birth | u32 n_centers | f32 centers[n_centers*3]
#                  | f32 log_scale3, opacity_logit, color3, amplitude_log
#                  | K x f32 (weight_logit, mean, log_tau, quat4 wxyz)

_HEADER = struct.Struct("<4sIIIII")


def write_field(path, fld: GaussianField) -> None:
    parts = [_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, fld.n_static, fld.n_dynamic, fld.K, fld.n_keyframes)]
    parts.append(np.array(fld.time_normalizer, dtype="<f8").tobytes())
    parts.append(np.array(fld.keyframe_times, dtype="<f8").tobytes())
    s = fld.static
    block = np.concatenate(
        [s["means"], s["log_scales"], s["quats"], s["opacity_logits"][:, None], s["colors"]], axis=1
    ).astype("<f4")
    parts.append(block.tobytes())
    d = fld.dynamic
    for i in range(fld.n_dynamic):
        b = int(fld.dynamic_birth[i])
        centers = d["centers"][i, b:]
        parts.append(struct.pack("<II", b, len(centers)))
        attrs = np.concatenate([
            centers.reshape(-1), d["log_scales"][i], [d["opacity_logits"][i]], d["colors"][i],
            [d["amplitude_log"][i]],
            np.concatenate([d["weight_logits"][i][:, None], d["gmm_means"][i][:, None],
                            d["log_tau"][i][:, None], d["control_quats"][i]], axis=1).reshape(-1),
        ])
        parts.append(attrs.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFile(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype, count=count).astype(float)


def read_field(path) -> GaussianField:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if len(raw) < 4 or raw[:4] != FIELD_MAGIC:
        raise BadMagic(f"{path}: not a Gaussian field file")
    _, version, ns, nd, K, nk = _HEADER.unpack(r.take(_HEADER.size))
    if version != FIELD_VERSION:
        raise BadHeader(f"{path}: unsupported version {version}")
    normalizer = r.array("<f8", 2)
    fld = GaussianField(K, tuple(normalizer))
    fld.keyframe_times = list(r.array("<f8", nk))
    block = r.array("<f4", ns * 14).reshape(ns, 14)
    fld.static = {
        "means": block[:, 0:3].copy(),
        "log_scales": block[:, 3:6].copy(),
        "quats": block[:, 6:10].copy(),
        "opacity_logits": block[:, 10].copy(),
        "colors": block[:, 11:14].copy(),
    }
    fld.static_birth = np.zeros(ns, dtype=int)
    cols = {k: [] for k in GaussianField.DYNAMIC_KEYS}
    births = []
    for _ in range(nd):
        birth, nc = struct.unpack("<II", r.take(8))
        if birth + nc != nk:
            raise BadHeader(f"{path}: dynamic Gaussian slots {birth}+{nc} != {nk}")
        v = r.array("<f4", nc * 3 + 8 + 7 * K)
        centers = np.full((nk, 3), np.nan)
        centers[birth:] = v[: nc * 3].reshape(nc, 3)
        rest = v[nc * 3:]
        gmm = rest[8:].reshape(K, 7)
        cols["centers"].append(centers)
        cols["log_scales"].append(rest[0:3])
        cols["opacity_logits"].append(rest[3])
        cols["colors"].append(rest[4:7])
        cols["amplitude_log"].append(rest[7])
        cols["weight_logits"].append(gmm[:, 0])
        cols["gmm_means"].append(gmm[:, 1])
        cols["log_tau"].append(gmm[:, 2])
        cols["control_quats"].append(gmm[:, 3:7])
        births.append(birth)
    if nd:
        fld.dynamic = {k: np.array(v, dtype=float) for k, v in cols.items()}
    else:
        fld.dynamic["centers"] = np.zeros((0, nk, 3))
    fld.dynamic_birth = np.array(births, dtype=int)
    if r.pos != len(raw):
        raise BadHeader(f"{path}: {len(raw) - r.pos} trailing bytes")
    return fld
