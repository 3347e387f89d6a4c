"""The SLAM frame loop and its evaluation.

Per frame: decompose the prior flow into camera motion and a dynamic mask,
track the pose against the static Gaussians, and run mapping on keyframes.
After the loop an optional colour-refinement pass runs over all keyframes,
then every frame is rendered at its estimated pose and scored.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import SYNTHETIC, PipelineConfig, dump_config
from .data.codecs import ensure_dir, read_intrinsics, write_color_png, write_trajectory_tum
from .data.dataset import Dataset
from .data.synthetic import generate_synthetic
from .data.tum import load_tum_sequence
from .errors import DataError, EmptyInput
from .field import write_field
from .lie import Pose
from .mapping import Mapper, keyframe_decision
from .metrics import psnr, ssim, translation_errors
from .motion import decompose
from .render import render
from .tracking import track_frame

log = logging.getLogger(__name__)

CSV_HEADER = "frame,timestamp,ate_cm,psnr_db,ssim,decomp_ms,track_ms,map_ms"


@dataclass
class FrameRecord:
    frame: int
    timestamp: float
    keyframe: bool
    track_iterations: int
    track_loss: float
    inlier_ratio: float
    mask_fraction: float
    decomp_ms: float = 0.0
    track_ms: float = 0.0
    map_ms: float = 0.0
    ate_cm: float | None = None
    psnr_db: float | None = None
    ssim: float | None = None
    psnr_dynamic_db: float | None = None


@dataclass
class EvaluationReport:
    n_frames: int
    n_keyframes: int
    n_static: int
    n_dynamic: int
    ate_rmse_cm: float | None
    translation_errors_cm: list | None
    psnr_mean_db: float
    ssim_mean: float
    psnr_dynamic_mean_db: float | None
    per_frame: list = field(default_factory=list)
    runtime_ms: dict = field(default_factory=dict)
    fps: float = 0.0

    def deterministic_dict(self) -> dict:
        """Everything except wall-clock measurements."""
        d = asdict(self)
        d.pop("runtime_ms")
        d.pop("fps")
        for rec in d["per_frame"]:
            for key in ("decomp_ms", "track_ms", "map_ms"):
                rec.pop(key)
        return d


@dataclass
class RunResult:
    report: EvaluationReport
    poses: list
    mapper: Mapper
    dataset: Dataset
    output_dir: Path | None


def load_dataset(cfg: PipelineConfig) -> Dataset:
    intr = read_intrinsics(cfg.data.intrinsics) if cfg.data.intrinsics else None
    if cfg.data.source == SYNTHETIC:
        if cfg.synth.n_frames < 1:
            raise EmptyInput("synthetic sequence has no frames")
        ds = generate_synthetic(cfg.synth)
        if cfg.data.max_frames is not None:
            ds = _truncate(ds, cfg.data.max_frames)
        if intr is not None:
            ds.intrinsics = intr
    else:
        ds = load_tum_sequence(cfg.data.source, cfg.data.max_frames, cfg.data.association_tolerance,
                               cfg.data.depth_scale, intr)
    if len(ds) == 0:
        raise EmptyInput("dataset has no frames")
    if ds.intrinsics.shape != ds.frames[0].shape:
        raise DataError(f"intrinsics image size {ds.intrinsics.shape} differs from frames {ds.frames[0].shape}")
    return ds


def _truncate(ds: Dataset, n: int) -> Dataset:
    if n >= len(ds):
        return ds
    return Dataset(ds.frames[:n], ds.intrinsics, ds.gt_poses[:n] if ds.gt_poses else None,
                   ds.gt_object_masks[:n] if ds.gt_object_masks else None, ds.depth_scale, ds.name,
                   ds.flow_source)


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0


class SlamRunner:
    """Holds the state of one run; ``run`` executes the whole loop."""

    def __init__(self, cfg: PipelineConfig, ds: Dataset, snapshot_dir: Path | None = None):
        self.cfg = cfg.validate()
        self.ds = ds
        self.snapshot_dir = snapshot_dir
        self.intr = ds.intrinsics
        t0 = ds.frames[0].timestamp
        span = cfg.sequence_duration or (ds.frames[-1].timestamp - t0) or 1.0
        self.mapper = Mapper(self.intr, cfg.mapping, (t0, t0 + span), cfg.gmm_components,
                             cfg.temporal_model, cfg.seed)
        self.poses: list[Pose] = []
        self.records: list[FrameRecord] = []
        self.map_stats: list[dict] = []
        self.timing = {"decomposition": 0.0, "tracking": 0.0, "mapping": 0.0, "refinement": 0.0,
                       "evaluation": 0.0, "output": 0.0}

    def _semantic(self, k: int):
        m = self.ds.frames[k].semantic_mask if self.cfg.data.use_semantic_masks else None
        return None if m is None else np.asarray(m, bool)

    def _decompose(self, k: int):
        """Pose prior and dynamic mask for frame ``k``."""
        frame, cfg = self.ds.frames[k], self.cfg
        semantic = self._semantic(k)
        empty = np.zeros(frame.shape, bool)
        if k == 0:
            pose_init = Pose.identity()
            flow = self.ds.flow(0, 1) if len(self.ds) > 1 else None
            if cfg.use_motion_decomposition and flow is not None:
                res = decompose(flow, frame.depth, pose_init, self.intr, cfg.motion, semantic)
                return pose_init, res.mask_dynamic, res.inlier_ratio
            return pose_init, semantic if semantic is not None else empty, 1.0
        prev_pose = self.poses[-1]
        flow = frame.flow_to_prev if frame.flow_to_prev is not None else self.ds.flow(k, k - 1)
        if not cfg.use_motion_decomposition or flow is None:
            if flow is None and cfg.use_motion_decomposition:
                log.warning("frame %d: no flow to the previous frame, using the previous pose", k)
            return prev_pose, semantic if semantic is not None else empty, 1.0
        res = decompose(flow, frame.depth, prev_pose, self.intr, cfg.motion, semantic)
        return res.pose_init, res.mask_dynamic, res.inlier_ratio

    def step(self, k: int, last_kf: tuple[int, np.ndarray] | None) -> tuple[int, np.ndarray]:
        frame, cfg = self.ds.frames[k], self.cfg
        t0 = time.perf_counter()
        pose_init, mask, inlier_ratio = self._decompose(k)
        decomp_ms = _ms(t0)

        t0 = time.perf_counter()
        if k == 0 or self.mapper.field.n_static == 0:
            pose, iters, loss = pose_init, 0, 0.0
        else:
            tr = track_frame(self.mapper.field, frame.color, frame.depth, frame.timestamp, pose_init,
                             mask, self.intr, cfg.tracking)
            pose, iters, loss = tr.pose, tr.iterations, tr.loss
        track_ms = _ms(t0)
        self.poses.append(pose)

        last = k == len(self.ds) - 1
        is_kf = last_kf is None or last or keyframe_decision(mask, last_kf[1], k - last_kf[0], cfg.mapping)
        map_ms = 0.0
        if is_kf:
            t0 = time.perf_counter()
            prev_frame = last_kf[0] if last_kf is not None else None
            fwd = self.ds.flow(prev_frame, k) if prev_frame is not None else None
            bwd = self.ds.flow(k, prev_frame) if prev_frame is not None else None
            stats = self.mapper.add_keyframe(k, frame.timestamp, pose, frame.color, frame.depth, mask,
                                             flow_from_prev=fwd, flow_to_prev=bwd)
            map_ms = _ms(t0)
            self.map_stats.append(stats.as_dict())
            if self.snapshot_dir is not None:
                write_field(self.snapshot_dir / f"keyframe_{stats.keyframe:04d}.f4dg", self.mapper.field)
            last_kf = (k, mask)

        self.timing["decomposition"] += decomp_ms
        self.timing["tracking"] += track_ms
        self.timing["mapping"] += map_ms
        self.records.append(FrameRecord(k, frame.timestamp, is_kf, iters, float(loss), float(inlier_ratio),
                                        float(mask.mean()), decomp_ms, track_ms, map_ms))
        return last_kf

    def run_loop(self) -> None:
        last_kf = None
        for k in range(len(self.ds)):
            try:
                last_kf = self.step(k, last_kf)
            except DataError as exc:
                raise type(exc)(f"frame {k}: {exc}") from exc
        if self.cfg.color_refinement:
            t0 = time.perf_counter()
            self.mapper.refine_colors()
            self.timing["refinement"] += _ms(t0)

    def evaluate(self, render_dir: Path | None = None) -> EvaluationReport:
        t0 = time.perf_counter()
        ds, fld = self.ds, self.mapper.field
        errors = None
        if ds.gt_poses is not None and len(ds) >= 2:
            errors = translation_errors(self.poses, ds.gt_poses) * 100.0
        psnrs, ssims, dyn = [], [], []
        for k, frame in enumerate(ds.frames):
            out = render(fld, self.poses[k], self.intr, frame.timestamp, "both", self.cfg.render)
            img = np.clip(out.color, 0.0, 1.0)
            rec = self.records[k]
            rec.psnr_db = psnr(img, frame.color)
            rec.ssim = ssim(img, frame.color)
            psnrs.append(rec.psnr_db)
            ssims.append(rec.ssim)
            if ds.gt_object_masks is not None and ds.gt_object_masks[k].any():
                rec.psnr_dynamic_db = psnr(img, frame.color, ds.gt_object_masks[k])
                dyn.append(rec.psnr_dynamic_db)
            if errors is not None:
                rec.ate_cm = float(errors[k])
            if render_dir is not None:
                write_color_png(render_dir / f"{k:06d}.png", img)
        self.timing["evaluation"] += _ms(t0)
        loop_ms = self.timing["decomposition"] + self.timing["tracking"] + self.timing["mapping"]
        return EvaluationReport(
            n_frames=len(ds),
            n_keyframes=len(self.mapper.keyframes),
            n_static=fld.n_static,
            n_dynamic=fld.n_dynamic,
            ate_rmse_cm=float(np.sqrt(np.mean(errors**2))) if errors is not None else None,
            translation_errors_cm=[float(e) for e in errors] if errors is not None else None,
            psnr_mean_db=float(np.mean(psnrs)),
            ssim_mean=float(np.mean(ssims)),
            psnr_dynamic_mean_db=float(np.mean(dyn)) if dyn else None,
            per_frame=[asdict(r) for r in self.records],
            runtime_ms=dict(self.timing),
            fps=1000.0 * len(ds) / loop_ms if loop_ms > 0 else 0.0,
        )


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def write_outputs(runner: SlamRunner, report: EvaluationReport, out: Path, deterministic: bool) -> None:
    ds = runner.ds
    write_trajectory_tum(out / "trajectory.txt", ds.timestamps, runner.poses)
    if runner.cfg.write_snapshots:
        write_field(ensure_dir(out / "fields") / "final.f4dg", runner.mapper.field)
    with open(out / "stats.jsonl", "w") as fh:
        for s in runner.map_stats:
            fh.write(json.dumps(s, sort_keys=True) + "\n")
    body = report.deterministic_dict() if deterministic else asdict(report)
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    timing = {"runtime_ms": report.runtime_ms, "fps": report.fps,
              "per_frame_ms": [{k: r[k] for k in ("frame", "decomp_ms", "track_ms", "map_ms")}
                               for r in report.per_frame]}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    lines = [CSV_HEADER]
    for r in report.per_frame:
        lines.append(",".join([str(r["frame"]), f"{r['timestamp']:.6f}", _fmt(r["ate_cm"]), _fmt(r["psnr_db"]),
                               _fmt(r["ssim"]), f"{r['decomp_ms']:.3f}", f"{r['track_ms']:.3f}",
                               f"{r['map_ms']:.3f}"]))
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    (out / "config.txt").write_text(dump_config(runner.cfg))


def run_slam(cfg: PipelineConfig, write: bool = True, dataset: Dataset | None = None) -> RunResult:
    """Run the full pipeline; with ``write`` the artifacts go to ``cfg.output_dir``."""
    cfg.validate()
    ds = dataset if dataset is not None else load_dataset(cfg)
    if len(ds) == 0:
        raise EmptyInput("dataset has no frames")
    runner = SlamRunner(cfg, ds)
    out = None
    if write:
        out = ensure_dir(cfg.output_dir)
        if cfg.write_snapshots:
            runner.snapshot_dir = ensure_dir(out / "fields")
    runner.run_loop()
    render_dir = ensure_dir(out / "renders") if write and cfg.write_renders else None
    report = runner.evaluate(render_dir)
    if write:
        t0 = time.perf_counter()
        write_outputs(runner, report, out, cfg.deterministic)
        runner.timing["output"] += _ms(t0)
    return RunResult(report, runner.poses, runner.mapper, ds, out)
