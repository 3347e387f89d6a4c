"""Command-line entry point: ``flowsplat {synth,run,decompose,render,eval}``.

Exit codes: 0 success, 1 usage or configuration error, 2 bad input data.
Heavy modules are imported inside the commands so that ``--deterministic``
can pin the BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowsplat", description="Flow-guided dynamic Gaussian splatting SLAM.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic sequence in the TUM layout")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--flow-radius", type=int, default=5, help="write prior flows for pairs this far apart")

    r = sub.add_parser("run", help="run the SLAM pipeline")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    r.add_argument("--seed", type=int)
    r.add_argument("--deterministic", action="store_true")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    d = sub.add_parser("decompose", help="split one flow field into camera motion and a dynamic mask")
    d.add_argument("--flow", required=True, help=".flo file (pixels of the current frame, to the previous)")
    d.add_argument("--depth", required=True, help="16-bit depth PNG of the current frame")
    d.add_argument("--mask", help="optional semantic mask PGM")
    d.add_argument("--intrinsics", required=True)
    d.add_argument("--depth-scale", type=float, default=5000.0)
    d.add_argument("-o", "--output", default=".", help="directory for dynamic_mask.pgm and twist.txt")
    d.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="motion.* overrides")

    q = sub.add_parser("render", help="render a stored Gaussian field")
    q.add_argument("--field", required=True)
    q.add_argument("--pose", required=True, help="4x4 world-to-camera matrix or one TUM line")
    q.add_argument("--time", type=float, required=True)
    q.add_argument("--intrinsics", required=True)
    q.add_argument("-o", "--output", required=True)
    q.add_argument("--depth-output", help="optional 16-bit depth PNG")

    e = sub.add_parser("eval", help="score a trajectory and optionally renderings")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--renders")
    e.add_argument("--refs")
    e.add_argument("--tolerance", type=float, default=0.02, help="timestamp association tolerance (s)")
    e.add_argument("-o", "--output", help="directory for report.json and metrics.csv")
    return p


# -- commands -------------------------------------------------------------------


def _config(path, overrides, seed):
    from .config import load_config

    cfg = load_config(path, overrides)
    if seed is not None:
        cfg.seed = seed
        cfg.synth.seed = seed
    return cfg.validate()


def cmd_synth(args) -> int:
    from .data.synthetic import generate_synthetic
    from .data.tum import write_tum_sequence

    cfg = _config(args.config, args.set, args.seed)
    ds = generate_synthetic(cfg.synth)
    root = write_tum_sequence(ds, args.output, flow_radius=args.flow_radius)
    print(f"wrote {len(ds)} frames to {root}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import run_slam

    cfg = _config(args.config, args.set, args.seed)
    if args.output:
        cfg.output_dir = args.output
    if args.deterministic:
        cfg.deterministic = True
    rep = run_slam(cfg).report
    if rep.ate_rmse_cm is not None:
        print(f"ate_rmse_cm {rep.ate_rmse_cm:.6f}")
    print(f"psnr_mean_db {rep.psnr_mean_db:.4f}")
    print(f"ssim_mean {rep.ssim_mean:.4f}")
    if rep.psnr_dynamic_mean_db is not None:
        print(f"psnr_dynamic_mean_db {rep.psnr_dynamic_mean_db:.4f}")
    print(f"output {cfg.output_dir}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    from pathlib import Path

    from .config import PipelineConfig, apply_override
    from .data.codecs import ensure_dir, read_depth_png, read_flo, read_intrinsics, read_mask_pgm, write_mask_pgm
    from .lie import Pose
    from .motion import decompose

    cfg = PipelineConfig()
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        apply_override(cfg, key if key.startswith("motion.") else "motion." + key, value)
    cfg.motion.__post_init__()
    flow = read_flo(args.flow)
    depth = read_depth_png(args.depth, args.depth_scale)
    intr = read_intrinsics(args.intrinsics)
    semantic = read_mask_pgm(args.mask) if args.mask else None
    res = decompose(flow, depth, Pose.identity(), intr, cfg.motion, semantic)
    out = ensure_dir(args.output)
    write_mask_pgm(Path(out) / "dynamic_mask.pgm", res.mask_dynamic)
    line = " ".join(f"{x + 0.0:.12g}" for x in res.twist_refined)
    (Path(out) / "twist.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


def cmd_render(args) -> int:
    from .data.codecs import read_intrinsics, read_pose_file, write_color_png, write_depth_png
    from .field import read_field
    from .render import render

    fld = read_field(args.field)
    pose = read_pose_file(args.pose)
    intr = read_intrinsics(args.intrinsics)
    out = render(fld, pose, intr, args.time)
    write_color_png(args.output, out.color)
    if args.depth_output:
        write_depth_png(args.depth_output, out.depth)
    return EXIT_OK


def cmd_eval(args) -> int:
    from pathlib import Path

    import numpy as np

    from .data.codecs import ensure_dir, read_color_png, read_trajectory_tum
    from .data.tum import associate
    from .errors import DataError, LengthMismatch
    from .metrics import psnr, ssim, translation_errors

    est_t, est_p = read_trajectory_tum(args.est)
    gt_t, gt_p = read_trajectory_tum(args.gt)
    pairs = associate(est_t, gt_t, args.tolerance)
    if len(pairs) < 2:
        raise LengthMismatch(f"only {len(pairs)} estimated poses match ground-truth timestamps")
    errors = translation_errors([est_p[i] for i, _ in pairs], [gt_p[j] for _, j in pairs]) * 100.0
    ate = float(np.sqrt(np.mean(errors**2)))
    rows = [{"frame": i, "timestamp": est_t[i], "ate_cm": float(err), "psnr_db": None, "ssim": None}
            for (i, _), err in zip(pairs, errors)]

    report = {"ate_rmse_cm": ate, "translation_errors_cm": [float(e) for e in errors],
              "n_matched": len(pairs)}
    if bool(args.renders) != bool(args.refs):
        raise UsageError("--renders and --refs must be given together")
    if args.renders:
        renders = sorted(Path(args.renders).glob("*.png"))
        if not renders:
            raise DataError(f"no PNG renders in {args.renders}")
        scores = []
        for k, path in enumerate(renders):
            ref = Path(args.refs) / path.name
            if not ref.is_file():
                raise DataError(f"missing reference image {ref}")
            a, b = read_color_png(path), read_color_png(ref)
            scores.append((psnr(a, b), ssim(a, b)))
            if k < len(rows):
                rows[k]["psnr_db"], rows[k]["ssim"] = scores[-1]
        report["psnr_mean_db"] = float(np.mean([s[0] for s in scores]))
        report["ssim_mean"] = float(np.mean([s[1] for s in scores]))

    print(f"ate_rmse_cm {ate:.6f}")
    if "psnr_mean_db" in report:
        print(f"psnr_mean_db {report['psnr_mean_db']:.4f}")
        print(f"ssim_mean {report['ssim_mean']:.4f}")
    if args.output:
        out = ensure_dir(args.output)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        fmt = lambda x: "" if x is None else f"{x:.6f}"  # noqa: E731
        lines = ["frame,timestamp,ate_cm,psnr_db,ssim,decomp_ms,track_ms,map_ms"]
        lines += [f"{r['frame']},{r['timestamp']:.6f},{fmt(r['ate_cm'])},{fmt(r['psnr_db'])},{fmt(r['ssim'])},,,"
                  for r in rows]
        (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "decompose": cmd_decompose, "render": cmd_render,
            "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "deterministic", False):
        for var in _THREAD_VARS:
            os.environ[var] = "1"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .errors import ConfigError, DataError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"flowsplat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"flowsplat {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
