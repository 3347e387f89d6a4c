"""Compare the compiled and NumPy rasterizer backends.

Renders a seeded random scene through the full render + backward path with
each backend, checks that both agree, and prints median wall times.

    python3 benchmarks/bench_raster.py [--gaussians 2000] [--size 64] [--repeat 5]
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from flowsplat.field import GaussianField
from flowsplat.lie import Intrinsics, Pose
from flowsplat.render import RenderConfig, RenderContext, stack_adjoint
from flowsplat.render.backend import BACKENDS


def random_scene(n: int, seed: int) -> GaussianField:
    rng = np.random.default_rng(seed)
    fld = GaussianField()
    means = np.column_stack([rng.uniform(-0.6, 0.6, n), rng.uniform(-0.6, 0.6, n), rng.uniform(1.0, 2.0, n)])
    fld.add_static(means, np.log(rng.uniform(0.01, 0.05, (n, 3))), rng.uniform(0, 1, (n, 3)), 1.0, birth=0)
    return fld


def run_once(fld, intr, backend: str):
    cfg = RenderConfig(backend=backend)
    t0 = time.perf_counter()
    ctx = RenderContext(fld, Pose.identity(), intr, 0.0, "static", cfg)
    t1 = time.perf_counter()
    out = ctx.output
    adj = stack_adjoint(color=np.sign(out.color - 0.5), depth=np.ones_like(out.depth), alpha=np.ones_like(out.alpha))
    grads = ctx.backward(adj)
    t2 = time.perf_counter()
    return out, grads, t1 - t0, t2 - t1


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--gaussians", type=int, default=2000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    s = args.size
    intr = Intrinsics(0.9 * s, 0.9 * s, (s - 1) / 2, (s - 1) / 2, s, s)
    fld = random_scene(args.gaussians, args.seed)
    results = {}
    print(f"{args.gaussians} Gaussians, {s}x{s} image, median of {args.repeat}")
    print(f"{'backend':8s} {'forward ms':>11s} {'backward ms':>12s}")
    for name in sorted(BACKENDS):
        fwd, bwd = [], []
        for _ in range(args.repeat):
            out, grads, tf, tb = run_once(fld, intr, name)
            fwd.append(tf * 1e3)
            bwd.append(tb * 1e3)
        results[name] = (out, grads, statistics.median(fwd), statistics.median(bwd))
        print(f"{name:8s} {results[name][2]:11.1f} {results[name][3]:12.1f}")
    if {"python", "cython"} <= results.keys():
        a, b = results["python"], results["cython"]
        img_diff = np.max(np.abs(a[0].color - b[0].color))
        grad_diff = max(np.max(np.abs(a[1].static[k] - b[1].static[k])) for k in a[1].static)
        print(f"speedup forward {a[2] / b[2]:.1f}x, backward {a[3] / b[3]:.1f}x")
        print(f"max |image diff| {img_diff:.2e}, max |gradient diff| {grad_diff:.2e}")
    else:
        print("compiled backend not built; only the NumPy fallback was timed")


if __name__ == "__main__":
    main()
