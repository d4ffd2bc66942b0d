"""Benchmark the compiled kernels against the numpy fallback.

    python -m fruitvox.bench [--grid 128] [--points 393216] [--repeats 5]

Times the three hot kernels at training-iteration sizes, plus one full
training iteration through the public pipeline, for every available backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import field, kernels, render, train
from .cameras import look_at_camera
from .scenegen import PosedFrame


def _time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _train_iteration(grid, frames, cfg):
    def run():
        train.train(frames, cfg, grid=grid)

    return run


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--grid", type=int, default=128)
    parser.add_argument("--points", type=int, default=4096 * 96)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    res = (args.grid,) * 3
    n = args.grid**3
    values = rng.normal(size=(n, 5))
    buf = np.zeros((n, 5))
    pts = rng.random((args.points, 3))
    upstream = rng.normal(size=(args.points, 5))
    grad = rng.normal(size=(n, 5))
    m = np.zeros((n, 5))
    v = np.zeros((n, 5))
    lo, hi = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)

    grid = field.init_grid(64)
    cam = look_at_camera((0.5, 0.5, -0.8), (0.5, 0.5, 0.5), 80, 64, 64)
    rgb, prob = render.render_image(grid, cam, k=32)
    frame = PosedFrame(cam, rgb.astype(np.float32), (prob > 0.5).astype(np.uint8))
    cfg = train.TrainConfig(iterations=1, rays_per_batch=4096, samples_per_ray=96,
                            learning_rate=1e-2)

    backends = kernels.available_backends()
    print(f"available backends: {', '.join(backends)}")
    print(f"grid {args.grid}^3, {args.points} sample points, best of {args.repeats}\n")
    header = f"{'kernel':<22}" + "".join(f"{b:>14}" for b in backends)
    print(header)
    print("-" * len(header))

    rows = {
        "trilinear_gather": lambda: kernels.trilinear_gather(values, res, lo, hi, pts),
        "trilinear_scatter": lambda: kernels.trilinear_scatter(buf, res, lo, hi, pts, upstream),
        "adam_step": lambda: kernels.adam_step(values, grad, m, v, 1, 1e-3, 0.9, 0.999, 1e-8),
        "train_iteration": _train_iteration(grid, [frame], cfg),
    }
    timings = {}
    for name, fn in rows.items():
        cells = []
        for backend in backends:
            with kernels.use_backend(backend):
                t = _time(fn, args.repeats)
            timings[(name, backend)] = t
            cells.append(f"{t * 1e3:>11.2f} ms")
        print(f"{name:<22}" + "".join(f"{c:>14}" for c in cells))

    if len(backends) == 2:
        print()
        for name in rows:
            a = timings[(name, backends[0])]
            b = timings[(name, backends[1])]
            print(f"{name:<22} speedup {a / b:>6.2f}x ({backends[1]} vs {backends[0]})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
