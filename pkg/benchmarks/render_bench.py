"""Rasterizer throughput: compiled kernel vs pure-python fallback.

Usage: python benchmarks/render_bench.py [--n 100000] [--frames 20]
"""

import argparse
import time

from cagesplat.render import Camera, available_backends, render_frame
from cagesplat.scene import init_proxy_from_mesh, make_cylinder_mesh


def bench(scene, cam, backend, frames):
    render_frame(scene, cam, backend=backend)            # warmup
    t0 = time.perf_counter()
    for _ in range(frames):
        img, stats = render_frame(scene, cam, backend=backend)
    dt = time.perf_counter() - t0
    return frames / dt, stats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--frames", type=int, default=20)
    ap.add_argument("--width", type=int, default=640)
    ap.add_argument("--height", type=int, default=400)
    args = ap.parse_args()

    mesh = make_cylinder_mesh(0.012, 0.1, segments=64)
    scene = init_proxy_from_mesh(mesh, args.n, seed=3)
    cam = Camera.look_at(position=(0.0, -0.20, 0.04), target=(0.0, 0.0, 0.0),
                         width=args.width, height=args.height)

    print(f"{args.n} Gaussians at {args.width}x{args.height}")
    for backend in available_backends():
        frames = args.frames if backend == "cython" else max(2, args.frames // 10)
        fps, stats = bench(scene, cam, backend, frames)
        print(f"  {backend:7s}: {fps:6.2f} FPS  "
              f"(project {stats.project_ms:.1f} ms, sort {stats.sort_ms:.1f} ms, "
              f"bin {stats.bin_ms:.1f} ms, composite {stats.composite_ms:.1f} ms)")


if __name__ == "__main__":
    main()
