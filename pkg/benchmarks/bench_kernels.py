"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--kernels 2000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from graphsplat import backend
from graphsplat.core import GaussianCloud, ScanGeometry, uniform_angles
from graphsplat.graph import GraphConfig, graph_for_cloud
from graphsplat.phantom import PhantomSpec, desk_geometry, make_phantom, project_volume
from graphsplat.render import render_backward, render_view
from graphsplat.voxelizer import voxelize, voxelize_backward


def make_cloud(m, seed=0):
    rng = np.random.default_rng(seed)
    rot = rng.normal(size=(m, 4))
    return GaussianCloud(rng.uniform(0.01, 0.1, m), rng.uniform(-0.6, 0.6, (m, 3)),
                         rng.uniform(0.01, 0.05, (m, 3)),
                         rot / np.linalg.norm(rot, axis=1, keepdims=True),
                         np.array([[-1.0] * 3, [1.0] * 3]))


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kernels", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    cloud = make_cloud(args.kernels)
    graph = graph_for_cloud(cloud, GraphConfig())
    geo = ScanGeometry("cone", 64, 64, 4 / 64, uniform_angles(1), 4.0, 4.0)
    img = render_view(cloud, geo, 0, graph)
    grid = ((32, 32, 32), np.full(3, 2 / 32), np.full(3, -1 + 1 / 32))
    dl = np.ones(grid[0])
    vol = make_phantom(PhantomSpec("shepp-logan-3d", dims=(64, 64, 64)))
    pgeo = desk_geometry("cone", 5, (64, 64))
    jobs = {
        "render forward": lambda: render_view(cloud, geo, 0, graph),
        "render backward": lambda: render_backward(cloud, geo, 0, np.ones_like(img), graph),
        "voxelize forward": lambda: voxelize(cloud, graph, *grid),
        "voxelize backward": lambda: voxelize_backward(cloud, graph, *grid, dl),
        "ray march (5 views)": lambda: project_volume(vol, pgeo),
    }
    names = [b for b in ("python", "compiled") if b in backend.available()]
    print(f"{args.kernels} kernels, best of {args.repeat}")
    print(f"{'operation':<22}" + "".join(f"{n:>12}" for n in names) + "     speedup")
    for label, fn in jobs.items():
        t = {}
        for name in names:
            with backend.use_backend(name):
                t[name] = best_of(fn, args.repeat)
        row = f"{label:<22}" + "".join(f"{t[n]:>11.4f}s" for n in names)
        if len(names) == 2:
            row += f"  {t['python'] / t['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
