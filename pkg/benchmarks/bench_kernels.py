"""Compiled core vs pure-Python fallback on the hot kernels.

    python3 benchmarks/bench_kernels.py [--rays 2000] [--repeat 5]

Prints best-of-``repeat`` wall time per call for each backend and checks
that both produce identical output.
"""
import argparse
import time

import numpy as np

from heightnerf._backend import get_backend
from heightnerf.compare import random_scene_rays
from heightnerf.scenegen import SceneSpec, make_scene


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=2000)
    ap.add_argument("--samples", type=int, default=96)
    ap.add_argument("--n-intervals", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    try:
        backends = {"python": get_backend("python"), "compiled": get_backend("compiled")}
    except ImportError:
        backends = {"python": get_backend("python")}
        print("compiled core not built; timing the fallback only")

    scene = make_scene(SceneSpec())
    hf = scene.heightfield
    o, d, near, far = random_scene_rays(scene, args.rays, seed=0)
    grid = np.ascontiguousarray(hf.clean_heights(), dtype=np.float64)
    g = np.random.default_rng(0)
    r, s = args.rays, args.samples
    sigma = g.exponential(2.0, (r, s))
    deltas = g.uniform(0.01, 0.2, (r, s))
    rgb = g.random((r, s, 3))
    dcolor = g.normal(size=(r, 3))
    dfinal = g.normal(size=r)

    cases = {
        f"ais_edges ({r} rays, N={args.n_intervals})": lambda k: k.ais_edges(
            o, d, near, far, grid, float(hf.origin_x), float(hf.origin_y), float(hf.cell_size),
            args.n_intervals, 3, 2),
        f"composite_forward ({r} x {s})": lambda k: k.composite_forward(sigma, deltas, rgb),
    }
    fw = backends["python"].composite_forward(sigma, deltas, rgb)
    cases[f"composite_backward ({r} x {s})"] = lambda k: k.composite_backward(
        sigma, deltas, rgb, fw[1], fw[2], fw[3], dcolor, dfinal)

    print(f"{'kernel':42s} " + " ".join(f"{n:>12s}" for n in backends) + "   speedup  match")
    for label, fn in cases.items():
        res = {n: best_of(lambda: fn(k), args.repeat) for n, k in backends.items()}
        cols = " ".join(f"{res[n][0] * 1e3:10.2f}ms" for n in backends)
        if len(backends) == 2:
            speed = res["python"][0] / res["compiled"][0]
            a, b = res["python"][1], res["compiled"][1]
            match = all(np.allclose(x, y, rtol=1e-12, atol=1e-12) for x, y in zip(a, b))
            print(f"{label:42s} {cols} {speed:8.1f}x  {match}")
        else:
            print(f"{label:42s} {cols}")


if __name__ == "__main__":
    main()
