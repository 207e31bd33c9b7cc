"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--points 2150] [--frames 54] [--joints 9] [--repeat 5]

Prints best-of-``repeat`` wall time per kernel and the speedup of the
compiled backend, after checking that both backends agree.
"""
import argparse
import time

import numpy as np

from skelgrow import kernels


def make_inputs(P, N, K, density, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(P, 3))
    w = rng.random((P, K))
    w[rng.random((P, K)) > density] = 0.0
    w[np.arange(P), rng.integers(0, K, P)] += 1.0
    w /= w.sum(axis=1, keepdims=True)
    R = np.linalg.qr(rng.normal(size=(N, K, 3, 3)))[0]
    t = rng.normal(size=(N, K, 3))
    g = rng.normal(size=(N, P, 3))
    traj = rng.normal(size=(N, P, 3))
    joints = rng.normal(size=(N, K, 3))
    return x, w, R, t, g, traj, joints


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=2150)
    ap.add_argument("--frames", type=int, default=54)
    ap.add_argument("--joints", type=int, default=9)
    ap.add_argument("--density", type=float, default=0.25, help="fraction of nonzero blend weights")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    x, w, R, t, g, traj, joints = make_inputs(args.points, args.frames, args.joints, args.density)
    cases = {
        "lbs_forward": lambda b: b.lbs_forward(x, w, R, t),
        "lbs_backward": lambda b: b.lbs_backward(x, w, R, t, g),
        "motion_kernels": lambda b: b.motion_kernels(traj, joints),
        "nearest_neighbors": lambda b: b.nearest_neighbors(traj[0], traj[1]),
    }
    try:
        compiled = kernels.get_backend("cython")
    except ImportError:
        compiled = None
    numpy_b = kernels.get_backend("numpy")

    print(f"P={args.points} N={args.frames} K={args.joints} density={args.density}")
    print(f"{'kernel':<20}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for name, fn in cases.items():
        t_np = best_of(lambda: fn(numpy_b), args.repeat)
        if compiled is None:
            print(f"{name:<20}{t_np * 1e3:>12.2f}{'n/a':>13}{'':>9}")
            continue
        a, b = fn(numpy_b), fn(compiled)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        err = max(float(np.max(np.abs(np.asarray(u, float) - np.asarray(v, float)))) for u, v in zip(a, b))
        t_cy = best_of(lambda: fn(compiled), args.repeat)
        print(f"{name:<20}{t_np * 1e3:>12.2f}{t_cy * 1e3:>13.2f}{t_np / t_cy:>8.1f}x   max|diff|={err:.1e}")


if __name__ == "__main__":
    main()
