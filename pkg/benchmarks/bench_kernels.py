"""Timing comparison of the box-kernel backends.

Runs iou_matrix and nms on both the compiled extension and the numpy
reference, checks they agree on each workload, and prints per-size
timings with the speedup. Usage:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from mitodet.kernels import python_ref

try:
    from mitodet.kernels import _box_kernels as compiled
except ImportError:
    compiled = None


def random_boxes(rng, n, canvas=2000.0, max_side=40.0):
    xy = rng.uniform(0.0, canvas - max_side, size=(n, 2))
    wh = rng.uniform(4.0, max_side, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats per workload (best is reported)")
    args = ap.parse_args()

    if compiled is None:
        print("compiled extension not built; showing the numpy reference only")

    rng = np.random.default_rng(0)
    rows = []

    for n in (100, 500, 2000):
        a, b = random_boxes(rng, n), random_boxes(rng, n)
        if compiled is not None:
            assert np.allclose(compiled.iou_matrix(a, b),
                               python_ref.iou_matrix(a, b), atol=0, rtol=0)
        rows.append((
            f"iou_matrix {n}x{n}",
            best_of(lambda: python_ref.iou_matrix(a, b), args.repeats),
            best_of(lambda: compiled.iou_matrix(a, b), args.repeats)
            if compiled is not None else None,
        ))

    for n in (1000, 5000, 20000):
        boxes = random_boxes(rng, n)
        scores = rng.uniform(size=n)
        if compiled is not None:
            assert np.array_equal(compiled.nms(boxes, scores, 0.5),
                                  python_ref.nms(boxes, scores, 0.5))
        rows.append((
            f"nms n={n}",
            best_of(lambda: python_ref.nms(boxes, scores, 0.5), args.repeats),
            best_of(lambda: compiled.nms(boxes, scores, 0.5), args.repeats)
            if compiled is not None else None,
        ))

    print(f"{'workload':<22}{'python (ms)':>14}{'compiled (ms)':>16}{'speedup':>10}")
    for name, t_py, t_c in rows:
        if t_c is None:
            print(f"{name:<22}{t_py * 1e3:>14.3f}{'-':>16}{'-':>10}")
        else:
            print(f"{name:<22}{t_py * 1e3:>14.3f}{t_c * 1e3:>16.3f}"
                  f"{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
