"""Time the compiled box kernels against the numpy fallback.

    python3 bench/bench_kernels.py [--points 20000] [--boxes 200] [--repeat 5]

Prints one line per kernel with the best-of-``repeat`` wall time of each
backend and the speed-up. Outputs of both backends are checked for agreement
before timing.
"""

import argparse
import timeit

import numpy as np

from sflabel import _kernels_py as py

try:
    from sflabel import _kernels as cy
except ImportError:  # extension not built
    cy = None


def make_inputs(n_points, n_boxes, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-40, 40, (n_points, 3))
    pts[:, 2] = rng.uniform(-2, 2, n_points)
    boxes = np.column_stack([
        rng.uniform(-40, 40, (n_boxes, 2)),
        np.full(n_boxes, -0.9),
        np.tile([2.0, 0.9, 0.8], (n_boxes, 1)) * rng.uniform(0.8, 1.5, (n_boxes, 1)),
        rng.uniform(-np.pi, np.pi, n_boxes),
    ])
    return pts, boxes


def cases(pts, boxes):
    box = boxes[0]
    mask_py = py.points_in_boxes(pts, boxes, 0.0)
    return {
        "soft_membership": lambda m: m.soft_membership(pts, box, 5.0),
        "soft_membership_grad": lambda m: m.soft_membership_grad(pts, box, 5.0),
        "points_in_boxes": lambda m: m.points_in_boxes(pts, boxes, 0.25),
        "nearest_center_assignment": lambda m: m.nearest_center_assignment(pts, boxes, mask_py),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--boxes", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    pts, boxes = make_inputs(args.points, args.boxes)
    print(f"{args.points} points, {args.boxes} boxes, best of {args.repeat}")
    if cy is None:
        print("compiled extension not available; timing numpy only")
    print(f"{'kernel':<28} {'numpy ms':>10} {'cython ms':>10} {'speed-up':>9}")
    for name, fn in cases(pts, boxes).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<28} {t_py:10.2f} {'-':>10} {'-':>9}")
            continue
        if not _same(fn(py), fn(cy)):
            raise SystemExit(f"{name}: backends disagree")
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:8.1f}x")


if __name__ == "__main__":
    main()
